use image::{Rgb, RgbImage};

use super::layout::{CanvasPlan, Placement};
use super::GeometryError;
use crate::data_ingest::BoxPx;

/// A composed canvas and the plan that produced it.
#[derive(Debug, Clone)]
pub struct ComposedCanvas {
    pub pixels: RgbImage,
    pub plan: CanvasPlan,
}

/// Per-axis sampling table for bilinear resampling: for each destination
/// pixel the two source taps and the weight of the second.
fn bilinear_taps(src_len: u32, dst_len: u32) -> Vec<(u32, u32, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let a = s.floor() as u32;
            let b = (a + 1).min(src_len - 1);
            (a, b, s - a as f64)
        })
        .collect()
}

/// Bilinearly resamples `src` into `rect` of `dst` (half-pixel-center
/// alignment, edge clamping).
pub fn resample_into(src: &RgbImage, dst: &mut RgbImage, rect: BoxPx) {
    let xs = bilinear_taps(src.width(), rect.width());
    let ys = bilinear_taps(src.height(), rect.height());
    for (dy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (dx, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p00 = src.get_pixel(x0, y0).0;
            let p10 = src.get_pixel(x1, y0).0;
            let p01 = src.get_pixel(x0, y1).0;
            let p11 = src.get_pixel(x1, y1).0;
            let mut out = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                out[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            dst.put_pixel(rect.x0 + dx as u32, rect.y0 + dy as u32, Rgb(out));
        }
    }
}

fn check_size(p: &Placement, img: &RgbImage) -> Result<(), GeometryError> {
    if img.dimensions() != p.source_size {
        return Err(GeometryError::Composition(format!(
            "{:?} expects a {}x{} raster, got {}x{}",
            p.role,
            p.source_size.0,
            p.source_size.1,
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Draws every image into its placement; uncovered pixels stay black.
pub fn compose(
    plan: &CanvasPlan,
    support_images: &[&RgbImage],
    query_image: &RgbImage,
) -> Result<ComposedCanvas, GeometryError> {
    let n_supports = plan.supports().count();
    if support_images.len() != n_supports {
        return Err(GeometryError::Composition(format!(
            "plan has {n_supports} supports, got {} rasters",
            support_images.len()
        )));
    }
    let (w, h) = plan.canvas_size;
    let mut pixels = RgbImage::new(w, h);
    for (p, img) in plan.supports().zip(support_images) {
        check_size(p, img)?;
        resample_into(img, &mut pixels, p.rect);
    }
    let q = plan.query();
    check_size(q, query_image)?;
    resample_into(query_image, &mut pixels, q.rect);
    Ok(ComposedCanvas {
        pixels,
        plan: plan.clone(),
    })
}

pub const PLACEMENT_COLOR: Rgb<u8> = Rgb([255, 220, 0]);
pub const POSITIVE_COLOR: Rgb<u8> = Rgb([0, 230, 0]);
pub const NEGATIVE_COLOR: Rgb<u8> = Rgb([230, 0, 0]);

pub fn draw_outline(img: &mut RgbImage, b: &BoxPx, color: Rgb<u8>, thickness: u32) {
    let (w, h) = img.dimensions();
    for t in 0..thickness {
        if b.x0 + t >= b.x1 || b.y0 + t >= b.y1 {
            break;
        }
        let (x0, y0) = (b.x0 + t, b.y0 + t);
        let (x1, y1) = ((b.x1 - 1 - t).min(w - 1), (b.y1 - 1 - t).min(h - 1));
        for x in x0..=x1 {
            img.put_pixel(x, y0, color);
            img.put_pixel(x, y1, color);
        }
        for y in y0..=y1 {
            img.put_pixel(x0, y, color);
            img.put_pixel(x1, y, color);
        }
    }
}

/// Debug rendering: placement rects plus positive/negative prompt boxes.
pub fn render_overlay(
    canvas: &ComposedCanvas,
    positives: &[BoxPx],
    negatives: &[BoxPx],
) -> RgbImage {
    let mut img = canvas.pixels.clone();
    for p in &canvas.plan.placements {
        draw_outline(&mut img, &p.rect, PLACEMENT_COLOR, 2);
    }
    for b in positives {
        draw_outline(&mut img, b, POSITIVE_COLOR, 3);
    }
    for b in negatives {
        draw_outline(&mut img, b, NEGATIVE_COLOR, 3);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas_geometry::layout::{plan_layout, LayoutSpec, LayoutVariant, SupportPosition};

    fn fr_plan(support: (u32, u32), query: (u32, u32)) -> CanvasPlan {
        let s = LayoutSpec::new(LayoutVariant::FrVertical, SupportPosition::Top, Some(0.6), 1)
            .unwrap();
        plan_layout(&s, &[support], query, (120, 100)).unwrap()
    }

    #[test]
    fn constant_query_fills_rect() {
        let plan = fr_plan((1, 1), (37, 23));
        let support = RgbImage::from_pixel(1, 1, Rgb([9, 99, 199]));
        let query = RgbImage::from_pixel(37, 23, Rgb([200, 100, 50]));
        let c = compose(&plan, &[&support], &query).unwrap();
        let q = plan.query().rect;
        for y in q.y0..q.y1 {
            for x in q.x0..q.x1 {
                assert_eq!(c.pixels.get_pixel(x, y), &Rgb([200, 100, 50]));
            }
        }
        let s = plan.support(0).unwrap().rect;
        for y in s.y0..s.y1 {
            for x in s.x0..s.x1 {
                assert_eq!(c.pixels.get_pixel(x, y), &Rgb([9, 99, 199]));
            }
        }
    }

    #[test]
    fn arp_padding_is_black() {
        let s = LayoutSpec::new(LayoutVariant::ArpTopPadded, SupportPosition::Top, None, 1).unwrap();
        let plan = plan_layout(&s, &[(10, 10)], (10, 10), (100, 100)).unwrap();
        let white = RgbImage::from_pixel(10, 10, Rgb([255, 255, 255]));
        let c = compose(&plan, &[&white], &white).unwrap();
        assert_eq!(c.pixels.get_pixel(0, 0), &Rgb([0, 0, 0]));
        assert_eq!(c.pixels.get_pixel(50, 25), &Rgb([255, 255, 255]));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let plan = fr_plan((4, 4), (8, 8));
        let wrong = RgbImage::new(5, 4);
        let ok = RgbImage::new(8, 8);
        assert!(matches!(
            compose(&plan, &[&wrong], &ok),
            Err(GeometryError::Composition(_))
        ));
        assert!(compose(&plan, &[], &ok).is_err());
    }
}
