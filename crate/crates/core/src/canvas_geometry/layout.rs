use std::fmt;

use serde::{Deserialize, Serialize};

use super::GeometryError;
use crate::data_ingest::BoxPx;

pub const DEFAULT_CANVAS_SIZE: (u32, u32) = (1008, 1008);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutVariant {
    ArpTopPadded,
    FrHorizontal,
    FrVertical,
    Grid2x3,
    VerticalStrip,
    HorizontalStrip,
    InverseL,
}

impl LayoutVariant {
    pub fn shot(self) -> usize {
        match self {
            LayoutVariant::ArpTopPadded | LayoutVariant::FrHorizontal | LayoutVariant::FrVertical => 1,
            _ => 5,
        }
    }

    pub fn takes_ratio(self) -> bool {
        !matches!(self, LayoutVariant::ArpTopPadded | LayoutVariant::Grid2x3)
    }

    fn positions(self) -> &'static [SupportPosition] {
        use SupportPosition::*;
        match self {
            LayoutVariant::ArpTopPadded => &[Top],
            LayoutVariant::FrHorizontal => &[Left],
            LayoutVariant::FrVertical => &[Top, Bottom],
            LayoutVariant::Grid2x3 => &[Grid],
            LayoutVariant::VerticalStrip => &[Left],
            LayoutVariant::HorizontalStrip => &[Top],
            LayoutVariant::InverseL => &[TopLeft],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportPosition {
    Top,
    Bottom,
    Left,
    TopLeft,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    pub variant: LayoutVariant,
    pub support_position: SupportPosition,
    #[serde(default)]
    pub ratio: Option<f64>,
    pub shot: usize,
}

impl LayoutSpec {
    pub fn new(
        variant: LayoutVariant,
        support_position: SupportPosition,
        ratio: Option<f64>,
        shot: usize,
    ) -> Result<Self, GeometryError> {
        let spec = Self {
            variant,
            support_position,
            ratio,
            shot,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let v = self.variant;
        if !v.positions().contains(&self.support_position) {
            return Err(GeometryError::Layout(format!(
                "{v:?} cannot place supports at {:?}",
                self.support_position
            )));
        }
        match (v.takes_ratio(), self.ratio) {
            (true, None) => {
                return Err(GeometryError::Layout(format!("{v:?} requires a ratio")))
            }
            (false, Some(_)) => {
                return Err(GeometryError::Layout(format!("{v:?} does not take a ratio")))
            }
            (true, Some(r)) if !(r > 0.0 && r < 1.0) => {
                return Err(GeometryError::Layout(format!(
                    "ratio {r} outside (0, 1)"
                )))
            }
            _ => {}
        }
        if self.shot != v.shot() {
            return Err(GeometryError::Layout(format!(
                "{v:?} is a {}-shot layout, got shot {}",
                v.shot(),
                self.shot
            )));
        }
        Ok(())
    }

    /// Row label in ablation tables, e.g. `FR (Vertical) Top 0.6`.
    pub fn label(&self) -> String {
        let name = match self.variant {
            LayoutVariant::ArpTopPadded => "ARP",
            LayoutVariant::FrHorizontal => "FR (Horizontal)",
            LayoutVariant::FrVertical => "FR (Vertical)",
            LayoutVariant::Grid2x3 => "Uniform Grid",
            LayoutVariant::VerticalStrip => "Vertical Strip",
            LayoutVariant::HorizontalStrip => "Horizontal Strip",
            LayoutVariant::InverseL => "Inverse L-shape",
        };
        let pos = match (self.variant, self.support_position) {
            (LayoutVariant::ArpTopPadded, _) => "Top (Padded)",
            (_, SupportPosition::Top) => "Top",
            (_, SupportPosition::Bottom) => "Bottom",
            (_, SupportPosition::Left) => "Left",
            (_, SupportPosition::TopLeft) => "Top-Left",
            (_, SupportPosition::Grid) => "2x3 Grid",
        };
        match self.ratio {
            Some(r) => format!("{name} {pos} {r}"),
            None => format!("{name} {pos}"),
        }
    }
}

/// The eleven layout configurations of the layout ablation, in table order:
/// six one-shot rows followed by five five-shot rows.
pub fn layout_ablation_rows() -> Vec<LayoutSpec> {
    use LayoutVariant::*;
    use SupportPosition::*;
    let row = |variant, pos, ratio, shot| LayoutSpec {
        variant,
        support_position: pos,
        ratio,
        shot,
    };
    vec![
        row(ArpTopPadded, Top, None, 1),
        row(FrHorizontal, Left, Some(0.5), 1),
        row(FrVertical, Bottom, Some(0.5), 1),
        row(FrVertical, Bottom, Some(0.6), 1),
        row(FrVertical, Top, Some(0.5), 1),
        row(FrVertical, Top, Some(0.6), 1),
        row(Grid2x3, Grid, None, 5),
        row(VerticalStrip, Left, Some(0.4), 5),
        row(HorizontalStrip, Top, Some(0.3), 5),
        row(InverseL, TopLeft, Some(0.4), 5),
        row(InverseL, TopLeft, Some(0.3), 5),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Support { index: usize },
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub role: Role,
    pub rect: BoxPx,
    /// `(width, height)` of the original image.
    pub source_size: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasPlan {
    /// `(width, height)`
    pub canvas_size: (u32, u32),
    /// Supports in index order, then the query.
    pub placements: Vec<Placement>,
}

impl CanvasPlan {
    pub fn query(&self) -> &Placement {
        self.placements
            .iter()
            .find(|p| p.role == Role::Query)
            .expect("plan always has a query placement")
    }

    pub fn support(&self, index: usize) -> Option<&Placement> {
        self.placements
            .iter()
            .find(|p| p.role == Role::Support { index })
    }

    pub fn supports(&self) -> impl Iterator<Item = &Placement> {
        self.placements
            .iter()
            .filter(|p| matches!(p.role, Role::Support { .. }))
    }

    pub fn canvas_rect(&self) -> BoxPx {
        BoxPx::new(0, 0, self.canvas_size.0, self.canvas_size.1)
    }
}

impl fmt::Display for CanvasPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "canvas {}x{}", self.canvas_size.0, self.canvas_size.1)?;
        for p in &self.placements {
            let r = p.rect;
            write!(f, "; {:?} ({},{},{},{})", p.role, r.x0, r.y0, r.x1, r.y1)?;
        }
        Ok(())
    }
}

/// `floor(ratio * extent)`, tolerant of products that land a hair below an
/// integer in binary floating point.
pub fn band_extent(ratio: f64, extent: u32) -> u32 {
    ((ratio * extent as f64) + 1e-9).floor() as u32
}

/// `i`-th of `n` near-equal cells over `start..start+len`.
fn cell(start: u32, len: u32, n: u32, i: u32) -> (u32, u32) {
    let len = len as u64;
    let a = start + (i as u64 * len / n as u64) as u32;
    let b = start + ((i as u64 + 1) * len / n as u64) as u32;
    (a, b)
}

fn letterbox(source: (u32, u32), region: BoxPx) -> BoxPx {
    let (sw, sh) = (source.0 as f64, source.1 as f64);
    let (rw, rh) = (region.width(), region.height());
    let scale = (rw as f64 / sw).min(rh as f64 / sh);
    let w = ((sw * scale).round() as u32).clamp(1, rw);
    let h = ((sh * scale).round() as u32).clamp(1, rh);
    let x0 = region.x0 + (rw - w) / 2;
    let y0 = region.y0 + (rh - h) / 2;
    BoxPx::new(x0, y0, x0 + w, y0 + h)
}

/// Places every support and the query on the canvas.
///
/// All fractional extents are floored and the query absorbs the remainder.
pub fn plan_layout(
    layout: &LayoutSpec,
    support_sizes: &[(u32, u32)],
    query_size: (u32, u32),
    canvas_size: (u32, u32),
) -> Result<CanvasPlan, GeometryError> {
    layout.validate()?;
    if support_sizes.len() != layout.shot {
        return Err(GeometryError::Layout(format!(
            "{} support images for a {}-shot layout",
            support_sizes.len(),
            layout.shot
        )));
    }
    for &(w, h) in support_sizes.iter().chain(std::iter::once(&query_size)) {
        if w == 0 || h == 0 {
            return Err(GeometryError::Layout("zero-sized source image".into()));
        }
    }
    let (cw, ch) = canvas_size;
    let ratio = layout.ratio.unwrap_or(0.0);
    let mut support_rects: Vec<BoxPx> = Vec::with_capacity(layout.shot);
    let query_rect;

    match (layout.variant, layout.support_position) {
        (LayoutVariant::FrVertical, SupportPosition::Top) => {
            let b = band_extent(ratio, ch);
            support_rects.push(BoxPx::new(0, 0, cw, b));
            query_rect = BoxPx::new(0, b, cw, ch);
        }
        (LayoutVariant::FrVertical, _) => {
            let b = band_extent(ratio, ch);
            support_rects.push(BoxPx::new(0, ch - b, cw, ch));
            query_rect = BoxPx::new(0, 0, cw, ch - b);
        }
        (LayoutVariant::FrHorizontal, _) => {
            let b = band_extent(ratio, cw);
            support_rects.push(BoxPx::new(0, 0, b, ch));
            query_rect = BoxPx::new(b, 0, cw, ch);
        }
        (LayoutVariant::ArpTopPadded, _) => {
            let mid = ch / 2;
            support_rects.push(letterbox(support_sizes[0], BoxPx::new(0, 0, cw, mid)));
            query_rect = letterbox(query_size, BoxPx::new(0, mid, cw, ch));
        }
        (LayoutVariant::Grid2x3, _) => {
            let mut cells = Vec::with_capacity(6);
            for row in 0..2 {
                let (y0, y1) = cell(0, ch, 2, row);
                for col in 0..3 {
                    let (x0, x1) = cell(0, cw, 3, col);
                    cells.push(BoxPx::new(x0, y0, x1, y1));
                }
            }
            query_rect = cells.pop().expect("six cells");
            support_rects = cells;
        }
        (LayoutVariant::HorizontalStrip, _) => {
            let b = band_extent(ratio, ch);
            for i in 0..5 {
                let (x0, x1) = cell(0, cw, 5, i);
                support_rects.push(BoxPx::new(x0, 0, x1, b));
            }
            query_rect = BoxPx::new(0, b, cw, ch);
        }
        (LayoutVariant::VerticalStrip, _) => {
            let b = band_extent(ratio, cw);
            for i in 0..5 {
                let (y0, y1) = cell(0, ch, 5, i);
                support_rects.push(BoxPx::new(0, y0, b, y1));
            }
            query_rect = BoxPx::new(b, 0, cw, ch);
        }
        (LayoutVariant::InverseL, _) => {
            let top = band_extent(ratio, ch);
            let left = band_extent(ratio, cw);
            for i in 0..3 {
                let (x0, x1) = cell(0, cw, 3, i);
                support_rects.push(BoxPx::new(x0, 0, x1, top));
            }
            for i in 0..2 {
                let (y0, y1) = cell(top, ch - top, 2, i);
                support_rects.push(BoxPx::new(0, y0, left, y1));
            }
            query_rect = BoxPx::new(left, top, cw, ch);
        }
    }

    let mut placements: Vec<Placement> = support_rects
        .into_iter()
        .zip(support_sizes)
        .enumerate()
        .map(|(index, (rect, &source_size))| Placement {
            role: Role::Support { index },
            rect,
            source_size,
        })
        .collect();
    placements.push(Placement {
        role: Role::Query,
        rect: query_rect,
        source_size: query_size,
    });
    if let Some(p) = placements.iter().find(|p| p.rect.is_empty()) {
        return Err(GeometryError::Layout(format!(
            "{:?} collapses to an empty rectangle on a {cw}x{ch} canvas",
            p.role
        )));
    }
    Ok(CanvasPlan {
        canvas_size,
        placements,
    })
}
