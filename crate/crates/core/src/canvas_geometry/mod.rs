//! Canvas layouts, composition, and the coordinate maps between source images
//! and canvas tiles.

mod compose;
mod layout;
mod transform;

use thiserror::Error;

pub use compose::{
    compose, draw_outline, render_overlay, resample_into, ComposedCanvas, NEGATIVE_COLOR,
    PLACEMENT_COLOR, POSITIVE_COLOR,
};
pub use layout::{
    band_extent, layout_ablation_rows, plan_layout, CanvasPlan, LayoutSpec, LayoutVariant,
    Placement, Role, SupportPosition, DEFAULT_CANVAS_SIZE,
};
pub use transform::{from_canvas_box, from_canvas_mask, to_canvas_box, to_canvas_mask, MappedBox};
pub(crate) use transform::paint_mask;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("layout error: {0}")]
    Layout(String),
    #[error("composition error: {0}")]
    Composition(String),
}
