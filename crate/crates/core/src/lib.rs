//! Few-shot semantic segmentation by composing support and query images onto
//! one canvas and prompting a promptable segmenter with support-instance boxes.
//!
//! The pipeline per episode is: plan a layout, compose the canvas, derive box
//! (and optional text) prompts, call the segmenter, merge the returned masks
//! inside the query tile, map the result back to the query image and score it.

pub mod backend_gateway;
pub mod canvas_geometry;
pub mod data_ingest;
pub mod eval_runner;
pub mod metrics;
pub mod prompt_engine;
pub mod synthetic;
