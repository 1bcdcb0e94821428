//! Object removal for RGB-D sequences captured by a moving camera.
//!
//! Masked pixels of a target frame are filled in two phases. Evidence that
//! other frames actually observed is fused first: source frames are ranked,
//! warped into the target view with grid-based local homographies, and
//! composited per pixel by an MRF solved with graph cuts, with depth carried
//! over through pose-graph refined rigid transforms. Whatever no source could
//! explain is then synthesized: color by multi-view exemplar patch search and
//! depth by edge-guided Laplace propagation.
//!
//! The `parallel` feature (on by default) runs the data-parallel inner loops
//! on rayon; without it every loop runs sequentially with identical results.

pub mod combine;
pub mod config;
pub mod dataset;
pub mod depth_fill;
pub mod error;
pub mod exemplar;
pub mod features;
pub mod geometry;
pub mod grid;
pub mod maxflow;
pub mod par;
pub mod pipeline;
pub mod posegraph;
pub mod selection;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
