//! Differentiable single-image novel-view rendering with view-dependent
//! effects, plus the synthetic scenes, metrics, file formats and fitting
//! drivers used to check it.

pub mod error;
pub mod fit;
pub mod geometry;
pub mod heads;
pub mod image;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod pipeline;
pub mod posefit;
pub mod reference;
pub mod renderer;
pub mod synthoracle;
pub mod vde;

pub use error::{Error, Result};
pub use image::Image;
