//! Weakly-supervised monocular 3D human pose estimation with 2D pre-training.

pub mod camera;
pub mod dataset;
pub mod error;
pub mod harmonize;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod skeleton;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/skeleton.md")]
    mod skeleton {}
    #[doc = include_str!("../../../book/src/harmonize.md")]
    mod harmonize {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
