//! Open compound domain adaptation for semantic segmentation.
//!
//! The pipeline clusters an unlabeled, mixed target domain by image style,
//! trains a segmentation network whose batch-norm layers keep one bank per
//! discovered sub-domain, fuses the per-bank predictions with a
//! style-conditioned hypernetwork, and meta-trains the result so a single
//! entropy-gradient step adapts it to unseen domains at test time.
//!
//! Everything runs on the small reverse-mode engine in [`autodiff`], which
//! can differentiate through its own gradients.

pub mod autodiff;
pub mod bundle;
pub mod cluster;
pub mod container;
pub mod error;
pub mod fuse;
pub mod harness;
pub mod meta;
pub mod nn;
pub mod rng;
pub mod split;
pub mod synthdata;

pub use autodiff::Tensor;
pub use error::{Error, Result};
