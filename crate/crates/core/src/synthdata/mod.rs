//! Procedural source, compound-target and open-domain segmentation data.
//!
//! Every scene is a textured background with a band, a rectangle and a
//! disk painted over it; the label map records which shape covers each
//! pixel. Domains differ only by a [`StyleTransform`] applied to the
//! rendered image.

mod dataset;
mod scene;
mod style;

pub use dataset::{
    make_dataset, Counts, Dataset, DatasetSpec, DomainSpec, EvalTruth, Sealed, Split, Truth,
};
pub use scene::{
    gen_scene, gen_scene_sized, Scene, Shape, BACKGROUND, BOX, CLASS_NAMES, DISK, NUM_CLASSES,
    STRIPE,
};
pub use style::{apply_style, StyleTransform};
pub(crate) use style::luminance;
