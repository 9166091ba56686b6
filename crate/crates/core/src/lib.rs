//! Contrastive saliency-guided training for binary image classifiers.
//!
//! The crate computes true-class, false-class and Difference Salience class
//! activation maps, trains classifiers under saliency-supervised objectives
//! (including a passive-fooling mode that steers CAMs to the image border),
//! and evaluates them with multi-seed AUROC reports and CAM-grid renderings.

pub mod cam;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod nn;
pub mod render;
pub mod saliency_io;
pub mod training;

pub use cam::{
    compute_cam_pair, compute_class_cam, difference_salience, normalize_unit, ModelOutput,
    SalienceMap,
};
pub use error::{Error, Result};
pub use losses::{LossVariant, LossWeights};
