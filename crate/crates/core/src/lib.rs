//! Automatic 3D cephalometric landmark annotation with a volumetric CNN.
//!
//! The crate covers the whole chain: CT-like volumes are resampled to 2 mm
//! voxels, padded to a fixed grid and windowed ([`volgrid`]); landmarks are
//! encoded as per-axis smooth-decay targets ([`landmarks`]) and augmented
//! rigidly ([`augment`]); a four-block axis-reduced 3D CNN with maxout and
//! per-axis softmax heads is trained with Adadelta ([`neuralcore`],
//! [`pipeline`]); and predictions are scored with grouped distance reports
//! and nonparametric tests ([`evaluate`]). Synthetic skull phantoms with
//! analytic landmarks ([`phantom`]) stand in for patient data.

pub mod augment;
pub mod cli;
pub mod error;
pub mod evaluate;
pub mod landmarks;
pub mod neuralcore;
pub mod phantom;
pub mod pipeline;
pub mod seeding;
pub mod volgrid;

pub use error::{Error, Result};
pub use landmarks::{Group, LandmarkId, LandmarkSet};
pub use volgrid::{GridSpec, Volume};
