//! The trainable landmark model: configuration, network, training loop and
//! raw-volume prediction.

pub mod config;
pub mod model;
pub mod train;

pub use config::{DatasetConfig, ModelConfig, Profile, RunConfig, TrainConfig};
pub use model::{Model, StepResult};
pub use train::{best_checkpoint_path, prepare_sample, train, EpochRecord, Sample, TrainingLog};

use crate::error::{Error, Result};
use crate::landmarks::{landmarks_voxel_to_world, LandmarkSet};
use crate::neuralcore::Real;
use crate::volgrid::Volume;

/// World-frame landmarks for a raw volume. The volume is resampled, padded
/// and normalized onto the network grid, decoded there, and mapped back to
/// mm through that grid's spacing and origin.
pub fn predict<T: Real>(model: &Model<T>, raw: &Volume) -> Result<LandmarkSet> {
    if raw.is_normalized() {
        return Err(Error::State("predict expects a raw HU volume".into()));
    }
    let grid = model.config().grid().preprocess(raw)?;
    landmarks_voxel_to_world(&model.predict_voxel(&grid)?, &grid)
}
