//! Adadelta training loop with optional rigid augmentation.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::{ModelConfig, TrainConfig};
use super::model::Model;
use crate::augment::{augment_sample, AugmentConfig};
use crate::error::{Error, Result};
use crate::landmarks::{decode_all, encode_targets, landmarks_voxel_to_world, landmarks_world_to_voxel, Frame, LandmarkSet};
use crate::neuralcore::{Adadelta, AdadeltaConfig, Real};
use crate::seeding;
use crate::volgrid::Volume;

/// Rejections tolerated per augmented draw before the raw sample is used.
pub const AUGMENT_TRIES: usize = 16;

/// A training example on the network grid: normalized volume plus
/// voxel-frame landmarks.
#[derive(Debug, Clone)]
pub struct Sample {
    pub volume: Volume,
    pub landmarks: LandmarkSet,
}

/// Brings a volume and its landmarks onto the network grid. Volumes that
/// are already normalized at the input dims are used as-is.
pub fn prepare_sample(cfg: &ModelConfig, volume: &Volume, landmarks: &LandmarkSet) -> Result<Sample> {
    landmarks.require_complete()?;
    let world = match landmarks.frame() {
        Frame::World => landmarks.clone(),
        Frame::Voxel => landmarks_voxel_to_world(landmarks, volume)?,
    };
    let grid_volume = if volume.is_normalized() {
        if volume.dims() != cfg.input_dims {
            return Err(Error::Shape(format!(
                "normalized volume {:?} is not on the {:?} network grid",
                volume.dims(),
                cfg.input_dims
            )));
        }
        volume.clone()
    } else {
        cfg.grid().preprocess(volume)?
    };
    let voxel = landmarks_world_to_voxel(&world, &grid_volume)?;
    Ok(Sample {
        volume: grid_volume,
        landmarks: voxel,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_3d_err_mm: f64,
    /// Mean summed entropy of the targets seen this epoch; the loss floor.
    pub mean_target_entropy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    /// `epoch<TAB>mean_loss<TAB>mean_3d_err_mm`, one line per epoch.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(s, "{}\t{:.6}\t{:.4}", r.epoch, r.mean_loss, r.mean_3d_err_mm);
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .min_by(|a, b| a.mean_loss.total_cmp(&b.mean_loss))
    }
}

/// Path of the best-epoch checkpoint next to `path`.
pub fn best_checkpoint_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}

fn check_samples<T: Real>(model: &Model<T>, data: &[Sample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    for (i, s) in data.iter().enumerate() {
        if s.volume.dims() != model.config().input_dims || !s.volume.is_normalized() {
            return Err(Error::Shape(format!(
                "sample {i}: expected a normalized {:?} volume",
                model.config().input_dims
            )));
        }
        if s.landmarks.frame() != Frame::Voxel {
            return Err(Error::InvalidArgument(format!("sample {i}: landmarks must be voxel-frame")));
        }
        if let Some(missing) = crate::landmarks::LandmarkId::ALL
            .iter()
            .find(|id| s.landmarks.get(**id).is_none())
        {
            return Err(Error::IncompleteData {
                subject: format!("sample {i}"),
                landmark: missing.to_string(),
            });
        }
    }
    Ok(())
}

/// Mean Euclidean distance in mm between two voxel-frame sets on `v`'s grid.
fn mean_error_mm(pred: &LandmarkSet, truth: &LandmarkSet, v: &Volume) -> f64 {
    let sp = v.spacing();
    let mut total = 0.0;
    let mut n = 0usize;
    for (id, t) in truth.iter() {
        if let Some(p) = pred.get(id) {
            total += (0..3).map(|a| ((p[a] - t[a]) * sp[a]).powi(2)).sum::<f64>().sqrt();
            n += 1;
        }
    }
    total / n.max(1) as f64
}

/// Trains `model` in place and returns the per-epoch log.
///
/// Every epoch visits each sample `tc.presentations()` times in an order
/// drawn from the shuffle stream. Each batch accumulates gradients, averages
/// them and takes one Adadelta step. Dropout and augmentation draw from the
/// model seed's substreams.
pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &[Sample],
    tc: &TrainConfig,
    aug: &AugmentConfig,
    optim: AdadeltaConfig,
) -> Result<TrainingLog> {
    tc.validate()?;
    aug.validate()?;
    check_samples(model, data)?;
    let seed = model.config().seed;
    let sigma = model.config().sigma;
    let dims = model.config().input_dims;
    let mut optimizer = Adadelta::new(optim);
    let mut dropout_rng = seeding::substream(seed, seeding::DROPOUT);
    let mut augment_rng = seeding::substream(seed, seeding::AUGMENT);
    let mut shuffle_rng = seeding::substream(tc.shuffle_seed, seeding::SHUFFLE);

    let reps = tc.presentations();
    let mut order: Vec<usize> = (0..data.len()).flat_map(|i| std::iter::repeat_n(i, reps)).collect();
    let mut log = TrainingLog::default();
    let mut best = f64::INFINITY;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut err_sum, mut ent_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(tc.batch_size) {
            model.zero_grad();
            for &i in batch {
                let s = &data[i];
                let (vol, lm) = if aug.enabled {
                    let (v, l, _) = augment_sample(&s.volume, &s.landmarks, aug, augment_rng.gen(), AUGMENT_TRIES)?;
                    (Cow::Owned(v), Cow::Owned(l))
                } else {
                    (Cow::Borrowed(&s.volume), Cow::Borrowed(&s.landmarks))
                };
                let targets = encode_targets(&lm, dims, sigma)?;
                let x = model.input_tensor(&vol)?;
                let step = model.accumulate(&x, &targets, true, &mut dropout_rng)?;
                if !step.loss.is_finite() {
                    return Err(Error::Diverged(format!("epoch {epoch}: non-finite loss {}", step.loss)));
                }
                loss_sum += step.loss;
                ent_sum += targets.entropy();
                let pred = decode_all(&step.profiles, model.config().decode)?;
                err_sum += mean_error_mm(&pred, &lm, &vol);
            }
            if batch.len() > 1 {
                let scale = T::from_f64c(1.0 / batch.len() as f64);
                for p in model.params_mut() {
                    p.grad.iter_mut().for_each(|g| *g *= scale);
                }
            }
            optimizer.step(&mut model.params_mut()).map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
        }
        let n = order.len() as f64;
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / n,
            mean_3d_err_mm: err_sum / n,
            mean_target_entropy: ent_sum / n,
        };
        log.records.push(record);
        if record.mean_loss < best {
            best = record.mean_loss;
            if let Some(path) = &tc.checkpoint {
                model.save(best_checkpoint_path(path), Some(&optimizer))?;
            }
        }
    }
    if let Some(path) = &tc.checkpoint {
        model.save(path, Some(&optimizer))?;
    }
    Ok(log)
}
