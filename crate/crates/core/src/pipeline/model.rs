//! Four axis-reduced conv blocks, dropout, a maxout dense layer and one
//! softmax head per landmark with separate x, y and z distributions.

use std::path::Path;

use rand::Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::landmarks::{decode_all, AxisProfile, AxisTargets, DecodeRule, LandmarkId, LandmarkSet};
use crate::neuralcore::adadelta::Accumulators;
use crate::neuralcore::checkpoint::{self, Block};
use crate::neuralcore::{softmax, softmax_cross_entropy, Adadelta, ConvBlock, ConvBlockSpec, Dense, Dropout, Maxout, Param, Real, Tensor4D};
use crate::seeding;
use crate::volgrid::Volume;

/// Name of the checkpoint block that records the architecture.
pub const META_BLOCK: &str = "meta.config";

/// Loss and output distributions of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    pub profiles: Vec<AxisProfile>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    blocks: Vec<ConvBlock<T>>,
    dropout: Dropout<T>,
    dense: Dense<T>,
    maxout: Maxout,
    heads: Vec<Dense<T>>,
    feature_shape: [usize; 4],
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model. Conv and dense weights come from the
    /// `init` substream; each head from its own landmark-keyed substream, so
    /// reordering `config.landmarks` reorders heads without changing them.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let k = config.maxout_k;
        let mut rng = seeding::substream(config.seed, seeding::INIT);
        let mut blocks = Vec::with_capacity(config.block_channels.len());
        let mut in_ch = 1;
        for (b, &c) in config.block_channels.iter().enumerate() {
            blocks.push(ConvBlock::new(&format!("block{b}"), ConvBlockSpec::new(in_ch, c, k), &mut rng)?);
            in_ch = c;
        }
        let fs = config.feature_spatial();
        let feature_shape = [in_ch, fs[0], fs[1], fs[2]];
        let dense = Dense::new("dense", config.feature_len(), k * config.dense_hidden, &mut rng);
        let heads = config
            .landmarks
            .iter()
            .map(|id| {
                let mut r = seeding::indexed_substream(config.seed, seeding::INIT, 1 + id.index() as u64);
                Dense::new(&format!("head.{id}"), config.dense_hidden, config.head_len(), &mut r)
            })
            .collect();
        Ok(Model {
            dropout: Dropout::new(config.dropout_rate)?,
            maxout: Maxout::new(k),
            config,
            blocks,
            dense,
            heads,
            feature_shape,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.blocks.iter().flat_map(|b| b.params()).collect();
        out.extend(self.dense.params());
        for h in &self.heads {
            out.extend(h.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        out.extend(self.dense.params_mut());
        for h in &mut self.heads {
            out.extend(h.params_mut());
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Single-channel input tensor from a normalized volume on the network grid.
    pub fn input_tensor(&self, v: &Volume) -> Result<Tensor4D<T>> {
        if v.dims() != self.config.input_dims {
            return Err(Error::Shape(format!(
                "volume dims {:?} != model input dims {:?}",
                v.dims(),
                self.config.input_dims
            )));
        }
        if !v.is_normalized() {
            return Err(Error::State("model input must be a normalized volume".into()));
        }
        let [nx, ny, nz] = v.dims();
        Tensor4D::from_vec([1, nx, ny, nz], v.data().iter().map(|&x| T::from_f64c(x)).collect())
    }

    fn split_axes(&self) -> [std::ops::Range<usize>; 3] {
        let [nx, ny, nz] = self.config.input_dims;
        [0..nx, nx..nx + ny, nx + ny..nx + ny + nz]
    }

    fn hidden(&self, x: &Tensor4D<T>) -> Result<Vec<T>> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        let z = self.dense.infer(h.values())?;
        let n = z.len();
        Ok(self.maxout.infer(&Tensor4D::from_vec([n, 1, 1, 1], z)?)?.into_values())
    }

    /// Inference-mode distributions, one profile per head in config order.
    pub fn infer(&self, x: &Tensor4D<T>) -> Result<Vec<AxisProfile>> {
        let a = self.hidden(x)?;
        let ranges = self.split_axes();
        self.heads
            .iter()
            .zip(&self.config.landmarks)
            .map(|(head, &id)| {
                let logits: Vec<f64> = head.infer(&a)?.into_iter().map(Real::to_f64c).collect();
                Ok(AxisProfile {
                    id,
                    axes: ranges.clone().map(|r| softmax(&logits[r])),
                })
            })
            .collect()
    }

    pub fn forward(&self, v: &Volume) -> Result<Vec<AxisProfile>> {
        self.infer(&self.input_tensor(v)?)
    }

    /// Voxel-frame prediction on the network grid.
    pub fn predict_voxel(&self, v: &Volume) -> Result<LandmarkSet> {
        decode_all(&self.forward(v)?, self.config.decode)
    }

    /// Summed per-axis cross-entropy in inference mode.
    pub fn loss(&self, x: &Tensor4D<T>, targets: &AxisTargets) -> Result<f64> {
        let a = self.hidden(x)?;
        let ranges = self.split_axes();
        let mut total = 0.0;
        for (head, &id) in self.heads.iter().zip(&self.config.landmarks) {
            let t = target_for(targets, id)?;
            let logits: Vec<f64> = head.infer(&a)?.into_iter().map(Real::to_f64c).collect();
            for (axis, r) in ranges.clone().into_iter().enumerate() {
                total += softmax_cross_entropy(&logits[r], &t.axes[axis])?.0;
            }
        }
        Ok(total)
    }

    /// Forward and backward pass; gradients are added to each parameter's
    /// `grad`. The loss and its logit gradient are evaluated in `f64`.
    pub fn accumulate(
        &mut self,
        x: &Tensor4D<T>,
        targets: &AxisTargets,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<StepResult> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&h)?;
        }
        if h.shape() != self.feature_shape {
            return Err(Error::Shape(format!(
                "feature map {:?} != expected {:?}",
                h.shape(),
                self.feature_shape
            )));
        }
        let d = self.dropout.forward(h.values(), training, rng);
        let z = self.dense.forward(&d)?;
        let zn = z.len();
        let a = self.maxout.forward(&Tensor4D::from_vec([zn, 1, 1, 1], z)?)?.into_values();

        let ranges = self.split_axes();
        let mut loss = 0.0;
        let mut profiles = Vec::with_capacity(self.heads.len());
        let mut da = vec![T::zero(); a.len()];
        for (head, &id) in self.heads.iter_mut().zip(&self.config.landmarks) {
            let t = target_for(targets, id)?;
            let logits: Vec<f64> = head.forward(&a)?.into_iter().map(Real::to_f64c).collect();
            let mut dlogits = vec![T::zero(); logits.len()];
            let mut axes: [Vec<f64>; 3] = Default::default();
            for (axis, r) in ranges.clone().into_iter().enumerate() {
                let (l, p, g) = softmax_cross_entropy(&logits[r.clone()], &t.axes[axis])?;
                loss += l;
                for (dst, gv) in dlogits[r].iter_mut().zip(g) {
                    *dst = T::from_f64c(gv);
                }
                axes[axis] = p;
            }
            profiles.push(AxisProfile { id, axes });
            let dh = head.backward(&dlogits, true)?.expect("dx requested");
            for (acc, g) in da.iter_mut().zip(dh) {
                *acc += g;
            }
        }

        let dz = self.maxout.backward(&Tensor4D::from_vec([a.len(), 1, 1, 1], da)?)?;
        let dd = self.dense.backward(dz.values(), true)?.expect("dx requested");
        let mut g = Tensor4D::from_vec(self.feature_shape, self.dropout.backward(&dd))?;
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            if let Some(dx) = b.backward(&g, i != 0)? {
                g = dx;
            }
        }
        Ok(StepResult { loss, profiles })
    }

    /// Parameters, the architecture record, and optimizer state if given.
    pub fn to_blocks(&self, optimizer: Option<&Adadelta<T>>) -> Vec<Block> {
        let c = &self.config;
        let mut meta = vec![
            c.input_dims[0] as f64,
            c.input_dims[1] as f64,
            c.input_dims[2] as f64,
        ];
        meta.extend(c.block_channels.iter().map(|&v| v as f64));
        meta.extend([
            c.maxout_k as f64,
            c.dense_hidden as f64,
            c.dropout_rate,
            c.sigma,
            c.spacing,
            c.pad_hu,
            match c.decode {
                DecodeRule::Argmax => 0.0,
                DecodeRule::Expectation => 1.0,
            },
        ]);
        let mut blocks = vec![Block::from_slice(META_BLOCK, &[meta.len()], &meta)];
        blocks.extend(checkpoint::collect_blocks(&self.params(), optimizer));
        blocks
    }

    /// Rebuilds a model from checkpoint blocks. Head order follows the order
    /// of the `head.<id>.weight` blocks.
    pub fn from_blocks(blocks: &[Block]) -> Result<(Self, Option<Vec<Accumulators<T>>>)> {
        let meta = blocks
            .iter()
            .find(|b| b.name == META_BLOCK)
            .ok_or_else(|| Error::Shape(format!("checkpoint has no {META_BLOCK} block")))?;
        let m = &meta.values;
        if m.len() != 14 {
            return Err(Error::Shape(format!("{META_BLOCK} has {} values, expected 14", m.len())));
        }
        let landmarks = blocks
            .iter()
            .filter_map(|b| b.name.strip_prefix("head.")?.strip_suffix(".weight"))
            .map(|s| s.parse::<LandmarkId>())
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig {
            input_dims: [m[0] as usize, m[1] as usize, m[2] as usize],
            block_channels: m[3..7].iter().map(|&v| v as usize).collect(),
            maxout_k: m[7] as usize,
            dense_hidden: m[8] as usize,
            dropout_rate: m[9] as f64,
            sigma: m[10] as f64,
            spacing: m[11] as f64,
            pad_hu: m[12] as f64,
            decode: if m[13] == 0.0 { DecodeRule::Argmax } else { DecodeRule::Expectation },
            landmarks,
            seed: 0,
        };
        let mut model = Model::build(config)?;
        let accs = checkpoint::restore(blocks, &mut model.params_mut())?;
        Ok((model, accs))
    }

    pub fn save(&self, path: impl AsRef<Path>, optimizer: Option<&Adadelta<T>>) -> Result<()> {
        checkpoint::write(path, &self.to_blocks(optimizer))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let blocks = checkpoint::read(path)?;
        Model::from_blocks(&blocks).map(|(m, _)| m).map_err(|e| match e {
            Error::Shape(d) => Error::format(path, d),
            other => other,
        })
    }
}

fn target_for(targets: &AxisTargets, id: LandmarkId) -> Result<&AxisProfile> {
    targets
        .get(id)
        .ok_or_else(|| Error::InvalidArgument(format!("no training target for landmark {id}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::{encode_targets, Frame};
    use crate::pipeline::config::Profile;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dims: [16, 16, 20],
            block_channels: vec![2, 2, 3, 3],
            dense_hidden: 8,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    fn ramp_volume(dims: [usize; 3]) -> Volume {
        let v = Volume::from_fn(dims, [2.0; 3], [0.0; 3], |i, j, k| {
            -1000.0 + 30.0 * ((i * 7 + j * 3 + k * 5) % 47) as f64
        })
        .unwrap();
        crate::volgrid::normalize(&v).unwrap()
    }

    fn centre_targets(cfg: &ModelConfig) -> AxisTargets {
        let d = cfg.input_dims;
        let lm = LandmarkSet::from_points(
            Frame::Voxel,
            LandmarkId::ALL
                .iter()
                .enumerate()
                .map(|(i, &id)| (id, [(i % d[0]) as f64, (d[1] / 2) as f64, (d[2] - 1 - i) as f64])),
        );
        encode_targets(&lm, d, cfg.sigma).unwrap()
    }

    #[test]
    fn default_head_layout() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.landmarks.len(), 12);
        assert_eq!(cfg.head_len(), 128 + 128 + 152);
        assert_eq!(12 * cfg.head_len(), 4896);
        let toy = ModelConfig {
            input_dims: [32, 32, 32],
            ..ModelConfig::profile(Profile::Toy)
        };
        assert_eq!(toy.feature_spatial(), [2, 2, 2]);
    }

    #[test]
    fn small_dims_rejected() {
        let cfg = ModelConfig {
            input_dims: [16, 8, 16],
            ..tiny_config()
        };
        assert!(matches!(Model::<f32>::build(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::build(tiny_config()).unwrap();
        let b = Model::<f32>::build(tiny_config()).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.name, q.name);
            assert!(p.value.iter().zip(&q.value).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn outputs_are_distributions_and_repeatable() {
        let m = Model::<f32>::build(tiny_config()).unwrap();
        let v = ramp_volume(m.config().input_dims);
        let a = m.forward(&v).unwrap();
        let b = m.forward(&v).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        for p in &a {
            for (axis, probs) in p.axes.iter().enumerate() {
                assert_eq!(probs.len(), m.config().input_dims[axis]);
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                assert!(probs.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn input_checks() {
        let m = Model::<f32>::build(tiny_config()).unwrap();
        let raw = Volume::filled([16, 16, 20], [2.0; 3], [0.0; 3], -1000.0).unwrap();
        assert!(matches!(m.forward(&raw), Err(Error::State(_))));
        let wrong = ramp_volume([16, 16, 16]);
        assert!(matches!(m.forward(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn permuting_heads_permutes_outputs() {
        let cfg = tiny_config();
        let mut rev = cfg.clone();
        rev.landmarks.reverse();
        let a = Model::<f32>::build(cfg).unwrap();
        let b = Model::<f32>::build(rev).unwrap();
        let v = ramp_volume(a.config().input_dims);
        let pa = a.forward(&v).unwrap();
        let pb = b.forward(&v).unwrap();
        for p in &pa {
            let q = pb.iter().find(|q| q.id == p.id).unwrap();
            assert_eq!(p, q);
        }
        assert_eq!(pa[0].id, pb[11].id);
    }

    #[test]
    fn training_pass_matches_inference_without_dropout() {
        let mut m = Model::<f64>::build(tiny_config()).unwrap();
        let v = ramp_volume(m.config().input_dims);
        let t = centre_targets(m.config());
        let x = m.input_tensor(&v).unwrap();
        let inferred = m.loss(&x, &t).unwrap();
        let step = m.accumulate(&x, &t, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((step.loss - inferred).abs() < 1e-9 * inferred);
        assert!(step.loss >= t.entropy() - 1e-6);
        assert_eq!(step.profiles, m.infer(&x).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut cfg = tiny_config();
        cfg.landmarks.swap(0, 5);
        let m = Model::<f32>::build(cfg).unwrap();
        let blocks = m.to_blocks(None);
        let (back, accs) = Model::<f32>::from_blocks(&checkpoint::decode(&checkpoint::encode(&blocks)).unwrap()).unwrap();
        assert!(accs.is_none());
        assert_eq!(back.config().landmarks, m.config().landmarks);
        let v = ramp_volume(m.config().input_dims);
        let a = m.forward(&v).unwrap();
        let b = back.forward(&v).unwrap();
        for (p, q) in a.iter().zip(&b) {
            for axis in 0..3 {
                assert!(p.axes[axis].iter().zip(&q.axes[axis]).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
