//! Central finite-difference checks of every layer's backward pass, run in
//! double precision on random small shapes.
//!
//! Each check reduces a layer output to a scalar with a random projection
//! `L = sum(r * f(x))`, feeds `r` as the upstream gradient, and compares
//! the analytic input and parameter gradients against
//! `(L(x + h) - L(x - h)) / 2h`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{Conv3d, ConvBlock, ConvBlockSpec, STAGE_KERNELS};
use super::layers::{Dense, Dropout, MaxPool3d, Maxout};
use super::loss::softmax_cross_entropy;
use super::tensor::{Param, Tensor4D};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
/// Below this magnitude the relative error is measured against the floor,
/// so vanishing gradients are judged on absolute agreement.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: String,
    pub cases: usize,
    pub max_rel_error: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOL
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn project(y: &[f64], r: &[f64]) -> f64 {
    y.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Distinct values at least 0.01 apart, shuffled, so no max selection can
/// flip under a finite-difference probe.
fn separated_values(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(rng);
    v
}

fn rand_spatial(rng: &mut impl Rng, lo: usize, hi: usize) -> [usize; 3] {
    [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]
}

/// Checks one parameter block by perturbing it in place on a clone.
fn param_error<L: Clone>(
    layer: &L,
    get: impl Fn(&mut L) -> &mut Param<f64>,
    analytic: &[f64],
    mut loss: impl FnMut(&mut L) -> f64,
) -> f64 {
    let mut probe = layer.clone();
    let values = get(&mut probe).value.clone();
    let numeric = numeric_gradient(&values, FD_STEP, |v| {
        get(&mut probe).value.copy_from_slice(v);
        loss(&mut probe)
    });
    max_relative_error(analytic, &numeric)
}

fn check_conv(kernel: [usize; 3], rng: &mut ChaCha8Rng) -> f64 {
    let in_ch = rng.gen_range(1..=3);
    let out_ch = rng.gen_range(1..=3);
    let s = rand_spatial(rng, 2, 6);
    let mut conv = Conv3d::<f64>::new("c", in_ch, out_ch, kernel, rng);
    conv.bias.value = rand_vec(out_ch, rng);
    let x = Tensor4D::random([in_ch, s[0], s[1], s[2]], -1.0, 1.0, rng);
    let r = rand_vec(out_ch * s.iter().product::<usize>(), rng);

    conv.forward(&x).unwrap();
    let dy = Tensor4D::from_vec([out_ch, s[0], s[1], s[2]], r.clone()).unwrap();
    let dx = conv.backward(&dy, true).unwrap().unwrap();

    let fresh = conv.clone();
    let mut err = {
        let mut c = fresh.clone();
        let numeric = numeric_gradient(x.values(), FD_STEP, |v| {
            let xt = Tensor4D::from_vec(x.shape(), v.to_vec()).unwrap();
            project(c.forward(&xt).unwrap().values(), &r)
        });
        max_relative_error(dx.values(), &numeric)
    };
    let loss = |c: &mut Conv3d<f64>| project(c.forward(&x).unwrap().values(), &r);
    err = err.max(param_error(&fresh, |c| &mut c.weight, &conv.weight.grad, loss));
    err = err.max(param_error(&fresh, |c| &mut c.bias, &conv.bias.grad, loss));
    err
}

fn check_block(rng: &mut ChaCha8Rng) -> f64 {
    let spec = ConvBlockSpec::new(rng.gen_range(1..=2), rng.gen_range(1..=2), 2);
    let mut block = ConvBlock::<f64>::new("b", spec, rng).unwrap();
    let s = rand_spatial(rng, 2, 5);
    let x = Tensor4D::random([spec.in_channels, s[0], s[1], s[2]], -1.0, 1.0, rng);
    let y = block.forward(&x).unwrap();
    let r = rand_vec(y.values().len(), rng);
    let dy = Tensor4D::from_vec(y.shape(), r.clone()).unwrap();
    let dx = block.backward(&dy, true).unwrap().unwrap();

    let mut probe = block.clone();
    let numeric = numeric_gradient(x.values(), FD_STEP, |v| {
        let xt = Tensor4D::from_vec(x.shape(), v.to_vec()).unwrap();
        project(probe.forward(&xt).unwrap().values(), &r)
    });
    let mut err = max_relative_error(dx.values(), &numeric);
    for stage in 0..3 {
        let loss = |b: &mut ConvBlock<f64>| project(b.forward(&x).unwrap().values(), &r);
        err = err.max(param_error(&block, |b| &mut b.stages[stage].weight, &block.stages[stage].weight.grad, loss));
        err = err.max(param_error(&block, |b| &mut b.stages[stage].bias, &block.stages[stage].bias.grad, loss));
    }
    err
}

fn check_maxout(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.gen_range(2..=3);
    let out_c = rng.gen_range(1..=3);
    let s = rand_spatial(rng, 1, 4);
    let shape = [k * out_c, s[0], s[1], s[2]];
    let x = Tensor4D::from_vec(shape, separated_values(shape.iter().product(), rng)).unwrap();
    let mut m = Maxout::new(k);
    let y = m.forward(&x).unwrap();
    let r = rand_vec(y.values().len(), rng);
    let dx = m.backward(&Tensor4D::from_vec(y.shape(), r.clone()).unwrap()).unwrap();
    let numeric = numeric_gradient(x.values(), FD_STEP, |v| {
        let xt = Tensor4D::from_vec(shape, v.to_vec()).unwrap();
        project(Maxout::new(k).forward(&xt).unwrap().values(), &r)
    });
    max_relative_error(dx.values(), &numeric)
}

fn check_pool(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.gen_range(1..=3);
    let s = rand_spatial(rng, 2, 7);
    let shape = [c, s[0], s[1], s[2]];
    let x = Tensor4D::from_vec(shape, separated_values(shape.iter().product(), rng)).unwrap();
    let mut p = MaxPool3d::new();
    let y = p.forward(&x).unwrap();
    let r = rand_vec(y.values().len(), rng);
    let dx = p.backward(&Tensor4D::from_vec(y.shape(), r.clone()).unwrap()).unwrap();
    let numeric = numeric_gradient(x.values(), FD_STEP, |v| {
        let xt = Tensor4D::from_vec(shape, v.to_vec()).unwrap();
        project(MaxPool3d::new().forward(&xt).unwrap().values(), &r)
    });
    max_relative_error(dx.values(), &numeric)
}

fn check_dense(rng: &mut ChaCha8Rng) -> f64 {
    let n_in = rng.gen_range(1..=24);
    let n_out = rng.gen_range(1..=12);
    let mut d = Dense::<f64>::new("d", n_in, n_out, rng);
    d.bias.value = rand_vec(n_out, rng);
    let x = rand_vec(n_in, rng);
    let r = rand_vec(n_out, rng);
    d.forward(&x).unwrap();
    let dx = d.backward(&r, true).unwrap().unwrap();
    let fresh = d.clone();
    let mut probe = fresh.clone();
    let numeric = numeric_gradient(&x, FD_STEP, |v| project(&probe.forward(v).unwrap(), &r));
    let mut err = max_relative_error(&dx, &numeric);
    let loss = |l: &mut Dense<f64>| project(&l.forward(&x).unwrap(), &r);
    err = err.max(param_error(&fresh, |l| &mut l.weight, &d.weight.grad, loss));
    err = err.max(param_error(&fresh, |l| &mut l.bias, &d.bias.grad, loss));
    err
}

fn check_softmax_ce(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(2..=40);
    let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let z: f64 = raw.iter().sum();
    let t: Vec<f64> = raw.iter().map(|v| v / z).collect();
    let (_, _, grad) = softmax_cross_entropy(&logits, &t).unwrap();
    let numeric = numeric_gradient(&logits, FD_STEP, |v| softmax_cross_entropy(v, &t).unwrap().0);
    max_relative_error(&grad, &numeric)
}

fn check_dropout(training: bool, rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(1..=64);
    let rate = rng.gen_range(0.0..0.9);
    let mask_seed: u64 = rng.gen();
    let x = rand_vec(n, rng);
    let r = rand_vec(n, rng);
    let mut d = Dropout::<f64>::new(rate).unwrap();
    d.forward(&x, training, &mut ChaCha8Rng::seed_from_u64(mask_seed));
    let dx = d.backward(&r);
    let numeric = numeric_gradient(&x, FD_STEP, |v| {
        // same mask on every probe
        let mut probe = Dropout::<f64>::new(rate).unwrap();
        project(&probe.forward(v, training, &mut ChaCha8Rng::seed_from_u64(mask_seed)), &r)
    });
    max_relative_error(&dx, &numeric)
}

/// Runs every layer check on `cases` random shapes each.
pub fn run_suite(seed: u64, cases: usize) -> Vec<LayerCheck> {
    type Check = fn(&mut ChaCha8Rng) -> f64;
    let checks: Vec<(String, Check)> = vec![
        (format!("conv{:?}", STAGE_KERNELS[0]), |r| check_conv(STAGE_KERNELS[0], r)),
        (format!("conv{:?}", STAGE_KERNELS[1]), |r| check_conv(STAGE_KERNELS[1], r)),
        (format!("conv{:?}", STAGE_KERNELS[2]), |r| check_conv(STAGE_KERNELS[2], r)),
        ("conv_block".into(), check_block),
        ("maxout".into(), check_maxout),
        ("maxpool".into(), check_pool),
        ("dense".into(), check_dense),
        ("softmax_cross_entropy".into(), check_softmax_ce),
        ("dropout_inference".into(), |r| check_dropout(false, r)),
        ("dropout_training_mask".into(), |r| check_dropout(true, r)),
    ];
    checks
        .into_iter()
        .enumerate()
        .map(|(i, (layer, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64 + 1) << 32));
            let max_rel_error = (0..cases).map(|_| check(&mut rng)).fold(0.0, f64::max);
            LayerCheck {
                layer,
                cases,
                max_rel_error,
            }
        })
        .collect()
}
