use rand::Rng;

use super::tensor::{Param, Tensor4D};
use super::{axpy, dot, Real};
use crate::error::{Error, Result};

/// Maximum over groups of `k` consecutive channels:
/// `out[c] = max(pre[k*c], ..., pre[k*c + k - 1])`.
#[derive(Debug, Clone)]
pub struct Maxout {
    pub k: usize,
    winners: Option<(Vec<u8>, [usize; 4])>,
}

impl Maxout {
    pub fn new(k: usize) -> Self {
        assert!((2..=255).contains(&k), "maxout k must be in 2..=255");
        Maxout { k, winners: None }
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        let (y, winners) = self.compute(x)?;
        self.winners = Some((winners, x.shape()));
        Ok(y)
    }

    pub fn infer<T: Real>(&self, x: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        Ok(self.compute(x)?.0)
    }

    fn compute<T: Real>(&self, x: &Tensor4D<T>) -> Result<(Tensor4D<T>, Vec<u8>)> {
        let [c, nx, ny, nz] = x.shape();
        if c % self.k != 0 {
            return Err(Error::Shape(format!(
                "maxout with k={} needs a multiple of {} channels, got {c}",
                self.k, self.k
            )));
        }
        let out_c = c / self.k;
        let n = x.channel_len();
        let mut y = Tensor4D::zeros([out_c, nx, ny, nz]);
        let mut winners = vec![0u8; out_c * n];
        for oc in 0..out_c {
            let dst = y.channel_mut(oc);
            dst.copy_from_slice(x.channel(oc * self.k));
            let win = &mut winners[oc * n..(oc + 1) * n];
            for j in 1..self.k {
                let src = x.channel(oc * self.k + j);
                for p in 0..n {
                    // strict: ties keep the lower piece
                    if src[p] > dst[p] {
                        dst[p] = src[p];
                        win[p] = j as u8;
                    }
                }
            }
        }
        Ok((y, winners))
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        let (winners, in_shape) = self
            .winners
            .as_ref()
            .ok_or_else(|| Error::State("maxout backward called before forward".into()))?;
        let out_c = in_shape[0] / self.k;
        if dy.shape() != [out_c, in_shape[1], in_shape[2], in_shape[3]] {
            return Err(Error::Shape(format!("maxout upstream gradient has shape {:?}", dy.shape())));
        }
        let n = dy.channel_len();
        let mut dx = Tensor4D::zeros(*in_shape);
        for oc in 0..out_c {
            let g = dy.channel(oc);
            for p in 0..n {
                let j = winners[oc * n + p] as usize;
                let off = (oc * self.k + j) * n + p;
                dx.values_mut()[off] = g[p];
            }
        }
        Ok(dx)
    }
}

/// 2x2x2 max-pooling with stride 2; trailing odd slices are dropped.
#[derive(Debug, Clone, Default)]
pub struct MaxPool3d {
    argmax: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool3d {
    pub fn new() -> Self {
        MaxPool3d { argmax: None }
    }

    pub fn output_dims(spatial: [usize; 3]) -> Result<[usize; 3]> {
        if spatial.iter().any(|&d| d < 2) {
            return Err(Error::Shape(format!(
                "max-pooling needs every spatial dim >= 2, got {spatial:?}"
            )));
        }
        Ok(spatial.map(|d| d / 2))
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        let (y, argmax) = Self::compute(x)?;
        self.argmax = Some((argmax, x.shape()));
        Ok(y)
    }

    pub fn infer<T: Real>(x: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        Ok(Self::compute(x)?.0)
    }

    fn compute<T: Real>(x: &Tensor4D<T>) -> Result<(Tensor4D<T>, Vec<u32>)> {
        let [c, nx, ny, nz] = x.shape();
        let [ox, oy, oz] = Self::output_dims([nx, ny, nz])?;
        let mut y = Tensor4D::zeros([c, ox, oy, oz]);
        let on = ox * oy * oz;
        let mut argmax = vec![0u32; c * on];
        for ch in 0..c {
            let src = x.channel(ch);
            let dst = y.channel_mut(ch);
            let am = &mut argmax[ch * on..(ch + 1) * on];
            for z in 0..oz {
                for yy in 0..oy {
                    for xx in 0..ox {
                        let mut best_i = ((2 * z) * ny + 2 * yy) * nx + 2 * xx;
                        let mut best = src[best_i];
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((2 * z + dz) * ny + 2 * yy + dy) * nx + 2 * xx + dx;
                                    if src[i] > best {
                                        best = src[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = (z * oy + yy) * ox + xx;
                        dst[o] = best;
                        am[o] = best_i as u32;
                    }
                }
            }
        }
        Ok((y, argmax))
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        let (argmax, in_shape) = self
            .argmax
            .as_ref()
            .ok_or_else(|| Error::State("max-pool backward called before forward".into()))?;
        let on = dy.channel_len();
        if dy.channels() != in_shape[0] || argmax.len() != in_shape[0] * on {
            return Err(Error::Shape(format!("pool upstream gradient has shape {:?}", dy.shape())));
        }
        let mut dx = Tensor4D::zeros(*in_shape);
        for ch in 0..in_shape[0] {
            let g = dy.channel(ch);
            let am = &argmax[ch * on..(ch + 1) * on];
            let dst = dx.channel_mut(ch);
            for o in 0..on {
                dst[am[o] as usize] += g[o];
            }
        }
        Ok(dx)
    }
}

/// Fully connected layer, `W` stored row-major `(out, in)`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Vec<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Dense {
            inputs,
            outputs,
            weight: Param::glorot(format!("{name}.weight"), vec![outputs, inputs], inputs, outputs, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![outputs]),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &[T]) -> Result<Vec<T>> {
        let y = dense_forward(x, &self.weight.value, &self.bias.value)?;
        self.input = Some(x.to_vec());
        Ok(y)
    }

    pub fn infer(&self, x: &[T]) -> Result<Vec<T>> {
        dense_forward(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, dy: &[T], want_dx: bool) -> Result<Option<Vec<T>>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::State("dense backward called before forward".into()))?;
        if dy.len() != self.outputs {
            return Err(Error::Shape(format!(
                "dense upstream gradient has {} entries, expected {}",
                dy.len(),
                self.outputs
            )));
        }
        for (o, &g) in dy.iter().enumerate() {
            self.bias.grad[o] += g;
            if g != T::zero() {
                axpy(g, x, &mut self.weight.grad[o * self.inputs..(o + 1) * self.inputs]);
            }
        }
        if !want_dx {
            return Ok(None);
        }
        let mut dx = vec![T::zero(); self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            if g != T::zero() {
                axpy(g, &self.weight.value[o * self.inputs..(o + 1) * self.inputs], &mut dx);
            }
        }
        Ok(Some(dx))
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// `W x + b` for a row-major `W` of shape `(b.len(), x.len())`.
pub fn dense_forward<T: Real>(x: &[T], w: &[T], b: &[T]) -> Result<Vec<T>> {
    if w.len() != x.len() * b.len() {
        return Err(Error::Shape(format!(
            "dense weight has {} entries, expected {}x{}",
            w.len(),
            b.len(),
            x.len()
        )));
    }
    let n = x.len();
    Ok(b
        .iter()
        .enumerate()
        .map(|(o, &bo)| bo + dot(&w[o * n..(o + 1) * n], x))
        .collect())
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` during
/// training; inference is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub rate: f64,
    mask: Option<Vec<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(Dropout { rate, mask: None })
    }

    pub fn forward(&mut self, x: &[T], training: bool, rng: &mut impl Rng) -> Vec<T> {
        if !training || self.rate == 0.0 {
            self.mask = None;
            return x.to_vec();
        }
        let keep = T::from_f64c(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        let y = x.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        self.mask = Some(mask);
        y
    }

    /// Reuses the mask drawn by the last forward pass.
    pub fn backward(&self, dy: &[T]) -> Vec<T> {
        match &self.mask {
            Some(mask) => dy.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
            None => dy.to_vec(),
        }
    }
}

/// Free-function form of [`Dropout::forward`].
pub fn dropout<T: Real>(x: &Tensor4D<T>, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor4D<T>> {
    let mut d = Dropout::new(rate)?;
    Tensor4D::from_vec(x.shape(), d.forward(x.values(), training, rng))
}
