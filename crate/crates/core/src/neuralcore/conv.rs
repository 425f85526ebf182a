//! Same-size 3D cross-correlation with zero padding, and the axis-reduced
//! convolution block built from it.
//!
//! Kernels are stored `(out_ch, in_ch, kx, ky, kz)` with `kz` fastest.
//! Channels are copied into zero-haloed buffers so every tap is a single
//! `axpy` (forward, input gradient) or dot product (weight gradient) over
//! the whole volume.

use rand::Rng;

use super::layers::{MaxPool3d, Maxout};
use super::tensor::{Param, Tensor4D};
use super::{axpy, dot, Real};
use crate::error::{Error, Result};

/// Kernel extents (x, y, z) of the three stages of a block.
pub const STAGE_KERNELS: [[usize; 3]; 3] = [[1, 3, 3], [3, 1, 3], [3, 3, 1]];

/// Elements per tile of the flat span, sized to stay in L1/L2.
const TILE: usize = 2048;

/// Zero halo of `pad` voxels per side around every channel, so each kernel
/// tap becomes one constant offset into a flat buffer.
struct Padded {
    dims: [usize; 3],
    /// Flat index of the first and one past the last interior voxel.
    span: (usize, usize),
    len: usize,
}

impl Padded {
    fn new(spatial: [usize; 3], kernel: [usize; 3]) -> Self {
        let pad = kernel.map(|k| k / 2);
        let dims = [0, 1, 2].map(|a| spatial[a] + 2 * pad[a]);
        let at = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
        let first = at(pad[0], pad[1], pad[2]);
        let last = at(pad[0] + spatial[0] - 1, pad[1] + spatial[1] - 1, pad[2] + spatial[2] - 1);
        Padded {
            dims,
            span: (first, last + 1),
            len: dims.iter().product(),
        }
    }

    /// Flat offsets of the taps in `(kx, ky, kz)` order, `kz` fastest.
    fn offsets(&self, kernel: [usize; 3]) -> Vec<isize> {
        let [px, py, _] = self.dims.map(|d| d as isize);
        let mut out = Vec::with_capacity(kernel.iter().product());
        for tx in 0..kernel[0] {
            for ty in 0..kernel[1] {
                for tz in 0..kernel[2] {
                    let d = [tx, ty, tz].map(|t| t as isize);
                    let c = kernel.map(|k| (k / 2) as isize);
                    out.push((d[0] - c[0]) + px * ((d[1] - c[1]) + py * (d[2] - c[2])));
                }
            }
        }
        out
    }

    fn pad<T: Real>(&self, src: &[T], spatial: [usize; 3]) -> Vec<T> {
        let mut out = vec![T::zero(); self.len];
        let [nx, ny, nz] = spatial;
        for z in 0..nz {
            for y in 0..ny {
                let dst = self.span.0 + self.dims[0] * (y + self.dims[1] * z);
                let row = (z * ny + y) * nx;
                out[dst..dst + nx].copy_from_slice(&src[row..row + nx]);
            }
        }
        out
    }

    fn unpad<T: Real>(&self, src: &[T], spatial: [usize; 3], dst: &mut [T]) {
        let [nx, ny, nz] = spatial;
        for z in 0..nz {
            for y in 0..ny {
                let from = self.span.0 + self.dims[0] * (y + self.dims[1] * z);
                let row = (z * ny + y) * nx;
                dst[row..row + nx].copy_from_slice(&src[from..from + nx]);
            }
        }
    }

    /// Tiles `[a, b)` covering the span.
    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let (lo, hi) = self.span;
        (lo..hi).step_by(TILE).map(move |a| (a, (a + TILE).min(hi)))
    }
}

fn shift((a, b): (usize, usize), off: isize) -> std::ops::Range<usize> {
    let a2 = (a as isize + off) as usize;
    a2..a2 + (b - a)
}

fn check_kernel(x_shape: [usize; 4], in_ch: usize, kernel: [usize; 3]) -> Result<()> {
    if x_shape[0] != in_ch {
        return Err(Error::Shape(format!(
            "convolution expects {in_ch} input channels, got {}",
            x_shape[0]
        )));
    }
    if kernel.iter().any(|&k| k % 2 == 0) {
        return Err(Error::Shape(format!("kernel extents must be odd, got {kernel:?}")));
    }
    Ok(())
}

/// Same-size convolution. `weight` has `out_ch * in_ch * kx * ky * kz`
/// entries, `bias` has `out_ch`.
pub fn conv3d_forward<T: Real>(
    x: &Tensor4D<T>,
    weight: &[T],
    bias: &[T],
    out_ch: usize,
    kernel: [usize; 3],
) -> Result<Tensor4D<T>> {
    let in_ch = x.channels();
    check_kernel(x.shape(), in_ch, kernel)?;
    let kvol: usize = kernel.iter().product();
    if weight.len() != out_ch * in_ch * kvol || bias.len() != out_ch {
        return Err(Error::Shape(format!(
            "kernel {out_ch}x{in_ch}x{kernel:?} needs {} weights and {out_ch} biases, got {} and {}",
            out_ch * in_ch * kvol,
            weight.len(),
            bias.len()
        )));
    }
    let spatial = x.spatial();
    let grid = Padded::new(spatial, kernel);
    let offsets = grid.offsets(kernel);
    let xs: Vec<Vec<T>> = (0..in_ch).map(|i| grid.pad(x.channel(i), spatial)).collect();
    let mut acc = vec![T::zero(); grid.len];
    let mut y = Tensor4D::zeros([out_ch, spatial[0], spatial[1], spatial[2]]);
    for o in 0..out_ch {
        for t in grid.tiles() {
            let dst = &mut acc[t.0..t.1];
            dst.iter_mut().for_each(|v| *v = bias[o]);
            for (i, x_i) in xs.iter().enumerate() {
                let w_oi = &weight[(o * in_ch + i) * kvol..(o * in_ch + i + 1) * kvol];
                for (&w, &off) in w_oi.iter().zip(&offsets) {
                    axpy(w, &x_i[shift(t, off)], dst);
                }
            }
        }
        grid.unpad(&acc, spatial, y.channel_mut(o));
    }
    Ok(y)
}

/// Accumulates weight and bias gradients into `dw`/`db` and returns the
/// input gradient when `want_dx` is set.
pub fn conv3d_backward<T: Real>(
    x: &Tensor4D<T>,
    weight: &[T],
    dy: &Tensor4D<T>,
    kernel: [usize; 3],
    dw: &mut [T],
    db: &mut [T],
    want_dx: bool,
) -> Result<Option<Tensor4D<T>>> {
    let in_ch = x.channels();
    let out_ch = dy.channels();
    check_kernel(x.shape(), in_ch, kernel)?;
    if dy.spatial() != x.spatial() {
        return Err(Error::Shape(format!(
            "upstream gradient spatial {:?} != input {:?}",
            dy.spatial(),
            x.spatial()
        )));
    }
    let kvol: usize = kernel.iter().product();
    let spatial = x.spatial();
    let grid = Padded::new(spatial, kernel);
    let offsets = grid.offsets(kernel);
    let xs: Vec<Vec<T>> = (0..in_ch).map(|i| grid.pad(x.channel(i), spatial)).collect();
    // halo and gap positions inside the span are zero, so they add nothing
    let dys: Vec<Vec<T>> = (0..out_ch).map(|o| grid.pad(dy.channel(o), spatial)).collect();

    for (o, dy_o) in dys.iter().enumerate() {
        db[o] += dy.channel(o).iter().copied().sum::<T>();
        for (i, x_i) in xs.iter().enumerate() {
            let base = (o * in_ch + i) * kvol;
            for t in grid.tiles() {
                let d = &dy_o[t.0..t.1];
                for (g, &off) in dw[base..base + kvol].iter_mut().zip(&offsets) {
                    *g += dot(d, &x_i[shift(t, off)]);
                }
            }
        }
    }

    if !want_dx {
        return Ok(None);
    }
    let mut dx = Tensor4D::zeros(x.shape());
    let mut acc = vec![T::zero(); grid.len];
    for i in 0..in_ch {
        acc.iter_mut().for_each(|v| *v = T::zero());
        for t in grid.tiles() {
            for (o, dy_o) in dys.iter().enumerate() {
                let w_oi = &weight[(o * in_ch + i) * kvol..(o * in_ch + i + 1) * kvol];
                for (&w, &off) in w_oi.iter().zip(&offsets) {
                    axpy(w, &dy_o[t.0..t.1], &mut acc[shift(t, off)]);
                }
            }
        }
        grid.unpad(&acc, spatial, dx.channel_mut(i));
    }
    Ok(Some(dx))
}

/// Convolution layer owning its parameters and the cached input.
#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor4D<T>>,
}

impl<T: Real> Conv3d<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: [usize; 3], rng: &mut impl Rng) -> Self {
        let kvol: usize = kernel.iter().product();
        Conv3d {
            in_ch,
            out_ch,
            kernel,
            weight: Param::glorot(
                format!("{name}.weight"),
                vec![out_ch, in_ch, kernel[0], kernel[1], kernel[2]],
                in_ch * kvol,
                out_ch * kvol,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_ch]),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        let y = conv3d_forward(x, &self.weight.value, &self.bias.value, self.out_ch, self.kernel)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        conv3d_forward(x, &self.weight.value, &self.bias.value, self.out_ch, self.kernel)
    }

    pub fn backward(&mut self, dy: &Tensor4D<T>, want_dx: bool) -> Result<Option<Tensor4D<T>>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::State("conv backward called before forward".into()))?;
        conv3d_backward(
            x,
            &self.weight.value,
            dy,
            self.kernel,
            &mut self.weight.grad,
            &mut self.bias.grad,
            want_dx,
        )
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    /// Channels after maxout.
    pub out_channels: usize,
    pub maxout_k: usize,
    pub kernels: [[usize; 3]; 3],
}

impl ConvBlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, maxout_k: usize) -> Self {
        ConvBlockSpec {
            in_channels,
            out_channels,
            maxout_k,
            kernels: STAGE_KERNELS,
        }
    }

    pub fn pre_activation_channels(&self) -> usize {
        self.maxout_k * self.out_channels
    }

    /// Channel counts entering/leaving each stage: `in -> out -> out -> k*out`.
    pub fn stage_channels(&self) -> [(usize, usize); 3] {
        [
            (self.in_channels, self.out_channels),
            (self.out_channels, self.out_channels),
            (self.out_channels, self.pre_activation_channels()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.maxout_k < 2 {
            return Err(Error::Config(format!("maxout k must be >= 2, got {}", self.maxout_k)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("block channel counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Three staged convolutions, maxout, then 2x2x2 max-pooling.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub spec: ConvBlockSpec,
    pub stages: [Conv3d<T>; 3],
    maxout: Maxout,
    pool: MaxPool3d,
}

impl<T: Real> ConvBlock<T> {
    pub fn new(name: &str, spec: ConvBlockSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let ch = spec.stage_channels();
        let stages = [0, 1, 2].map(|s| Conv3d::new(&format!("{name}.conv{s}"), ch[s].0, ch[s].1, spec.kernels[s], rng));
        Ok(ConvBlock {
            spec,
            stages,
            maxout: Maxout::new(spec.maxout_k),
            pool: MaxPool3d::new(),
        })
    }

    pub fn forward(&mut self, x: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        MaxPool3d::output_dims(x.spatial())?;
        let mut h = self.stages[0].forward(x)?;
        h = self.stages[1].forward(&h)?;
        h = self.stages[2].forward(&h)?;
        let m = self.maxout.forward(&h)?;
        self.pool.forward(&m)
    }

    pub fn infer(&self, x: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        MaxPool3d::output_dims(x.spatial())?;
        let mut h = self.stages[0].infer(x)?;
        h = self.stages[1].infer(&h)?;
        h = self.stages[2].infer(&h)?;
        MaxPool3d::infer(&self.maxout.infer(&h)?)
    }

    pub fn clear_cache(&mut self) {
        self.stages.iter_mut().for_each(Conv3d::clear_cache);
        self.maxout = Maxout::new(self.spec.maxout_k);
        self.pool = MaxPool3d::new();
    }

    pub fn backward(&mut self, dy: &Tensor4D<T>, want_dx: bool) -> Result<Option<Tensor4D<T>>> {
        let dm = self.pool.backward(dy)?;
        let dh = self.maxout.backward(&dm)?;
        let dh = self.stages[2].backward(&dh, true)?.expect("dx requested");
        let dh = self.stages[1].backward(&dh, true)?.expect("dx requested");
        self.stages[0].backward(&dh, want_dx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.stages.iter_mut().flat_map(|c| c.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.stages.iter().flat_map(|c| c.params()).collect()
    }

    pub fn output_spatial(input: [usize; 3]) -> Result<[usize; 3]> {
        MaxPool3d::output_dims(input)
    }
}
