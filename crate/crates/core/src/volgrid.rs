//! Scalar volumes: trilinear resampling onto an isotropic grid, padding to the
//! fixed network grid, and Hounsfield window normalization.
//!
//! Data is stored x-fastest: `index = (k * ny + j) * nx + i`. World
//! coordinates follow `world = origin + index * spacing`, with `origin` the
//! world position of the centre of voxel `(0, 0, 0)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Lower edge of the normalization window, in HU.
pub const HU_MIN: f64 = -1000.0;
/// Upper edge of the normalization window, in HU.
pub const HU_MAX: f64 = 400.0;
/// Air. Used for everything outside the scanned field.
pub const AIR_HU: f64 = -1000.0;

pub const CVOL_MAGIC: &[u8; 8] = b"CVOL0001";

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f64>,
    normalized: bool,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f64>,
        normalized: bool,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "volume dims must be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "volume spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "volume origin must be finite, got {origin:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "volume data has {} values, dims {dims:?} need {n}",
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            data,
            normalized,
        })
    }

    /// Raw (HU) volume filled from a function of the voxel index.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(dims, spacing, origin, data, false)
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], value: f64) -> Result<Self> {
        Volume::from_fn(dims, spacing, origin, |_, _, _| value)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let idx = self.index(i, j, k);
        self.data[idx] = value;
    }

    /// Value used for samples that fall outside this volume.
    pub fn fill_value(&self) -> f64 {
        if self.normalized {
            normalize_hu(AIR_HU)
        } else {
            AIR_HU
        }
    }

    pub fn contains_index(&self, idx: [f64; 3]) -> bool {
        const SLACK: f64 = 1e-9;
        (0..3).all(|a| idx[a] >= -SLACK && idx[a] <= (self.dims[a] - 1) as f64 + SLACK)
    }

    /// Trilinear interpolation at a fractional voxel index. `None` outside
    /// the sampled domain `[0, n-1]` per axis.
    pub fn sample(&self, idx: [f64; 3]) -> Option<f64> {
        if !self.contains_index(idx) {
            return None;
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let hi = (self.dims[a] - 1) as f64;
            let p = idx[a].clamp(0.0, hi);
            let f = p.floor();
            let mut b = f as usize;
            let mut t = p - f;
            if b + 1 >= self.dims[a] {
                // at the last sample (or a 1-wide axis)
                b = self.dims[a] - 1;
                t = 0.0;
            }
            base[a] = b;
            frac[a] = t;
        }
        let mut acc = 0.0;
        for dk in 0..2 {
            let wk = if dk == 0 { 1.0 - frac[2] } else { frac[2] };
            if wk == 0.0 {
                continue;
            }
            for dj in 0..2 {
                let wj = if dj == 0 { 1.0 - frac[1] } else { frac[1] };
                if wj == 0.0 {
                    continue;
                }
                for di in 0..2 {
                    let wi = if di == 0 { 1.0 - frac[0] } else { frac[0] };
                    if wi == 0.0 {
                        continue;
                    }
                    acc += wk * wj * wi * self.get(base[0] + di, base[1] + dj, base[2] + dk);
                }
            }
        }
        Some(acc)
    }

    pub fn voxel_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        voxel_to_world(self.origin, self.spacing, idx)
    }

    pub fn world_to_voxel(&self, world: [f64; 3]) -> [f64; 3] {
        world_to_voxel(self.origin, self.spacing, world)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Copy of the low-corner `dims` block.
    pub fn crop(&self, dims: [usize; 3]) -> Result<Volume> {
        if (0..3).any(|a| dims[a] > self.dims[a] || dims[a] == 0) {
            return Err(Error::Shape(format!(
                "cannot crop {:?} to {dims:?}",
                self.dims
            )));
        }
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                let start = self.index(0, j, k);
                data.extend_from_slice(&self.data[start..start + dims[0]]);
            }
        }
        Volume::new(dims, self.spacing, self.origin, data, self.normalized)
    }

    pub(crate) fn with_data(&self, data: Vec<f64>) -> Volume {
        debug_assert_eq!(data.len(), self.data.len());
        Volume {
            data,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data: Vec::new(),
            normalized: self.normalized,
        }
    }
}

pub fn voxel_to_world(origin: [f64; 3], spacing: [f64; 3], idx: [f64; 3]) -> [f64; 3] {
    [
        origin[0] + idx[0] * spacing[0],
        origin[1] + idx[1] * spacing[1],
        origin[2] + idx[2] * spacing[2],
    ]
}

pub fn world_to_voxel(origin: [f64; 3], spacing: [f64; 3], world: [f64; 3]) -> [f64; 3] {
    [
        (world[0] - origin[0]) / spacing[0],
        (world[1] - origin[1]) / spacing[1],
        (world[2] - origin[2]) / spacing[2],
    ]
}

/// Target grid of the network input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub target_spacing: f64,
    pub target_dims: [usize; 3],
    pub pad_value_hu: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            target_spacing: 2.0,
            target_dims: [128, 128, 152],
            pad_value_hu: AIR_HU,
        }
    }
}

impl GridSpec {
    pub fn new(target_spacing: f64, target_dims: [usize; 3]) -> Result<Self> {
        let spec = GridSpec {
            target_spacing,
            target_dims,
            pad_value_hu: AIR_HU,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_spacing > 0.0 && self.target_spacing.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "target spacing must be positive, got {}",
                self.target_spacing
            )));
        }
        if self.target_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "target dims must be >= 1, got {:?}",
                self.target_dims
            )));
        }
        Ok(())
    }

    /// resample -> pad -> normalize.
    pub fn preprocess(&self, v: &Volume) -> Result<Volume> {
        self.validate()?;
        let r = resample_with_pad(v, self.target_spacing, self.pad_value_hu)?;
        let p = pad_to(&r, self)?;
        normalize(&p)
    }
}

pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target_spacing: f64) -> [usize; 3] {
    let mut out = [1usize; 3];
    for a in 0..3 {
        let extent = dims[a] as f64 * spacing[a] / target_spacing;
        // guard against 124.99999999 style results of the product
        let n = (extent + 1e-9).floor();
        out[a] = (n as usize).max(1);
    }
    out
}

/// Trilinear resampling onto isotropic `target_spacing`, air outside.
pub fn resample(v: &Volume, target_spacing: f64) -> Result<Volume> {
    resample_with_pad(v, target_spacing, AIR_HU)
}

pub fn resample_with_pad(v: &Volume, target_spacing: f64, pad_value: f64) -> Result<Volume> {
    if !(target_spacing > 0.0 && target_spacing.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target_spacing}"
        )));
    }
    if v.normalized {
        return Err(Error::State("resample expects a raw HU volume".into()));
    }
    let dims = resampled_dims(v.dims, v.spacing, target_spacing);
    let spacing = [target_spacing; 3];
    let ratio = [
        target_spacing / v.spacing[0],
        target_spacing / v.spacing[1],
        target_spacing / v.spacing[2],
    ];
    let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                // same origin, so the source index is a pure rescale
                let src = [i as f64 * ratio[0], j as f64 * ratio[1], k as f64 * ratio[2]];
                data.push(v.sample(src).unwrap_or(pad_value));
            }
        }
    }
    Volume::new(dims, spacing, v.origin, data, false)
}

/// Pads at the high end of each axis up to `spec.target_dims`.
pub fn pad_to(v: &Volume, spec: &GridSpec) -> Result<Volume> {
    let target = spec.target_dims;
    if (0..3).any(|a| v.dims[a] > target[a]) {
        return Err(Error::DimensionOverflow(format!(
            "volume {:?} does not fit grid {target:?}; resample first",
            v.dims
        )));
    }
    if v.dims == target {
        return Ok(v.clone());
    }
    let fill = if v.normalized {
        normalize_hu(spec.pad_value_hu)
    } else {
        spec.pad_value_hu
    };
    let mut data = vec![fill; target[0] * target[1] * target[2]];
    for k in 0..v.dims[2] {
        for j in 0..v.dims[1] {
            let src = v.index(0, j, k);
            let dst = (k * target[1] + j) * target[0];
            data[dst..dst + v.dims[0]].copy_from_slice(&v.data[src..src + v.dims[0]]);
        }
    }
    Volume::new(target, v.spacing, v.origin, data, v.normalized)
}

/// Maps one HU value into `[0, 1]` over the `[-1000, 400]` window.
#[inline]
pub fn normalize_hu(hu: f64) -> f64 {
    let clamped = hu.clamp(HU_MIN, HU_MAX);
    (clamped - HU_MIN) / (HU_MAX - HU_MIN)
}

pub fn normalize(v: &Volume) -> Result<Volume> {
    if v.normalized {
        return Err(Error::State("volume is already normalized".into()));
    }
    let data = v.data.iter().map(|&hu| normalize_hu(hu)).collect();
    let mut out = v.with_data(data);
    out.normalized = true;
    Ok(out)
}

/// Writes the CVOL container. Raw volumes are stored as rounded i16 HU.
pub fn write_cvol(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_cvol(v, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_cvol(v: &Volume, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(CVOL_MAGIC)?;
    for d in v.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in v.spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    for o in v.origin {
        w.write_all(&o.to_le_bytes())?;
    }
    w.write_all(&[u8::from(v.normalized)])?;
    if v.normalized {
        for &x in &v.data {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    } else {
        for &x in &v.data {
            let hu = x.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            w.write_all(&hu.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_cvol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_cvol(&bytes).map_err(|detail| Error::format(path, detail))
}

pub fn decode_cvol(bytes: &[u8]) -> std::result::Result<Volume, String> {
    const HEADER: usize = 8 + 3 * 4 + 6 * 8 + 1;
    if bytes.len() < HEADER {
        return Err(format!("truncated header ({} bytes)", bytes.len()));
    }
    if &bytes[..8] != CVOL_MAGIC {
        return Err("bad magic, expected CVOL0001".into());
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let spacing = [f64_at(20), f64_at(28), f64_at(36)];
    let origin = [f64_at(44), f64_at(52), f64_at(60)];
    let normalized = match bytes[68] {
        0 => false,
        1 => true,
        other => return Err(format!("normalized flag must be 0 or 1, got {other}")),
    };
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|x| x.checked_mul(dims[2]))
        .ok_or("dims overflow")?;
    let width = if normalized { 4 } else { 2 };
    let body = &bytes[HEADER..];
    if body.len() != n * width {
        return Err(format!(
            "payload has {} bytes, expected {} for dims {dims:?}",
            body.len(),
            n * width
        ));
    }
    let data: Vec<f64> = if normalized {
        body.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    } else {
        body.chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    Volume::new(dims, spacing, origin, data, normalized).map_err(|e| e.to_string())
}
