use rand::Rng;

use super::Real;
use crate::error::{Error, Result};

/// Channel-major 4D array `(channels, nx, ny, nz)`; within a channel the
/// layout is x-fastest like [`crate::volgrid::Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4D<T> {
    shape: [usize; 4],
    values: Vec<T>,
}

impl<T: Real> Tensor4D<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4D {
            shape,
            values: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], values: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor4D { shape, values })
    }

    pub fn random(shape: [usize; 4], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let values = (0..n).map(|_| T::from_f64c(rng.gen_range(lo..hi))).collect();
        Tensor4D { shape, values }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn channel_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.channel_len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.channel_len();
        &mut self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn offset(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.shape[3] + z) * self.shape[2] + y) * self.shape[1] + x
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> T {
        self.values[self.offset(c, x, y, z)]
    }

    /// Same data viewed with a different shape of equal size.
    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Tensor4D::from_vec(shape, self.values)
    }
}

/// A named trainable block with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut p = Param::zeros(name, shape);
        for v in &mut p.value {
            *v = T::from_f64c(rng.gen_range(-bound..bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}
