//! Adadelta: per-parameter step sizes from decayed averages of squared
//! gradients and squared updates, with no global learning rate.
//!
//! ```text
//! E[g^2]  <- rho E[g^2]  + (1 - rho) g^2
//! dx      <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
//! E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
//! x       <- x + dx
//! ```

use super::tensor::Param;
use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        AdadeltaConfig {
            rho: 0.95,
            epsilon: 1e-6,
        }
    }
}

/// Accumulators for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulators<T> {
    pub name: String,
    pub eg2: Vec<T>,
    pub edx2: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adadelta<T> {
    pub config: AdadeltaConfig,
    pub state: Vec<Accumulators<T>>,
}

impl<T: Real> Adadelta<T> {
    pub fn new(config: AdadeltaConfig) -> Self {
        Adadelta {
            config,
            state: Vec::new(),
        }
    }

    fn ensure_state(&mut self, params: &[&mut Param<T>]) -> Result<()> {
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| Accumulators {
                    name: p.name.clone(),
                    eg2: vec![T::zero(); p.len()],
                    edx2: vec![T::zero(); p.len()],
                })
                .collect();
            return Ok(());
        }
        if self.state.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} blocks, got {}",
                self.state.len(),
                params.len()
            )));
        }
        for (s, p) in self.state.iter().zip(params) {
            if s.name != p.name || s.eg2.len() != p.len() {
                return Err(Error::Shape(format!(
                    "optimizer block {} ({} values) does not match parameter {} ({} values)",
                    s.name,
                    s.eg2.len(),
                    p.name,
                    p.len()
                )));
            }
        }
        Ok(())
    }

    /// Applies one update using each parameter's accumulated `grad`. Nothing
    /// is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        self.ensure_state(params)?;
        for p in params.iter() {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite gradient in parameter block {} at index {i}",
                    p.name
                )));
            }
        }
        let rho = T::from_f64c(self.config.rho);
        let one_minus = T::from_f64c(1.0 - self.config.rho);
        let eps = T::from_f64c(self.config.epsilon);
        for (p, s) in params.iter_mut().zip(self.state.iter_mut()) {
            adadelta_update(&mut p.value, &p.grad, &mut s.eg2, &mut s.edx2, rho, one_minus, eps);
        }
        Ok(())
    }
}

#[inline]
fn adadelta_update<T: Real>(x: &mut [T], g: &[T], eg2: &mut [T], edx2: &mut [T], rho: T, one_minus: T, eps: T) {
    for i in 0..x.len() {
        let gi = g[i];
        eg2[i] = rho * eg2[i] + one_minus * gi * gi;
        let dx = -((edx2[i] + eps).sqrt() / (eg2[i] + eps).sqrt()) * gi;
        edx2[i] = rho * edx2[i] + one_minus * dx * dx;
        x[i] += dx;
    }
}

/// Single update on plain slices.
pub fn adadelta_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    eg2: &mut [T],
    edx2: &mut [T],
    config: AdadeltaConfig,
) -> Result<()> {
    if grads.len() != params.len() || eg2.len() != params.len() || edx2.len() != params.len() {
        return Err(Error::Shape("adadelta slices must have equal lengths".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    adadelta_update(
        params,
        grads,
        eg2,
        edx2,
        T::from_f64c(config.rho),
        T::from_f64c(1.0 - config.rho),
        T::from_f64c(config.epsilon),
    );
    Ok(())
}
