//! Kernels on the sampling space, used for the first (mean-embedding) stage.
//!
//! Both families are radial with `k(x, x) = 1`, so the sup-norm
//! `‖k‖_∞ = sup √k(x, x)` is 1 regardless of width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinates beyond this count are summed with compensation.
const COMPENSATION_THRESHOLD: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseFamily {
    Gaussian,
    Laplacian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBaseKernel")]
pub struct BaseKernel {
    pub family: BaseFamily,
    pub width: f64,
    pub dim: usize,
}

#[derive(Deserialize)]
struct RawBaseKernel {
    family: BaseFamily,
    width: f64,
    dim: usize,
}

impl TryFrom<RawBaseKernel> for BaseKernel {
    type Error = Error;

    fn try_from(raw: RawBaseKernel) -> Result<Self> {
        BaseKernel::new(raw.family, raw.width, raw.dim)
    }
}

impl BaseKernel {
    pub fn new(family: BaseFamily, width: f64, dim: usize) -> Result<Self> {
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::input(format!("base kernel width must be positive, got {width}")));
        }
        if dim == 0 {
            return Err(Error::input("base kernel dimension must be at least 1"));
        }
        Ok(BaseKernel { family, width, dim })
    }

    pub fn gaussian(width: f64, dim: usize) -> Result<Self> {
        Self::new(BaseFamily::Gaussian, width, dim)
    }

    pub fn laplacian(width: f64, dim: usize) -> Result<Self> {
        Self::new(BaseFamily::Laplacian, width, dim)
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        self.check_dim(y)?;
        Ok(self.eval_unchecked(x, y))
    }

    /// Kernel value without the dimension check; callers guarantee both
    /// slices have length `dim`.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            BaseFamily::Gaussian => (-squared_distance(x, y) / (self.width * self.width)).exp(),
            BaseFamily::Laplacian => (-l1_distance(x, y) / self.width).exp(),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        1.0
    }

    pub fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::input(format!(
                "point has dimension {}, kernel expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    if x.len() > COMPENSATION_THRESHOLD {
        neumaier_sum(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)))
    } else {
        x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

#[inline]
pub fn l1_distance(x: &[f64], y: &[f64]) -> f64 {
    if x.len() > COMPENSATION_THRESHOLD {
        neumaier_sum(x.iter().zip(y).map(|(a, b)| (a - b).abs()))
    } else {
        x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum()
    }
}

pub(crate) fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
