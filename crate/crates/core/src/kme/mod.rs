//! Kernel mean embeddings of sample bags.
//!
//! An element of the base RKHS is stored as a finite weighted expansion
//! `Σᵢ wᵢ μ(atomᵢ)`, where each atom is either a point (its kernel section
//! `k(·, x)`) or an isotropic Gaussian `N(x, s²I)` whose embedding has a closed
//! form under the Gaussian base kernel. Empirical embeddings of bags use point
//! atoms with uniform weights; exact embeddings of Gaussian inputs are a single
//! Gaussian atom. Everything downstream only needs inner products.

pub mod expansion;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_kernels::{squared_distance, BaseFamily, BaseKernel};
use crate::error::{Error, Result};

/// Radicands of squared distances above this negative value are treated as
/// rounding noise and clamped to zero.
pub const NEGATIVE_RADICAND_TOL: f64 = 1e-10;

/// Double sums with more pairs than this are split into row blocks.
const BLOCK_PAIRS: usize = 1_000_000;

/// An M×d bag of draws from one input distribution, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    data: Vec<f64>,
    dim: usize,
}

impl SampleSet {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::input("sample set is empty"))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::input("sample points must have at least one coordinate"));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::input(format!(
                    "row {i} has length {}, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(SampleSet { data, dim })
    }

    pub fn from_flat(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::input(format!(
                "flat sample buffer of length {} does not split into rows of {dim}",
                data.len()
            )));
        }
        Ok(SampleSet { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(|r| r.to_vec()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalEmbedding {
    kernel: BaseKernel,
    points: Vec<f64>,
    weights: Vec<f64>,
    spreads: Vec<f64>,
}

/// Empirical mean embedding `(1/M) Σ k(·, s_m)` of a bag.
pub fn embed(kernel: &BaseKernel, samples: &SampleSet) -> Result<EmpiricalEmbedding> {
    if samples.is_empty() {
        return Err(Error::input("cannot embed an empty bag"));
    }
    if samples.dim() != kernel.dim {
        return Err(Error::input(format!(
            "bag dimension {} does not match kernel dimension {}",
            samples.dim(),
            kernel.dim
        )));
    }
    let m = samples.len();
    Ok(EmpiricalEmbedding {
        kernel: *kernel,
        points: samples.as_flat().to_vec(),
        weights: vec![1.0 / m as f64; m],
        spreads: vec![0.0; m],
    })
}

impl EmpiricalEmbedding {
    /// General weighted expansion of point atoms. Weights need not sum to one.
    pub fn from_atoms(kernel: &BaseKernel, points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() || points.is_empty() {
            return Err(Error::input("need one weight per atom and at least one atom"));
        }
        let mut flat = Vec::with_capacity(points.len() * kernel.dim);
        for p in &points {
            kernel.check_dim(p)?;
            flat.extend_from_slice(p);
        }
        let m = weights.len();
        Ok(EmpiricalEmbedding { kernel: *kernel, points: flat, weights, spreads: vec![0.0; m] })
    }

    /// Exact embedding of `N(mean, spread² I)`. Non-degenerate spreads need the
    /// Gaussian base kernel.
    pub fn exact_gaussian(kernel: &BaseKernel, mean: &[f64], spread: f64) -> Result<Self> {
        kernel.check_dim(mean)?;
        if !(spread >= 0.0 && spread.is_finite()) {
            return Err(Error::input(format!("spread must be nonnegative, got {spread}")));
        }
        if spread > 0.0 && kernel.family != BaseFamily::Gaussian {
            return Err(Error::unsupported(
                "closed-form embeddings of Gaussian inputs need the Gaussian base kernel",
            ));
        }
        Ok(EmpiricalEmbedding {
            kernel: *kernel,
            points: mean.to_vec(),
            weights: vec![1.0],
            spreads: vec![spread],
        })
    }

    pub fn kernel(&self) -> &BaseKernel {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.kernel.dim;
        &self.points[i * d..(i + 1) * d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn spreads(&self) -> &[f64] {
        &self.spreads
    }

    pub fn is_point_expansion(&self) -> bool {
        self.spreads.iter().all(|&s| s == 0.0)
    }

    /// Rescales every weight; `e.scaled(a)` represents `a·e`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w *= factor);
        out
    }

    #[inline]
    fn atom_inner(&self, i: usize, other: &Self, j: usize) -> f64 {
        let (si, sj) = (self.spreads[i], other.spreads[j]);
        if si == 0.0 && sj == 0.0 {
            self.kernel.eval_unchecked(self.point(i), other.point(j))
        } else {
            gaussian_atoms_inner(self.point(i), si, other.point(j), sj, self.kernel.width)
        }
    }
}

/// RKHS inner product `Σᵢⱼ wᵢ w'ⱼ ⟨μ(atomᵢ), μ(atom'ⱼ)⟩`.
///
/// Row sums are formed independently and reduced in index order, so the
/// result does not depend on blocking or thread count.
pub fn inner(e1: &EmpiricalEmbedding, e2: &EmpiricalEmbedding) -> Result<f64> {
    if e1.kernel != e2.kernel {
        return Err(Error::input("embeddings use different base kernels"));
    }
    let row_sum = |i: usize| -> f64 {
        let mut s = 0.0;
        for j in 0..e2.len() {
            s += e2.weights[j] * e1.atom_inner(i, e2, j);
        }
        e1.weights[i] * s
    };
    let n1 = e1.len();
    let pairs = n1.saturating_mul(e2.len());
    let total = if pairs > BLOCK_PAIRS {
        let rows_per_block = (BLOCK_PAIRS / e2.len().max(1)).max(1);
        let mut sums = vec![0.0; n1];
        sums.par_chunks_mut(rows_per_block).enumerate().for_each(|(b, chunk)| {
            for (k, out) in chunk.iter_mut().enumerate() {
                *out = row_sum(b * rows_per_block + k);
            }
        });
        sums.iter().sum()
    } else {
        (0..n1).map(row_sum).sum()
    };
    Ok(total)
}

/// Converts three inner products into an RKHS distance, clamping rounding
/// noise below zero.
pub fn distance_from_inners(aa: f64, ab: f64, bb: f64) -> Result<f64> {
    let sq = aa - 2.0 * ab + bb;
    if sq < -NEGATIVE_RADICAND_TOL {
        return Err(Error::numerical(format!(
            "squared RKHS distance is {sq:e}; the Gram values are inconsistent"
        )));
    }
    Ok(sq.max(0.0).sqrt())
}

pub fn rkhs_distance(e1: &EmpiricalEmbedding, e2: &EmpiricalEmbedding) -> Result<f64> {
    distance_from_inners(inner(e1, e1)?, inner(e1, e2)?, inner(e2, e2)?)
}

/// High-probability deviation bound `‖μ̂S − μQ‖ ≤ 2√(‖k‖²/M) + √(2‖k‖ ln(1/δ)/M)`
/// for a bag of size `M`, holding with probability at least `1 − δ`.
pub fn concentration_bound(bag_size: usize, delta: f64, kernel_sup: f64) -> Result<f64> {
    if bag_size == 0 {
        return Err(Error::input("bag size must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::input(format!("confidence δ must lie in (0, 1), got {delta}")));
    }
    if !(kernel_sup > 0.0 && kernel_sup.is_finite()) {
        return Err(Error::input(format!("kernel sup-norm must be positive, got {kernel_sup}")));
    }
    let m = bag_size as f64;
    Ok(2.0 * (kernel_sup * kernel_sup / m).sqrt() + (2.0 * kernel_sup * (1.0 / delta).ln() / m).sqrt())
}

/// Closed-form `⟨μ N(m, σ²I), μ N(m', σ'²I)⟩` under the Gaussian base kernel.
pub fn gaussian_family_kme_inner(
    mean: &[f64],
    spread: f64,
    other_mean: &[f64],
    other_spread: f64,
    kernel: &BaseKernel,
) -> Result<f64> {
    if kernel.family != BaseFamily::Gaussian {
        return Err(Error::unsupported("closed-form Gaussian embeddings need the Gaussian base kernel"));
    }
    kernel.check_dim(mean)?;
    kernel.check_dim(other_mean)?;
    if spread < 0.0 || other_spread < 0.0 {
        return Err(Error::input("spreads must be nonnegative"));
    }
    Ok(gaussian_atoms_inner(mean, spread, other_mean, other_spread, kernel.width))
}

#[inline]
fn gaussian_atoms_inner(a: &[f64], sa: f64, b: &[f64], sb: f64, width: f64) -> f64 {
    let w2 = width * width;
    let denom = w2 + 2.0 * sa * sa + 2.0 * sb * sb;
    let d = a.len() as f64;
    (w2 / denom).powf(d / 2.0) * (-squared_distance(a, b) / denom).exp()
}

/// Wire format of one labeled bag: `{"label": 1, "samples": [[...], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBag {
    pub label: i8,
    pub samples: Vec<Vec<f64>>,
}

impl LabeledBag {
    pub fn sample_set(&self) -> Result<SampleSet> {
        SampleSet::from_rows(&self.samples)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label != 1 && self.label != -1 {
            return Err(Error::input(format!("bag label must be ±1, got {}", self.label)));
        }
        self.sample_set().map(|_| ())
    }
}

pub fn read_dataset(path: &std::path::Path) -> Result<Vec<LabeledBag>> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    let bags: Vec<LabeledBag> = serde_json::from_str(&text)?;
    for b in &bags {
        b.validate()?;
    }
    Ok(bags)
}

pub fn write_dataset(path: &std::path::Path, bags: &[LabeledBag]) -> Result<()> {
    let text = serde_json::to_string(bags)?;
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })
}
