//! How a distribution `Q = N(m, σ²I)` enters the second-level kernel.
//!
//! Three routes produce vectors or embeddings with a common inner product:
//! the Gaussian family's mean (the embedding under a linear base kernel),
//! explicit point expansions with double-sum inner products, and the finite
//! Taylor feature expansion of the Gaussian base kernel.

use std::sync::Arc;

use rayon::prelude::*;

use crate::base_kernels::BaseKernel;
use crate::error::{Error, Result};
use crate::hilbert_kernel::HilbertKernel;
use crate::kme::expansion::{dot, GaussianExpansion};
use crate::kme::{embed, inner, EmpiricalEmbedding, SampleSet};
use crate::rng::StreamRng;
use crate::svm::GramMatrix;
use crate::synth::QParams;

/// Normals drawn per batch when streaming a bag into features.
const STREAM_BATCH: usize = 1 << 14;

#[derive(Debug, Clone)]
pub enum Rep {
    Vector(Vec<f64>),
    Embedding(EmpiricalEmbedding),
}

impl Rep {
    pub fn inner(&self, other: &Rep) -> Result<f64> {
        match (self, other) {
            (Rep::Vector(a), Rep::Vector(b)) => {
                if a.len() != b.len() {
                    return Err(Error::input("feature vectors differ in length"));
                }
                Ok(dot(a, b))
            }
            (Rep::Embedding(a), Rep::Embedding(b)) => inner(a, b),
            _ => Err(Error::input("cannot pair a feature vector with an explicit embedding")),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Embedder {
    /// `μ_Q = m`: the embedding under the linear base kernel `⟨s, s'⟩`.
    Mean,
    /// Weighted atoms with closed-form or double-sum inner products.
    Direct(BaseKernel),
    /// Truncated Gaussian feature map; inner products are dot products.
    Expansion(Arc<GaussianExpansion>),
}

impl Embedder {
    /// Exact embedding of `Q`.
    pub fn exact(&self, q: &QParams) -> Result<Rep> {
        match self {
            Embedder::Mean => Ok(Rep::Vector(q.mean.clone())),
            Embedder::Direct(k) => Ok(Rep::Embedding(EmpiricalEmbedding::exact_gaussian(k, &q.mean, q.spread)?)),
            Embedder::Expansion(x) => {
                x.kernel().check_dim(&q.mean)?;
                let mut acc = vec![0.0; x.len()];
                let mut scratch = Vec::new();
                if q.spread == 0.0 {
                    x.accumulate_point(&q.mean, 1.0, &mut acc, &mut scratch);
                } else {
                    x.accumulate_gaussian(&q.mean, q.spread, 1.0, &mut acc, &mut scratch);
                }
                Ok(Rep::Vector(acc))
            }
        }
    }

    /// Empirical embedding of an observed bag.
    pub fn bag(&self, samples: &SampleSet) -> Result<Rep> {
        match self {
            Embedder::Mean => {
                let mut m = vec![0.0; samples.dim()];
                for row in samples.rows() {
                    for (a, v) in m.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                let n = samples.len() as f64;
                m.iter_mut().for_each(|v| *v /= n);
                Ok(Rep::Vector(m))
            }
            Embedder::Direct(k) => Ok(Rep::Embedding(embed(k, samples)?)),
            Embedder::Expansion(x) => {
                x.kernel().check_dim(samples.row(0))?;
                Ok(Rep::Vector(x.bag_features(samples.as_flat())))
            }
        }
    }

    /// Draws a bag of size `m` from `Q` on the given stream and embeds it.
    /// The expansion route streams samples in batches instead of storing the
    /// whole bag; the draws are the same as [`crate::synth::sample_second_stage`]
    /// on that stream.
    pub fn sample_bag(&self, q: &QParams, m: usize, mut rng: StreamRng) -> Result<Rep> {
        if m == 0 {
            return Err(Error::input("bag size M must be at least 1"));
        }
        let d = q.mean.len();
        match self {
            Embedder::Expansion(x) => {
                x.kernel().check_dim(&q.mean)?;
                let mut acc = vec![0.0; x.len()];
                let mut scratch = Vec::new();
                let w = 1.0 / m as f64;
                let rows_per_batch = (STREAM_BATCH / d).max(1);
                let mut buf = vec![0.0; rows_per_batch * d];
                let mut done = 0;
                while done < m {
                    let rows = rows_per_batch.min(m - done);
                    let chunk = &mut buf[..rows * d];
                    if q.spread > 0.0 {
                        rng.fill_normal(chunk);
                    } else {
                        chunk.fill(0.0);
                    }
                    for row in chunk.chunks_exact_mut(d) {
                        for (v, mu) in row.iter_mut().zip(&q.mean) {
                            *v = mu + q.spread * *v;
                        }
                    }
                    x.accumulate_points(chunk, w, &mut acc, &mut scratch);
                    done += rows;
                }
                Ok(Rep::Vector(acc))
            }
            _ => {
                let mut data = vec![0.0; m * d];
                if q.spread > 0.0 {
                    rng.fill_normal(&mut data);
                }
                for row in data.chunks_mut(d) {
                    for (v, mu) in row.iter_mut().zip(&q.mean) {
                        *v = mu + q.spread * *v;
                    }
                }
                self.bag(&SampleSet::from_flat(data, d)?)
            }
        }
    }
}

/// Second-level Gram matrix over a list of representations.
pub fn gram(hkernel: &HilbertKernel, reps: &[Rep]) -> Result<GramMatrix> {
    GramMatrix::from_inner_fn(reps.len(), hkernel, |i, j| reps[i].inner(&reps[j]))
}

/// Self inner products, reused across kernel rows.
pub fn self_inners(reps: &[Rep]) -> Result<Vec<f64>> {
    reps.par_iter().map(|r| r.inner(r)).collect()
}

/// `k(xᵢ, x)` for every training representation `xᵢ`.
pub fn kernel_row(hkernel: &HilbertKernel, train: &[Rep], train_norms: &[f64], x: &Rep) -> Result<Vec<f64>> {
    let xx = x.inner(x)?;
    train
        .iter()
        .zip(train_norms)
        .map(|(t, &tt)| hkernel.eval_from_inners(tt, t.inner(x)?, xx))
        .collect()
}
