//! Synthetic meta-distributions over `(Q, y)` and the two-stage samplers.
//!
//! Every input distribution is an isotropic Gaussian `Q = N(m, σ²I)`, so `η`
//! depends on `Q` only through its mean and exact embeddings are available.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kme::{LabeledBag, SampleSet};
use crate::rng::{tag, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaFamily {
    /// Centers uniform-ish in disjoint balls around `±c·e₁`; Bayes risk zero.
    HardMargin,
    /// Centers `N(±c·e₁, s²I)`; classes overlap.
    GaussianOverlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeta")]
pub struct MetaDistribution {
    pub family: MetaFamily,
    pub dim: usize,
    pub c: f64,
    pub s: f64,
    pub sigma: f64,
    pub p_plus: f64,
    #[serde(default)]
    pub r: f64,
}

#[derive(Deserialize)]
struct RawMeta {
    family: MetaFamily,
    dim: usize,
    c: f64,
    s: f64,
    sigma: f64,
    p_plus: f64,
    #[serde(default)]
    r: f64,
}

impl TryFrom<RawMeta> for MetaDistribution {
    type Error = Error;
    fn try_from(r: RawMeta) -> Result<Self> {
        MetaDistribution::new(r.family, r.dim, r.c, r.s, r.sigma, r.p_plus, r.r)
    }
}

/// Parameters of one input distribution `N(mean, spread²I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub mean: Vec<f64>,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub q: QParams,
    pub label: i8,
    pub samples: SampleSet,
}

impl Bag {
    pub fn to_labeled(&self) -> LabeledBag {
        LabeledBag { label: self.label, samples: self.samples.to_rows() }
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl MetaDistribution {
    pub fn new(family: MetaFamily, dim: usize, c: f64, s: f64, sigma: f64, p_plus: f64, r: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("dim must be at least 1"));
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::input(format!("c must be positive, got {c}")));
        }
        if !(s.is_finite() && s >= 0.0) || !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::input("spreads must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&p_plus) {
            return Err(Error::input(format!("p_plus must lie in [0, 1], got {p_plus}")));
        }
        match family {
            MetaFamily::HardMargin => {
                if !(r.is_finite() && r > 0.0 && r < c) {
                    return Err(Error::input(format!("hard_margin needs 0 < r < c, got r = {r}, c = {c}")));
                }
            }
            MetaFamily::GaussianOverlap => {
                if s <= 0.0 {
                    return Err(Error::input("gaussian_overlap needs s > 0"));
                }
            }
        }
        Ok(MetaDistribution { family, dim, c, s, sigma, p_plus, r })
    }

    /// Radius of each class support ball (hard_margin).
    pub fn support_radius(&self) -> f64 {
        self.c - self.r
    }

    fn class_center(&self, label: i8) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        m[0] = label as f64 * self.c;
        m
    }

    pub(crate) fn draw_center(&self, label: i8, rng: &mut StreamRng) -> Vec<f64> {
        let center = self.class_center(label);
        let mut z = vec![0.0; self.dim];
        loop {
            rng.fill_normal(&mut z);
            let m: Vec<f64> = center.iter().zip(&z).map(|(c, z)| c + self.s * z).collect();
            if self.family == MetaFamily::GaussianOverlap || dist(&m, &center) <= self.support_radius() {
                return m;
            }
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    crate::base_kernels::squared_distance(a, b).sqrt()
}

/// N i.i.d. `(Q, y)`: label from the prior, then a center from its class law.
pub fn sample_first_stage(meta: &MetaDistribution, n: usize, seed: u64) -> Result<Vec<(QParams, i8)>> {
    first_stage_with_tag(meta, n, seed, tag::FIRST_STAGE)
}

pub(crate) fn first_stage_with_tag(meta: &MetaDistribution, n: usize, seed: u64, stream: u32) -> Result<Vec<(QParams, i8)>> {
    if n == 0 {
        return Err(Error::input("N must be at least 1"));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = StreamRng::new(seed, stream, i as u64);
            let label = if rng.uniform() < meta.p_plus { 1 } else { -1 };
            let mean = meta.draw_center(label, &mut rng);
            (QParams { mean, spread: meta.sigma }, label)
        })
        .collect())
}

/// M i.i.d. rows from `N(m, σ²I)`; `σ = 0` yields M copies of `m`.
pub fn sample_second_stage(q: &QParams, m: usize, seed: u64) -> Result<SampleSet> {
    second_stage_indexed(q, m, seed, tag::SECOND_STAGE, 0)
}

pub(crate) fn second_stage_indexed(q: &QParams, m: usize, seed: u64, stream: u32, index: u64) -> Result<SampleSet> {
    if m == 0 {
        return Err(Error::input("bag size M must be at least 1"));
    }
    if !(q.spread.is_finite() && q.spread >= 0.0) {
        return Err(Error::input("spread must be finite and nonnegative"));
    }
    let d = q.mean.len();
    let mut data = vec![0.0; m * d];
    if q.spread > 0.0 {
        StreamRng::new(seed, stream, index).fill_normal(&mut data);
    }
    for row in data.chunks_mut(d) {
        for (v, mu) in row.iter_mut().zip(&q.mean) {
            *v = mu + q.spread * *v;
        }
    }
    SampleSet::from_flat(data, d)
}

/// Full two-stage draw; bag `i` uses its own second-stage stream.
pub fn sample_bags(meta: &MetaDistribution, n: usize, m: usize, seed: u64) -> Result<Vec<Bag>> {
    sample_first_stage(meta, n, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, (q, label))| {
            let samples = second_stage_indexed(&q, m, seed, tag::SECOND_STAGE, i as u64)?;
            Ok(Bag { q, label, samples })
        })
        .collect()
}

/// `P(y = 1 | Q)`.
pub fn eta(meta: &MetaDistribution, q: &QParams) -> Result<f64> {
    if q.mean.len() != meta.dim {
        return Err(Error::input(format!("mean has dimension {}, expected {}", q.mean.len(), meta.dim)));
    }
    match meta.family {
        MetaFamily::GaussianOverlap => Ok(overlap_eta(meta, q.mean[0])),
        MetaFamily::HardMargin => {
            let rad = meta.support_radius();
            if dist(&q.mean, &meta.class_center(1)) <= rad {
                Ok(1.0)
            } else if dist(&q.mean, &meta.class_center(-1)) <= rad {
                Ok(0.0)
            } else {
                Err(Error::input("mean lies outside both class supports"))
            }
        }
    }
}

fn overlap_eta(meta: &MetaDistribution, m1: f64) -> f64 {
    let p = meta.p_plus;
    if p >= 1.0 {
        return 1.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    let log_ratio = ((1.0 - p) / p).ln() - 2.0 * meta.c * m1 / (meta.s * meta.s);
    1.0 / (1.0 + log_ratio.exp())
}

/// `E[min(η, 1−η)]` by Monte Carlo over the center law.
pub fn bayes_risk(meta: &MetaDistribution, mc_draws: usize, seed: u64) -> Result<Estimate> {
    if mc_draws == 0 {
        return Err(Error::input("mc_draws must be at least 1"));
    }
    if meta.family == MetaFamily::HardMargin {
        return Ok(Estimate { value: 0.0, std_error: 0.0 });
    }
    const CHUNK: usize = 1 << 16;
    let chunks = mc_draws.div_ceil(CHUNK);
    use rayon::prelude::*;
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = StreamRng::new(seed, tag::BAYES_MC, ci as u64);
            let count = CHUNK.min(mc_draws - ci * CHUNK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let label = if rng.uniform() < meta.p_plus { 1.0 } else { -1.0 };
                let m1 = label * meta.c + meta.s * rng.normal();
                let e = overlap_eta(meta, m1);
                let v = e.min(1.0 - e);
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = partial.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = mc_draws as f64;
    let mean = s / n;
    let var = if mc_draws > 1 { ((s2 - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok(Estimate { value: mean, std_error: (var / n).sqrt() })
}

/// Distance from the center surrogate to the separating hyperplane `x₁ = 0`.
pub fn delta_to_boundary(meta: &MetaDistribution, x: &[f64]) -> Result<f64> {
    if meta.family != MetaFamily::HardMargin {
        return Err(Error::unsupported("delta_to_boundary is defined for hard_margin only"));
    }
    if x.len() != meta.dim {
        return Err(Error::input(format!("point has dimension {}, expected {}", x.len(), meta.dim)));
    }
    Ok(x[0].abs())
}
