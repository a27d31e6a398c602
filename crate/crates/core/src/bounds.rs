//! Evaluable forms of the oracle inequality, the approximation error function
//! and the learning-rate schedules.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert_kernel::{HilbertKernel, HolderModulus};
use crate::kme::concentration_bound;
use crate::represent::{gram, kernel_row, self_inners, Embedder, Rep};
use crate::rng::{tag, StreamRng};
use crate::stats::{linear_fit, mean_se, MeanSe};
use crate::svm::{hinge, train, TrainOptions};
use crate::synth::{first_stage_with_tag, MetaDistribution};

/// Inputs of the oracle inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTerms {
    pub universal_c: f64,
    pub tau: f64,
    pub n: usize,
    pub lambda: f64,
    /// Bag size of every training bag.
    pub bag_sizes: Vec<usize>,
    /// Lipschitz constant of the loss on the clipping range.
    pub loss_lipschitz: f64,
    /// `‖k‖_∞` of the second-level kernel.
    pub kernel_sup: f64,
    /// `‖k₁‖_∞` of the base kernel, entering the embedding deviation bound.
    pub base_kernel_sup: f64,
    /// Sup of the clipped loss.
    pub b: f64,
    pub approx_error: f64,
    /// `R*_{H_k} − R*`.
    pub gap: f64,
    pub modulus: HolderModulus,
}

impl OracleTerms {
    /// Hinge-loss defaults: `|ℓ|₁ = 1`, `‖k‖_∞ = ‖k₁‖_∞ = 1`, `B = 2`, gap 0.
    pub fn hinge(
        universal_c: f64,
        tau: f64,
        lambda: f64,
        bag_sizes: Vec<usize>,
        approx_error: f64,
        modulus: HolderModulus,
    ) -> Self {
        OracleTerms {
            universal_c,
            tau,
            n: bag_sizes.len(),
            lambda,
            bag_sizes,
            loss_lipschitz: 1.0,
            kernel_sup: 1.0,
            base_kernel_sup: 1.0,
            b: 2.0,
            approx_error,
            gap: 0.0,
            modulus,
        }
    }
}

/// The six additive terms of the right-hand side and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleBreakdown {
    pub approximation: f64,
    pub gap: f64,
    pub estimation: f64,
    pub confidence: f64,
    pub regularization: f64,
    pub embedding: f64,
    pub total: f64,
}

impl OracleBreakdown {
    pub fn terms(&self) -> [f64; 6] {
        [self.approximation, self.gap, self.estimation, self.confidence, self.regularization, self.embedding]
    }
}

pub fn oracle_rhs(t: &OracleTerms) -> Result<OracleBreakdown> {
    if !(t.lambda.is_finite() && t.lambda > 0.0) {
        return Err(Error::input(format!("λ must be positive, got {}", t.lambda)));
    }
    if !(t.tau.is_finite() && t.tau >= 1.0) {
        return Err(Error::input(format!("τ must be at least 1, got {}", t.tau)));
    }
    if t.n < 2 || t.bag_sizes.len() != t.n {
        return Err(Error::input("need N ≥ 2 and one bag size per training bag"));
    }
    let nonneg = [t.universal_c, t.loss_lipschitz, t.kernel_sup, t.base_kernel_sup, t.b, t.approx_error, t.gap];
    if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::input("oracle constants must be finite and nonnegative"));
    }
    let n = t.n as f64;
    let l = t.loss_lipschitz;
    let a_over_l = t.approx_error / t.lambda;
    let approximation = 9.0 * t.approx_error;
    let gap = 9.0 * t.gap;
    let estimation = t.universal_c * l * l * t.kernel_sup * n.ln() / (n * t.lambda);
    let confidence = 300.0 * t.b * t.tau / n.sqrt();
    let regularization = 15.0 * t.tau / n * l * t.kernel_sup * a_over_l.sqrt();
    let slope = l * a_over_l.sqrt() + l * (t.b / t.lambda).sqrt();
    let delta = (-t.tau).exp() / n;
    let mut sum = 0.0;
    for &m in &t.bag_sizes {
        sum += slope * t.modulus.eval(concentration_bound(m, delta, t.base_kernel_sup)?);
    }
    let embedding = 3.0 / n * sum;
    let total = approximation + gap + estimation + confidence + regularization + embedding;
    Ok(OracleBreakdown { approximation, gap, estimation, confidence, regularization, embedding, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Thm45,
    Thm55,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "quarter")]
    pub mu: f64,
}

fn one() -> f64 {
    1.0
}

fn quarter() -> f64 {
    0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub n: usize,
    pub lambda: f64,
    pub bag_size: usize,
    /// Second-level kernel width; `None` keeps the configured width.
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub params: ScheduleParams,
    pub rows: Vec<ScheduleRow>,
}

/// `thm45`: `λ = N^{−1/(β+1)}`, `M = ⌈N^{2/α}⌉`.
/// `thm55`: `λ = N^{−1/2}`, `M = ⌈N^{2/α}⌉`, `γ = N^{−μ}`.
pub fn make_schedule(params: ScheduleParams, n_grid: &[usize]) -> Result<Schedule> {
    if !(params.alpha > 0.0 && params.alpha <= 2.0) {
        return Err(Error::input(format!("α must lie in (0, 2], got {}", params.alpha)));
    }
    match params.kind {
        ScheduleKind::Thm45 if !(params.beta > 0.0 && params.beta <= 1.0) => {
            return Err(Error::input(format!("β must lie in (0, 1], got {}", params.beta)))
        }
        ScheduleKind::Thm55 if !(params.mu.is_finite() && params.mu > 0.0) => {
            return Err(Error::input(format!("μ must be positive, got {}", params.mu)))
        }
        _ => {}
    }
    if n_grid.is_empty() || n_grid.iter().any(|&n| n == 0) {
        return Err(Error::input("N grid must be nonempty and positive"));
    }
    if n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::input("N grid must be strictly increasing"));
    }
    let rows = n_grid
        .iter()
        .map(|&n| {
            let nf = n as f64;
            let bag = nf.powf(2.0 / params.alpha);
            // Guard against ⌈·⌉ overshooting exact integers by rounding noise.
            let rounded = bag.round();
            let bag_size = if (bag - rounded).abs() <= 1e-9 * rounded { rounded } else { bag.ceil() };
            let (lambda, gamma) = match params.kind {
                ScheduleKind::Thm45 => (nf.powf(-1.0 / (params.beta + 1.0)), None),
                ScheduleKind::Thm55 => (nf.powf(-0.5), Some(nf.powf(-params.mu))),
            };
            ScheduleRow { n, lambda, bag_size: bag_size as usize, gamma }
        })
        .collect();
    Ok(Schedule { params, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub trajectory: Vec<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// `ln N/(Nλ_N)`.
    pub estimation: ConditionReport,
    /// `ln(N)^α/(λ_N M_N^α)`.
    pub embedding: ConditionReport,
    pub pass: bool,
}

/// Checks that both consistency sequences trend to zero: the last value must be
/// below a tenth of the first.
pub fn consistency_check(n_grid: &[usize], lambdas: &[f64], bag_sizes: &[usize], modulus: &HolderModulus) -> Result<ConsistencyReport> {
    if n_grid.len() < 4 || lambdas.len() != n_grid.len() || bag_sizes.len() != n_grid.len() {
        return Err(Error::input("consistency check needs at least four aligned grid points"));
    }
    let a = modulus.exponent;
    let est: Vec<f64> = n_grid.iter().zip(lambdas).map(|(&n, l)| (n as f64).ln() / (n as f64 * l)).collect();
    let emb: Vec<f64> = n_grid
        .iter()
        .zip(lambdas)
        .zip(bag_sizes)
        .map(|((&n, l), &m)| (n as f64).ln().powf(a) / (l * (m as f64).powf(a)))
        .collect();
    let verdict = |v: Vec<f64>| {
        let pass = v.last().unwrap() < &(v[0] / 10.0);
        ConditionReport { trajectory: v, pass }
    };
    let (estimation, embedding) = (verdict(est), verdict(emb));
    let pass = estimation.pass && embedding.pass;
    Ok(ConsistencyReport { estimation, embedding, pass })
}

/// How inputs are represented when estimating the approximation error.
#[derive(Debug, Clone)]
pub struct ApproxErrorConfig {
    pub lambda_grid: Vec<f64>,
    pub big_n: usize,
    /// Test pairs per seed for the risk surrogate.
    pub test_pairs: usize,
    /// `None`: exact embeddings; `Some(m)`: bags of size m.
    pub bag_size: Option<usize>,
    pub seeds: usize,
    pub seed: u64,
    pub train: TrainOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxErrorEstimate {
    pub lambda_grid: Vec<f64>,
    /// Test hinge risk plus `λ‖f‖²`, averaged over seeds.
    pub regularized_risk: Vec<MeanSe>,
    pub test_risk: Vec<MeanSe>,
    /// Mean over seeds of the per-seed minimum test risk on the grid.
    pub best_risk: MeanSe,
    /// Clamped at 0.
    pub a_hat: Vec<MeanSe>,
}

/// `Â(λ) = [R̂(f_λ) + λ‖f_λ‖²] − min_λ' R̂(f_λ')`, where `f_λ` is trained on a
/// large first-stage sample and `R̂` is the hinge risk on fresh test pairs.
pub fn approx_error_estimate(
    meta: &MetaDistribution,
    hkernel: &HilbertKernel,
    embedder: &Embedder,
    cfg: &ApproxErrorConfig,
) -> Result<ApproxErrorEstimate> {
    if cfg.lambda_grid.is_empty() || cfg.lambda_grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::input("λ grid must be nonempty and positive"));
    }
    if cfg.big_n < 2 || cfg.test_pairs == 0 || cfg.seeds == 0 {
        return Err(Error::input("need big_N ≥ 2, at least one test pair and one seed"));
    }
    let nl = cfg.lambda_grid.len();
    let per_seed: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.seeds)
        .map(|s| {
            let seed = cfg.seed.wrapping_add(1_000_000 * s as u64);
            let represent = |pairs: Vec<(crate::synth::QParams, i8)>, stream: u32| -> Result<(Vec<Rep>, Vec<i8>)> {
                let labels = pairs.iter().map(|p| p.1).collect();
                let reps = pairs
                    .par_iter()
                    .enumerate()
                    .map(|(i, (q, _))| match cfg.bag_size {
                        None => embedder.exact(q),
                        Some(m) => embedder.sample_bag(q, m, StreamRng::new(seed, stream, i as u64)),
                    })
                    .collect::<Result<_>>()?;
                Ok((reps, labels))
            };
            let (train_reps, train_labels) =
                represent(first_stage_with_tag(meta, cfg.big_n, seed, tag::FIRST_STAGE)?, tag::SECOND_STAGE)?;
            let (test_reps, test_labels) =
                represent(first_stage_with_tag(meta, cfg.test_pairs, seed, tag::TEST_FIRST_STAGE)?, tag::TEST_SECOND_STAGE)?;
            let g = gram(hkernel, &train_reps)?;
            let norms = self_inners(&train_reps)?;
            let rows: Vec<Vec<f64>> = test_reps
                .par_iter()
                .map(|x| kernel_row(hkernel, &train_reps, &norms, x))
                .collect::<Result<_>>()?;
            let results: Vec<(f64, f64)> = cfg
                .lambda_grid
                .par_iter()
                .map(|&lambda| {
                    let model = train(&g, &train_labels, lambda, &cfg.train)?;
                    let mut risk = 0.0;
                    for (row, &y) in rows.iter().zip(&test_labels) {
                        risk += hinge(y, model.decision_from_kernel_row(row))?;
                    }
                    risk /= test_labels.len() as f64;
                    Ok((risk, risk + lambda * model.rkhs_norm_sq(&g)))
                })
                .collect::<Result<_>>()?;
            Ok(results.into_iter().unzip())
        })
        .collect::<Result<_>>()?;

    let column = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> f64| mean_se(&per_seed.iter().map(pick).collect::<Vec<_>>());
    let test_risk: Vec<MeanSe> = (0..nl).map(|k| column(&|s| s.0[k])).collect();
    let regularized_risk: Vec<MeanSe> = (0..nl).map(|k| column(&|s| s.1[k])).collect();
    let best_risk = column(&|s| s.0.iter().copied().fold(f64::INFINITY, f64::min));
    let a_hat = (0..nl)
        .map(|k| {
            let diffs: Vec<f64> = per_seed
                .iter()
                .map(|s| s.1[k] - s.0.iter().copied().fold(f64::INFINITY, f64::min))
                .collect();
            let m = mean_se(&diffs);
            MeanSe { mean: m.mean.max(0.0), std_error: m.std_error }
        })
        .collect();
    Ok(ApproxErrorEstimate { lambda_grid: cfg.lambda_grid.clone(), regularized_risk, test_risk, best_risk, a_hat })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxExponentFit {
    pub c_hat: f64,
    pub beta_hat: f64,
    /// Slope before clamping to `(0, 1]`.
    pub raw_slope: f64,
    pub degenerate: bool,
}

/// Log-log least squares of `Â(λ) ≤ Ĉ λ^β` with `β̂` clamped to `(0, 1]`.
pub fn fit_approx_exponent(lambdas: &[f64], a_hat: &[f64]) -> Result<ApproxExponentFit> {
    if lambdas.len() != a_hat.len() {
        return Err(Error::input("λ grid and Â values differ in length"));
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) =
        lambdas.iter().zip(a_hat).filter(|(l, a)| **l > 0.0 && **a > 0.0).map(|(l, a)| (l.ln(), a.ln())).unzip();
    if lx.len() < 3 {
        return Ok(ApproxExponentFit { c_hat: f64::NAN, beta_hat: f64::NAN, raw_slope: f64::NAN, degenerate: true });
    }
    let (slope, _) = linear_fit(&lx, &ly)?;
    if !(slope > 0.0) {
        return Ok(ApproxExponentFit { c_hat: f64::NAN, beta_hat: f64::NAN, raw_slope: slope, degenerate: true });
    }
    let beta = slope.min(1.0);
    let c = crate::whitenoise::covering_constant(lambdas, a_hat, beta);
    Ok(ApproxExponentFit { c_hat: c, beta_hat: beta, raw_slope: slope, degenerate: false })
}

/// Right-hand side of the geometric-noise approximation bound
/// `2Ĉ_Q γ^{2α̂_Q} + λ`.
pub fn geometric_approx_bound(c_hat: f64, alpha_hat: f64, gamma: f64, lambda: f64) -> f64 {
    2.0 * c_hat * gamma.powf(2.0 * alpha_hat) + lambda
}
