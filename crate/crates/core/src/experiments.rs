//! Experiment drivers behind the command-line interface: learning-rate sweeps,
//! concentration-coverage campaigns and Gaussian-measure verification runs.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_kernels::{BaseFamily, BaseKernel};
use crate::bounds::{
    approx_error_estimate, consistency_check, fit_approx_exponent, geometric_approx_bound, make_schedule,
    oracle_rhs, ApproxErrorConfig, ApproxErrorEstimate, ApproxExponentFit, ConsistencyReport, OracleTerms,
    ScheduleParams,
};
use crate::error::{Error, Result};
use crate::hilbert_kernel::HilbertKernel;
use crate::kme::expansion::GaussianExpansion;
use crate::kme::{concentration_bound, embed, rkhs_distance, EmpiricalEmbedding, SampleSet};
use crate::represent::{gram, kernel_row, self_inners, Embedder, Rep};
use crate::rng::{tag, StreamRng};
use crate::stats::{linear_fit, mean_se, median};
use crate::svm::{clip, hinge, train, zero_one, SvmModel, TrainOptions};
use crate::synth::{bayes_risk, first_stage_with_tag, MetaDistribution, MetaFamily, QParams};
use crate::whitenoise::{
    canonical_surjection_eval, characteristic_identity_check, feature_inner_mc, feature_map,
    fit_geometric_noise, geometric_noise_integrals, white_noise_isometry_check, CheckReport,
    CovarianceOperator, HalfspaceProblem, NoiseExponentFit,
};

/// Replicate `r` runs with seed `base + REPLICATE_STRIDE·r`.
pub const REPLICATE_STRIDE: u64 = 1_000_000;

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GramMethod {
    /// Feature expansion when the base kernel is Gaussian and the expansion
    /// stays small; explicit double sums otherwise.
    #[default]
    Auto,
    Direct,
    Expansion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SvmOptions {
    fn default() -> Self {
        let d = TrainOptions::default();
        SvmOptions { tol: d.tol, max_sweeps: d.max_sweeps }
    }
}

impl SvmOptions {
    pub fn train_options(&self) -> Result<TrainOptions> {
        if !(self.tol.is_finite() && self.tol > 0.0) || self.max_sweeps == 0 {
            return Err(Error::input("svm.tol must be positive and svm.max_sweeps at least 1"));
        }
        Ok(TrainOptions { tol: self.tol, max_sweeps: self.max_sweeps, ..TrainOptions::default() })
    }
}

fn default_replicates() -> usize {
    1
}
fn default_test_bags() -> usize {
    1000
}
fn default_universal_c() -> f64 {
    100.0
}
fn default_tau() -> f64 {
    1.0
}
fn default_row_limit() -> f64 {
    300.0
}
fn default_bayes_draws() -> usize {
    1_000_000
}
fn default_expansion_tol() -> f64 {
    1e-12
}
fn default_max_features() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub meta: MetaDistribution,
    pub base_kernel: BaseKernel,
    pub hilbert_kernel: HilbertKernel,
    pub schedule: ScheduleParams,
    pub n_grid: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_test_bags")]
    pub test_bags: usize,
    /// `None` embeds test distributions exactly.
    #[serde(default)]
    pub test_bag_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_universal_c")]
    pub universal_c: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// `A(λ)` supplied to the oracle bound.
    #[serde(default)]
    pub oracle_approx_error: f64,
    /// `R*_{H_k} − R*` supplied to the oracle bound.
    #[serde(default)]
    pub oracle_gap: f64,
    #[serde(default)]
    pub gram_method: GramMethod,
    #[serde(default = "default_expansion_tol")]
    pub expansion_tol: f64,
    #[serde(default = "default_max_features")]
    pub max_expansion_features: usize,
    #[serde(default = "default_row_limit")]
    pub row_time_limit_secs: f64,
    #[serde(default = "default_bayes_draws")]
    pub bayes_mc_draws: usize,
    #[serde(default)]
    pub svm: SvmOptions,
    /// Fill the `wall_seconds` column; off by default so reports are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub output: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 || self.test_bags == 0 {
            return Err(Error::input("replicates and test_bags must be at least 1"));
        }
        if self.n_grid.iter().any(|&n| n < 2) {
            return Err(Error::input("every N in n_grid must be at least 2"));
        }
        if self.base_kernel.dim != self.meta.dim {
            return Err(Error::input(format!(
                "base kernel dimension {} differs from meta dimension {}",
                self.base_kernel.dim, self.meta.dim
            )));
        }
        if self.test_bag_size == Some(0) {
            return Err(Error::input("test_bag_size must be at least 1"));
        }
        if !(self.row_time_limit_secs > 0.0) {
            return Err(Error::input("row_time_limit_secs must be positive"));
        }
        if self.test_bag_size.is_none() && self.base_kernel.family != BaseFamily::Gaussian && self.meta.sigma > 0.0 {
            return Err(Error::unsupported("exact test embeddings need the Gaussian base kernel"));
        }
        self.svm.train_options()?;
        make_schedule(self.schedule, &self.n_grid)?;
        Ok(())
    }

    /// Upper bound on the norm of every sample or center the sweep can draw.
    fn atom_radius(&self) -> f64 {
        let m = &self.meta;
        let tail = (m.dim as f64).sqrt() + 8.0;
        let centers = match m.family {
            MetaFamily::HardMargin => m.c + m.support_radius(),
            MetaFamily::GaussianOverlap => m.c + m.s * tail,
        };
        centers + m.sigma * tail
    }

    /// Chooses the embedding route for the whole sweep.
    pub fn embedder(&self) -> Result<Embedder> {
        let expansion = || -> Result<Embedder> {
            let x = GaussianExpansion::new(&self.base_kernel, self.atom_radius(), self.expansion_tol)?;
            Ok(Embedder::Expansion(Arc::new(x)))
        };
        match self.gram_method {
            GramMethod::Direct => Ok(Embedder::Direct(self.base_kernel)),
            GramMethod::Expansion => expansion(),
            GramMethod::Auto => {
                if self.base_kernel.family == BaseFamily::Gaussian {
                    if let Ok(Embedder::Expansion(x)) = expansion() {
                        if x.len() <= self.max_expansion_features {
                            return Ok(Embedder::Expansion(x));
                        }
                    }
                }
                Ok(Embedder::Direct(self.base_kernel))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub n: usize,
    pub bag_size: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub replicate: usize,
    pub seed: u64,
    pub emp_risk_01: f64,
    pub emp_risk_hinge_clipped: f64,
    pub bayes_risk: f64,
    pub excess_01: f64,
    pub excess_hinge: f64,
    pub oracle_rhs_value: f64,
    pub oracle_violated: bool,
    pub wall_seconds: Option<f64>,
    /// `ok`, or the failure reason.
    pub status: String,
    #[serde(skip)]
    pub risk_01_se: f64,
}

impl RateRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub const CSV_HEADER: [&str; 15] = [
    "N",
    "M_N",
    "lambda_N",
    "gamma_N",
    "replicate",
    "seed",
    "emp_risk_01",
    "emp_risk_hinge_clipped",
    "bayes_risk",
    "excess_01",
    "excess_hinge",
    "oracle_rhs_value",
    "oracle_violated",
    "wall_seconds",
    "status",
];

/// 17 significant digits in scientific notation; empty for NaN.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.16e}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub n: usize,
    pub rows_ok: usize,
    pub median_excess_01: f64,
    /// Normal-approximation standard error of the median, `1.2533·s/√R`.
    pub median_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateSummary {
    pub grid: Vec<GridSummary>,
    /// Log-log slope of the median excess 0-1 risk against N.
    pub slope: f64,
    /// Medians below this are floored before the slope fit.
    pub slope_floor: f64,
    pub final_median_excess_01: f64,
    /// Median excess nonincreasing in N within two combined standard errors.
    pub monotone: bool,
    pub oracle_violation_rate: f64,
    pub oracle_violation_se: f64,
    pub failed_rows: usize,
    pub embedding_route: String,
    pub consistency: ConsistencyReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub summary: RateSummary,
}

impl RateReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                r.bag_size.to_string(),
                fmt_float(r.lambda),
                fmt_float(r.gamma),
                r.replicate.to_string(),
                r.seed.to_string(),
                fmt_float(r.emp_risk_01),
                fmt_float(r.emp_risk_hinge_clipped),
                fmt_float(r.bayes_risk),
                fmt_float(r.excess_01),
                fmt_float(r.excess_hinge),
                fmt_float(r.oracle_rhs_value),
                r.oracle_violated.to_string(),
                r.wall_seconds.map(fmt_float).unwrap_or_default(),
                r.status.clone(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::input(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::input(format!("csv encoding: {e}")))
    }
}

/// Risks of a trained model on fresh test pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskEstimate {
    pub risk_01: f64,
    pub risk_01_se: f64,
    pub risk_hinge_clipped: f64,
    pub risk_hinge: f64,
    pub bayes: f64,
}

/// Draws `T` fresh `(Q, y)` pairs, represents each exactly or by a fresh bag
/// and averages the 0-1 and clipped hinge losses of `f`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_risks(
    model: &SvmModel,
    hkernel: &HilbertKernel,
    train_reps: &[Rep],
    embedder: &Embedder,
    meta: &MetaDistribution,
    test_pairs: usize,
    test_bag_size: Option<usize>,
    bayes: f64,
    seed: u64,
) -> Result<RiskEstimate> {
    if test_pairs == 0 {
        return Err(Error::input("need at least one test pair"));
    }
    let pairs = first_stage_with_tag(meta, test_pairs, seed, tag::TEST_FIRST_STAGE)?;
    let norms = self_inners(train_reps)?;
    let losses: Vec<(f64, f64, f64)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (q, y))| {
            let rep = match test_bag_size {
                None => embedder.exact(q)?,
                Some(m) => embedder.sample_bag(q, m, StreamRng::new(seed, tag::TEST_SECOND_STAGE, i as u64))?,
            };
            let f = model.decision_from_kernel_row(&kernel_row(hkernel, train_reps, &norms, &rep)?);
            let fc = clip(f, model.clip_bound);
            Ok((zero_one(*y, fc)?, hinge(*y, fc)?, hinge(*y, f)?))
        })
        .collect::<Result<_>>()?;
    let z = mean_se(&losses.iter().map(|l| l.0).collect::<Vec<_>>());
    let n = losses.len() as f64;
    Ok(RiskEstimate {
        risk_01: z.mean,
        risk_01_se: z.std_error,
        risk_hinge_clipped: losses.iter().map(|l| l.1).sum::<f64>() / n,
        risk_hinge: losses.iter().map(|l| l.2).sum::<f64>() / n,
        bayes,
    })
}

fn failed_row(base: RateRow, msg: String) -> RateRow {
    RateRow {
        emp_risk_01: f64::NAN,
        emp_risk_hinge_clipped: f64::NAN,
        excess_01: f64::NAN,
        excess_hinge: f64::NAN,
        oracle_rhs_value: f64::NAN,
        oracle_violated: false,
        status: format!("failed: {msg}"),
        ..base
    }
}

#[allow(clippy::too_many_arguments)]
fn run_row(
    cfg: &ExperimentConfig,
    embedder: &Embedder,
    n: usize,
    bag_size: usize,
    lambda: f64,
    hk: HilbertKernel,
    replicate: usize,
    bayes: f64,
) -> RateRow {
    let start = Instant::now();
    let seed = cfg.seed.wrapping_add(REPLICATE_STRIDE.wrapping_mul(replicate as u64));
    let base = RateRow {
        n,
        bag_size,
        lambda,
        gamma: hk.width.unwrap_or(f64::NAN),
        replicate,
        seed,
        emp_risk_01: f64::NAN,
        emp_risk_hinge_clipped: f64::NAN,
        bayes_risk: bayes,
        excess_01: f64::NAN,
        excess_hinge: f64::NAN,
        oracle_rhs_value: f64::NAN,
        oracle_violated: false,
        wall_seconds: None,
        status: "ok".into(),
        risk_01_se: f64::NAN,
    };
    let deadline = start + Duration::from_secs_f64(cfg.row_time_limit_secs);
    let body = || -> Result<RateRow> {
        let pairs = first_stage_with_tag(&cfg.meta, n, seed, tag::FIRST_STAGE)?;
        let labels: Vec<i8> = pairs.iter().map(|p| p.1).collect();
        let reps: Vec<Rep> = pairs
            .par_iter()
            .enumerate()
            .map(|(i, (q, _))| embedder.sample_bag(q, bag_size, StreamRng::new(seed, tag::SECOND_STAGE, i as u64)))
            .collect::<Result<_>>()?;
        if Instant::now() >= deadline {
            return Err(Error::input("row time limit exceeded while embedding"));
        }
        let g = gram(&hk, &reps)?;
        let opts = TrainOptions { deadline: Some(deadline), ..cfg.svm.train_options()? };
        let model = train(&g, &labels, lambda, &opts)?;
        if model.timed_out {
            return Err(Error::input("row time limit exceeded while training"));
        }
        let risks = estimate_risks(&model, &hk, &reps, embedder, &cfg.meta, cfg.test_bags, cfg.test_bag_size, bayes, seed)?;
        // Bayes hinge risk is E[1 − |2η − 1|] = 2·(Bayes 0-1 risk).
        let bayes_hinge = 2.0 * bayes;
        let modulus = hk.lipschitz_modulus()?;
        let mut terms = OracleTerms::hinge(cfg.universal_c, cfg.tau, lambda, vec![bag_size; n], cfg.oracle_approx_error, modulus);
        terms.gap = cfg.oracle_gap;
        let rhs = oracle_rhs(&terms)?.total;
        let lhs = risks.risk_hinge_clipped + lambda * model.rkhs_norm_sq(&g) - bayes_hinge;
        Ok(RateRow {
            emp_risk_01: risks.risk_01,
            emp_risk_hinge_clipped: risks.risk_hinge_clipped,
            excess_01: risks.risk_01 - bayes,
            excess_hinge: risks.risk_hinge_clipped - bayes_hinge,
            oracle_rhs_value: rhs,
            oracle_violated: lhs > rhs,
            risk_01_se: risks.risk_01_se,
            ..base.clone()
        })
    };
    let mut row = match body() {
        Ok(r) => r,
        Err(e) => failed_row(base, e.to_string()),
    };
    if cfg.record_timing {
        row.wall_seconds = Some(start.elapsed().as_secs_f64());
    }
    row
}

/// Full learning-rate sweep. Rows come back in `(N, replicate)` order.
pub fn run_rate_experiment(cfg: &ExperimentConfig) -> Result<RateReport> {
    cfg.validate()?;
    let schedule = make_schedule(cfg.schedule, &cfg.n_grid)?;
    let embedder = cfg.embedder()?;
    let bayes = bayes_risk(&cfg.meta, cfg.bayes_mc_draws, cfg.seed)?.value;
    let cells: Vec<(usize, usize)> =
        (0..schedule.rows.len()).flat_map(|k| (0..cfg.replicates).map(move |r| (k, r))).collect();
    let rows: Vec<RateRow> = cells
        .par_iter()
        .map(|&(k, r)| {
            let s = schedule.rows[k];
            let hk = match s.gamma {
                Some(g) => cfg.hilbert_kernel.with_width(g),
                None => Ok(cfg.hilbert_kernel),
            };
            match hk {
                Ok(hk) => run_row(cfg, &embedder, s.n, s.bag_size, s.lambda, hk, r, bayes),
                Err(e) => panic!("schedule produced an invalid width: {e}"),
            }
        })
        .collect();

    let modulus = match cfg.hilbert_kernel.family {
        crate::hilbert_kernel::HilbertFamily::Gaussian => cfg.hilbert_kernel.lipschitz_modulus()?,
        crate::hilbert_kernel::HilbertFamily::Linear => crate::hilbert_kernel::HolderModulus::new(1.0, 1.0)?,
    };
    let lambdas: Vec<f64> = schedule.rows.iter().map(|r| r.lambda).collect();
    let bags: Vec<usize> = schedule.rows.iter().map(|r| r.bag_size).collect();
    let consistency = if cfg.n_grid.len() >= 4 {
        consistency_check(&cfg.n_grid, &lambdas, &bags, &modulus)?
    } else {
        ConsistencyReport {
            estimation: crate::bounds::ConditionReport { trajectory: vec![], pass: false },
            embedding: crate::bounds::ConditionReport { trajectory: vec![], pass: false },
            pass: false,
        }
    };
    let route = match embedder {
        Embedder::Mean => "mean".to_string(),
        Embedder::Direct(_) => "direct".to_string(),
        Embedder::Expansion(ref x) => format!("expansion(degree {}, {} features)", x.degree(), x.len()),
    };
    let summary = summarize(&rows, cfg, route, consistency)?;
    Ok(RateReport { rows, summary })
}

/// Per-N medians, learning-curve checks and oracle monitoring.
pub fn summarize(rows: &[RateRow], cfg: &ExperimentConfig, route: String, consistency: ConsistencyReport) -> Result<RateSummary> {
    let floor = 0.5 / cfg.test_bags as f64;
    let grid: Vec<GridSummary> = cfg
        .n_grid
        .iter()
        .map(|&n| {
            let ex: Vec<f64> = rows.iter().filter(|r| r.n == n && r.ok()).map(|r| r.excess_01).collect();
            let sd = if ex.len() > 1 { mean_se(&ex).std_error * (ex.len() as f64).sqrt() } else { f64::NAN };
            // Even with zero spread across replicates the median carries the
            // binomial noise of each test average.
            let mc: Vec<f64> = rows.iter().filter(|r| r.n == n && r.ok()).map(|r| r.risk_01_se).collect();
            let per_row = if mc.is_empty() { f64::NAN } else { median(&mc) };
            let se = 1.2533 * sd.max(per_row) / (ex.len().max(1) as f64).sqrt();
            GridSummary { n, rows_ok: ex.len(), median_excess_01: median(&ex), median_se: se }
        })
        .collect();
    let usable: Vec<&GridSummary> = grid.iter().filter(|g| g.rows_ok > 0).collect();
    let slope = if usable.len() >= 2 {
        let x: Vec<f64> = usable.iter().map(|g| (g.n as f64).ln()).collect();
        let y: Vec<f64> = usable.iter().map(|g| g.median_excess_01.max(floor).ln()).collect();
        linear_fit(&x, &y)?.0
    } else {
        f64::NAN
    };
    let monotone = grid.windows(2).all(|w| {
        let se = (w[0].median_se.powi(2) + w[1].median_se.powi(2)).sqrt();
        w[1].median_excess_01 <= w[0].median_excess_01 + 2.0 * se
    });
    let ok: Vec<&RateRow> = rows.iter().filter(|r| r.ok()).collect();
    let violations: Vec<f64> = ok.iter().map(|r| if r.oracle_violated { 1.0 } else { 0.0 }).collect();
    let rate = if violations.is_empty() { f64::NAN } else { violations.iter().sum::<f64>() / violations.len() as f64 };
    let rate_se = if violations.is_empty() { f64::NAN } else { (rate * (1.0 - rate) / violations.len() as f64).sqrt() };
    Ok(RateSummary {
        final_median_excess_01: grid.last().map(|g| g.median_excess_01).unwrap_or(f64::NAN),
        grid,
        slope,
        slope_floor: floor,
        monotone,
        oracle_violation_rate: rate,
        oracle_violation_se: rate_se,
        failed_rows: rows.len() - ok.len(),
        embedding_route: route,
        consistency,
    })
}

fn default_coverage_bags() -> Vec<usize> {
    vec![25, 100]
}
fn default_coverage_deltas() -> Vec<f64> {
    vec![0.05, 0.1]
}
fn default_coverage_reps() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    pub base_kernel: BaseKernel,
    /// Mean of the sampled distribution (defaults to the origin).
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    /// Standard deviation per coordinate of `Q = N(mean, spread²I)`.
    pub spread: f64,
    #[serde(default = "default_coverage_bags")]
    pub bag_sizes: Vec<usize>,
    #[serde(default = "default_coverage_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_coverage_reps")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageCell {
    pub bag_size: usize,
    pub delta: f64,
    pub bound: f64,
    pub violation_rate: f64,
    pub std_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub cells: Vec<CoverageCell>,
    pub pass: bool,
}

/// Empirical violation rate of the single-bag deviation bound
/// `‖μ̂_S − μ_Q‖ ≤ 𝔅(M, δ)` against exact embeddings.
pub fn run_kme_coverage(cfg: &CoverageConfig) -> Result<CoverageReport> {
    let k = cfg.base_kernel;
    if k.family != BaseFamily::Gaussian {
        return Err(Error::unsupported("coverage needs the closed-form Gaussian embedding"));
    }
    if cfg.replicates == 0 || cfg.bag_sizes.is_empty() || cfg.deltas.is_empty() {
        return Err(Error::input("coverage needs replicates, bag sizes and deltas"));
    }
    let mean = cfg.mean.clone().unwrap_or_else(|| vec![0.0; k.dim]);
    let q = QParams { mean: mean.clone(), spread: cfg.spread };
    let exact = EmpiricalEmbedding::exact_gaussian(&k, &mean, cfg.spread)?;
    let mut cells = Vec::new();
    for (mi, &m) in cfg.bag_sizes.iter().enumerate() {
        let dists: Vec<f64> = (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let index = ((mi as u64) << 32) | r as u64;
                let s = crate::synth::second_stage_indexed(&q, m, cfg.seed, tag::COVERAGE, index)?;
                rkhs_distance(&embed(&k, &s)?, &exact)
            })
            .collect::<Result<_>>()?;
        for &delta in &cfg.deltas {
            let bound = concentration_bound(m, delta, k.sup_norm())?;
            let rate = dists.iter().filter(|&&d| d > bound).count() as f64 / dists.len() as f64;
            let se = (rate * (1.0 - rate) / dists.len() as f64).sqrt();
            cells.push(CoverageCell { bag_size: m, delta, bound, violation_rate: rate, std_error: se, pass: rate < delta });
        }
    }
    let pass = cells.iter().all(|c| c.pass);
    Ok(CoverageReport { cells, pass })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WhiteNoiseReport {
    pub dim: usize,
    pub gamma: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub covariance_eigenvalues: Vec<f64>,
    pub isometry: Vec<CheckReport>,
    pub characteristic_real: Vec<CheckReport>,
    pub characteristic_imag: Vec<CheckReport>,
    pub feature_inner: Vec<CheckReport>,
    pub surjection: Vec<CheckReport>,
    pub checks_run: usize,
    pub checks_passed: usize,
    pub pass: bool,
}

/// A random covariance with spectrum in `[0.05, 1.05]` and a random rotation.
pub fn random_covariance(dim: usize, seed: u64, index: u64) -> Result<CovarianceOperator> {
    let mut rng = StreamRng::new(seed, tag::AUX, index);
    let b = nalgebra::DMatrix::from_fn(dim, dim, |_, _| rng.normal());
    let qr = b.qr();
    let v = qr.q();
    let eig: Vec<f64> = (0..dim).map(|_| 0.05 + rng.uniform()).collect();
    let m = &v * nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig)) * v.transpose();
    let sym = (&m + m.transpose()) * 0.5;
    CovarianceOperator::from_matrix(&sym)
}

/// Runs every Gaussian-measure identity on `cases` random instances.
pub fn run_whitenoise_verify(dim: usize, gamma: f64, n_mc: usize, seed: u64, cases: usize) -> Result<WhiteNoiseReport> {
    if dim == 0 || cases == 0 {
        return Err(Error::input("dim and cases must be at least 1"));
    }
    let q = random_covariance(dim, seed, 0)?;
    let mut rng = StreamRng::new(seed, tag::AUX, 1);
    let mut vec = |scale: f64| -> Vec<f64> { (0..dim).map(|_| scale * rng.normal()).collect() };
    let mut isometry = Vec::new();
    let mut char_re = Vec::new();
    let mut char_im = Vec::new();
    let mut inner = Vec::new();
    let mut surj = Vec::new();
    for c in 0..cases as u64 {
        let s = seed.wrapping_add(c << 20);
        let h1 = vec(1.0);
        let h2 = vec(1.0);
        isometry.push(white_noise_isometry_check(&h1, &h2, &q, n_mc, s)?);
        let lambda = 0.5 + c as f64 / cases as f64;
        let ch = characteristic_identity_check(&h1, lambda, &q, n_mc, s + 1)?;
        char_re.push(ch.real);
        char_im.push(ch.imag);
        let x = vec(0.4);
        let x2 = vec(0.4);
        inner.push(feature_inner_mc(&x, &x2, gamma, &q, n_mc, s + 2)?);
        let phi = feature_map(&x2, gamma, &q)?;
        let est = canonical_surjection_eval(&phi, &x, gamma, &q, n_mc, s + 3)?;
        let target = (-crate::base_kernels::squared_distance(&x, &x2) / (gamma * gamma)).exp();
        surj.push(CheckReport::new(est, target));
    }
    let all: Vec<&CheckReport> = isometry.iter().chain(&char_re).chain(&char_im).chain(&inner).chain(&surj).collect();
    let passed = all.iter().filter(|c| c.pass).count();
    Ok(WhiteNoiseReport {
        dim,
        gamma,
        n_mc,
        seed,
        covariance_eigenvalues: q.eigenvalues().to_vec(),
        checks_run: all.len(),
        checks_passed: passed,
        pass: passed == all.len(),
        isometry,
        characteristic_real: char_re,
        characteristic_imag: char_im,
        feature_inner: inner,
        surjection: surj,
    })
}

fn default_floor() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseExponentConfig {
    pub meta: MetaDistribution,
    /// Spectrum of a diagonal covariance `Q`.
    pub covariance_eigenvalues: Vec<f64>,
    pub t_grid: Vec<f64>,
    /// Upper end `t̄_Q` of the range the bound is claimed on.
    pub t_bar: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub seed: u64,
}

pub fn run_noise_exponent(cfg: &NoiseExponentConfig) -> Result<NoiseExponentFit> {
    if cfg.t_grid.iter().any(|&t| t > cfg.t_bar) {
        return Err(Error::input("every grid point must satisfy t ≤ t_bar"));
    }
    if cfg.t_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::input("t grid must be strictly decreasing"));
    }
    let q = CovarianceOperator::diagonal(&cfg.covariance_eigenvalues)?;
    let problem = HalfspaceProblem::new(&cfg.meta)?;
    let points = geometric_noise_integrals(&problem, &cfg.t_grid, &q, cfg.n_outer, cfg.n_inner, cfg.seed)?;
    fit_geometric_noise(&points, cfg.floor)
}

fn default_seeds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxErrorRunConfig {
    pub meta: MetaDistribution,
    /// Absent: distributions enter through their means, i.e. the embedding
    /// under a linear base kernel, so the input space is `ℝᵈ` itself.
    #[serde(default)]
    pub base_kernel: Option<BaseKernel>,
    pub hilbert_kernel: HilbertKernel,
    pub lambda_grid: Vec<f64>,
    pub big_n: usize,
    #[serde(default = "default_test_bags")]
    pub test_pairs: usize,
    #[serde(default)]
    pub bag_size: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub svm: SvmOptions,
    /// Optional check of `Â(λ) ≤ 2Ĉ_Q γ^{2α̂_Q} + λ` against a fitted noise exponent.
    #[serde(default)]
    pub geometric: Option<GeometricCheckConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricCheckConfig {
    pub noise: NoiseExponentConfig,
    pub gamma_grid: Vec<f64>,
    pub check_lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometricCheck {
    pub gamma: f64,
    pub lambda: f64,
    pub a_hat: f64,
    pub std_error: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApproxErrorReport {
    pub estimates: Vec<(f64, ApproxErrorEstimate)>,
    pub exponent_fits: Vec<(f64, ApproxExponentFit)>,
    pub noise_fit: Option<NoiseExponentFit>,
    pub checks: Vec<GeometricCheck>,
    pub pass: bool,
}

pub fn run_approx_error(cfg: &ApproxErrorRunConfig) -> Result<ApproxErrorReport> {
    let embedder = match cfg.base_kernel {
        None => Embedder::Mean,
        Some(k) => {
            if k.dim != cfg.meta.dim {
                return Err(Error::input("base kernel and meta dimensions differ"));
            }
            Embedder::Direct(k)
        }
    };
    let est_cfg = ApproxErrorConfig {
        lambda_grid: cfg.lambda_grid.clone(),
        big_n: cfg.big_n,
        test_pairs: cfg.test_pairs,
        bag_size: cfg.bag_size,
        seeds: cfg.seeds,
        seed: cfg.seed,
        train: cfg.svm.train_options()?,
    };
    let kernels: Vec<HilbertKernel> = match &cfg.geometric {
        None => vec![cfg.hilbert_kernel],
        Some(g) => g.gamma_grid.iter().map(|&w| cfg.hilbert_kernel.with_width(w)).collect::<Result<_>>()?,
    };
    let mut estimates = Vec::new();
    let mut fits = Vec::new();
    for hk in &kernels {
        let est = approx_error_estimate(&cfg.meta, hk, &embedder, &est_cfg)?;
        let a: Vec<f64> = est.a_hat.iter().map(|m| m.mean).collect();
        let w = hk.width.unwrap_or(f64::NAN);
        fits.push((w, fit_approx_exponent(&est.lambda_grid, &a)?));
        estimates.push((w, est));
    }
    let mut checks = Vec::new();
    let mut noise_fit = None;
    if let Some(g) = &cfg.geometric {
        let fit = run_noise_exponent(&g.noise)?;
        if fit.degenerate {
            return Err(Error::numerical("noise exponent fit is degenerate"));
        }
        for (gamma, est) in &estimates {
            if gamma * gamma >= g.noise.t_bar {
                continue;
            }
            for &lambda in &g.check_lambdas {
                let k = est
                    .lambda_grid
                    .iter()
                    .position(|&l| (l - lambda).abs() <= 1e-12 * lambda)
                    .ok_or_else(|| Error::input(format!("check λ = {lambda} is not on the λ grid")))?;
                // Â's error combines its own spread with that of the best-risk term.
                let a = est.a_hat[k];
                let se = (a.std_error.powi(2) + est.best_risk.std_error.powi(2)).sqrt();
                let bound = geometric_approx_bound(fit.c_hat, fit.alpha_hat, *gamma, lambda);
                checks.push(GeometricCheck { gamma: *gamma, lambda, a_hat: a.mean, std_error: se, bound, pass: a.mean <= bound + 3.0 * se });
            }
        }
        noise_fit = Some(fit);
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(ApproxErrorReport { estimates, exponent_fits: fits, noise_fit, checks, pass })
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .map_err(|source| Error::Io { path: "<stdout>".into(), source })
        }
    }
}

/// Reads a bag file for training or prediction.
pub fn load_bags(path: &Path) -> Result<Vec<crate::kme::LabeledBag>> {
    let bags = crate::kme::read_dataset(path)?;
    if bags.is_empty() {
        return Err(Error::input(format!("{}: no bags", path.display())));
    }
    Ok(bags)
}

pub fn bag_sample_sets(bags: &[crate::kme::LabeledBag]) -> Result<Vec<SampleSet>> {
    bags.iter().map(|b| b.sample_set()).collect()
}
