//! Finite-dimensional Gaussian-measure laboratory.
//!
//! A positive-definite covariance `Q` on `ℝᵈ` stands in for a trace-class
//! operator with trivial kernel. The white noise mapping is then exact:
//! `W_h(z) = ⟨Q^{−1/2}h, z⟩`, and under `z ~ N(0, Q)` it is a centered normal
//! with variance `‖h‖²`. Complex expectations are carried as `(re, im)` pairs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tag, StreamRng};
use crate::stats::{linear_fit, MeanSe, Moments};
use crate::synth::{MetaDistribution, MetaFamily};

const MC_CHUNK: usize = 4096;
const MIN_MC: usize = 1000;
/// Pass threshold in standard errors.
pub const SE_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceOperator {
    eigenvalues: Vec<f64>,
    /// Columns are orthonormal eigenvectors.
    eigenvectors: DMatrix<f64>,
}

impl CovarianceOperator {
    pub fn from_matrix(q: &DMatrix<f64>) -> Result<Self> {
        if !q.is_square() || q.nrows() == 0 {
            return Err(Error::input("covariance must be a nonempty square matrix"));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("covariance has non-finite entries"));
        }
        if (q - q.transpose()).amax() > 1e-12 * (1.0 + q.amax()) {
            return Err(Error::input("covariance is not symmetric"));
        }
        let eig = SymmetricEigen::new(q.clone());
        let op = CovarianceOperator { eigenvalues: eig.eigenvalues.iter().copied().collect(), eigenvectors: eig.eigenvectors };
        op.validate()?;
        let err = (op.matrix() - q).amax();
        if err > 1e-10 * (1.0 + q.amax()) {
            return Err(Error::numerical(format!("eigendecomposition reconstruction error {err:e}")));
        }
        Ok(op)
    }

    pub fn diagonal(eigenvalues: &[f64]) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::input("covariance needs at least one eigenvalue"));
        }
        let op = CovarianceOperator {
            eigenvalues: eigenvalues.to_vec(),
            eigenvectors: DMatrix::identity(eigenvalues.len(), eigenvalues.len()),
        };
        op.validate()?;
        Ok(op)
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::diagonal(&vec![1.0; dim])
    }

    fn validate(&self) -> Result<()> {
        if let Some(v) = self.eigenvalues.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::input(format!("covariance eigenvalues must be positive, found {v}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        v * DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues)) * v.transpose()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::input(format!("vector has dimension {}, expected {}", x.len(), self.dim())));
        }
        Ok(())
    }

    /// Coordinates in the eigenbasis, `Vᵀx`.
    fn to_eigenbasis(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|k| self.eigenvectors.column(k).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn from_eigenbasis(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (k, ck) in c.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.eigenvectors.column(k).iter()) {
                *o += ck * v;
            }
        }
        out
    }

    /// `Q^{p}x` for real `p`.
    pub fn apply_power(&self, x: &[f64], p: f64) -> Result<Vec<f64>> {
        self.check(x)?;
        let c: Vec<f64> = self.to_eigenbasis(x).iter().zip(&self.eigenvalues).map(|(c, q)| c * q.powf(p)).collect();
        Ok(self.from_eigenbasis(&c))
    }

    /// One draw of `N(0, Q)` from standard normals `ξ`: `V·diag(√q)·ξ`.
    fn draw(&self, xi: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = xi.iter().zip(&self.eigenvalues).map(|(x, q)| x * q.sqrt()).collect();
        self.from_eigenbasis(&c)
    }
}

/// `W_h(z) = ⟨Q^{−1/2}h, z⟩`.
pub fn white_noise(h: &[f64], z: &[f64], q: &CovarianceOperator) -> Result<f64> {
    q.check(z)?;
    let g = q.apply_power(h, -0.5)?;
    Ok(dot(&g, z))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Monte Carlo estimate compared against a known target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub estimate: f64,
    pub std_error: f64,
    pub target: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn new(est: MeanSe, target: f64) -> Self {
        let dev = (est.mean - target).abs();
        let pass = dev <= SE_THRESHOLD * est.std_error || dev <= 1e-12 * (1.0 + target.abs());
        CheckReport { estimate: est.mean, std_error: est.std_error, target, pass }
    }
}

/// Real and imaginary halves of a complex expectation check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexCheckReport {
    pub real: CheckReport,
    pub imag: CheckReport,
    pub pass: bool,
}

/// Runs `n` i.i.d. draws `z ~ N(0, Q)` in fixed chunks and averages each of
/// the `K` outputs of `f(z)`. The reduction order is fixed, so the result does
/// not depend on the thread count.
fn mc_over_q<const K: usize, F>(q: &CovarianceOperator, n: usize, seed: u64, f: F) -> Result<[MeanSe; K]>
where
    F: Fn(&[f64]) -> [f64; K] + Sync,
{
    if n < MIN_MC {
        return Err(Error::input(format!("n_mc must be at least {MIN_MC}, got {n}")));
    }
    let chunks = n.div_ceil(MC_CHUNK);
    let partial: Vec<[Moments; K]> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = StreamRng::new(seed, tag::WHITE_NOISE, ci as u64);
            let mut xi = vec![0.0; q.dim()];
            let mut acc = [Moments::default(); K];
            for _ in 0..MC_CHUNK.min(n - ci * MC_CHUNK) {
                rng.fill_normal(&mut xi);
                let z = q.draw(&xi);
                for (a, v) in acc.iter_mut().zip(f(&z)) {
                    a.push(v);
                }
            }
            acc
        })
        .collect();
    let mut total = [Moments::default(); K];
    for p in &partial {
        for (t, m) in total.iter_mut().zip(p) {
            t.merge(m);
        }
    }
    Ok(total.map(|m| m.mean_se()))
}

/// `E[W_{h1} W_{h2}] = ⟨h1, h2⟩` under `N(0, Q)`.
pub fn white_noise_isometry_check(
    h1: &[f64],
    h2: &[f64],
    q: &CovarianceOperator,
    n_mc: usize,
    seed: u64,
) -> Result<CheckReport> {
    let g1 = q.apply_power(h1, -0.5)?;
    let g2 = q.apply_power(h2, -0.5)?;
    let [est] = mc_over_q(q, n_mc, seed, |z| [dot(&g1, z) * dot(&g2, z)])?;
    Ok(CheckReport::new(est, dot(h1, h2)))
}

/// `∫ exp(iλW_h) dN(0, Q) = exp(−λ²‖h‖²/2)`.
pub fn characteristic_identity_check(
    h: &[f64],
    lambda: f64,
    q: &CovarianceOperator,
    n_mc: usize,
    seed: u64,
) -> Result<ComplexCheckReport> {
    if !lambda.is_finite() {
        return Err(Error::input("λ must be finite"));
    }
    let g = q.apply_power(h, -0.5)?;
    let [re, im] = mc_over_q(q, n_mc, seed, |z| {
        let w = lambda * dot(&g, z);
        [w.cos(), w.sin()]
    })?;
    let real = CheckReport::new(re, (-0.5 * lambda * lambda * dot(h, h)).exp());
    let imag = CheckReport::new(im, 0.0);
    Ok(ComplexCheckReport { real, imag, pass: real.pass && imag.pass })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::input(format!("γ must be positive, got {gamma}")));
    }
    Ok(())
}

/// `Re E[exp(i(√2/γ)(W_x − W_{x'}))]` against `exp(−‖x−x'‖²/γ²)`.
pub fn feature_inner_mc(
    x: &[f64],
    x2: &[f64],
    gamma: f64,
    q: &CovarianceOperator,
    n_mc: usize,
    seed: u64,
) -> Result<CheckReport> {
    check_gamma(gamma)?;
    let a = std::f64::consts::SQRT_2 / gamma;
    let gx = q.apply_power(x, -0.5)?;
    let gx2 = q.apply_power(x2, -0.5)?;
    let [est] = mc_over_q(q, n_mc, seed, |z| [(a * (dot(&gx, z) - dot(&gx2, z))).cos()])?;
    let d2 = crate::base_kernels::squared_distance(x, x2);
    Ok(CheckReport::new(est, (-d2 / (gamma * gamma)).exp()))
}

/// `(V_Q g)(x) = Re ∫ exp(−i(√2/γ)W_x(z)) g(z) dN(z|0, Q)`, with `g`
/// returning `(re, im)`.
pub fn canonical_surjection_eval<G>(
    g: G,
    x: &[f64],
    gamma: f64,
    q: &CovarianceOperator,
    n_mc: usize,
    seed: u64,
) -> Result<MeanSe>
where
    G: Fn(&[f64]) -> (f64, f64) + Sync,
{
    check_gamma(gamma)?;
    let a = std::f64::consts::SQRT_2 / gamma;
    let gx = q.apply_power(x, -0.5)?;
    let [est] = mc_over_q(q, n_mc, seed, |z| {
        let w = a * dot(&gx, z);
        let (re, im) = g(z);
        [w.cos() * re + w.sin() * im]
    })?;
    Ok(est)
}

/// The feature map `Φ_Q(x')(z) = exp(i(√2/γ)W_{x'}(z))` as an `(re, im)` function.
pub fn feature_map(x: &[f64], gamma: f64, q: &CovarianceOperator) -> Result<impl Fn(&[f64]) -> (f64, f64) + Sync> {
    check_gamma(gamma)?;
    let a = std::f64::consts::SQRT_2 / gamma;
    let gx = q.apply_power(x, -0.5)?;
    Ok(move |z: &[f64]| {
        let w = a * dot(&gx, z);
        (w.cos(), w.sin())
    })
}

/// `∫ exp(−‖x−y‖²/t) dN(y|0, Q)` in closed form:
/// `Πₖ (1 + 2qₖ/t)^{−1/2} exp(−x̃ₖ²/(t + 2qₖ))` with `x̃ = Vᵀx`.
pub fn gaussian_smoothing_exact(x: &[f64], t: f64, q: &CovarianceOperator) -> Result<f64> {
    q.check(x)?;
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::input(format!("t must be positive, got {t}")));
    }
    let xt = q.to_eigenbasis(x);
    let mut log = 0.0;
    for (c, qk) in xt.iter().zip(&q.eigenvalues) {
        log += -0.5 * (1.0 + 2.0 * qk / t).ln() - c * c / (t + 2.0 * qk);
    }
    Ok(log.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothedValue {
    pub raw: f64,
    pub clamped: f64,
    pub std_error: f64,
}

/// `f̂(x) = ∫ f*(y) exp(−‖x−y‖²/γ²) dN(y|0, Q)` for an arbitrary `f*`.
pub fn smoothed_eval<F>(f_star: F, x: &[f64], gamma: f64, q: &CovarianceOperator, n_mc: usize, seed: u64) -> Result<SmoothedValue>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    check_gamma(gamma)?;
    q.check(x)?;
    let g2 = gamma * gamma;
    let [est] = mc_over_q(q, n_mc, seed, |y| [f_star(y) * (-crate::base_kernels::squared_distance(x, y) / g2).exp()])?;
    Ok(SmoothedValue { raw: est.mean, clamped: est.mean.clamp(-1.0, 1.0), std_error: est.std_error })
}

/// Smoothed Bayes hypothesis of the hard-margin problem, whose Bayes decision
/// is the side of the hyperplane `x₁ = 0`.
pub fn smoothed_bayes_eval(
    meta: &MetaDistribution,
    x: &[f64],
    gamma: f64,
    q: &CovarianceOperator,
    n_mc: usize,
    seed: u64,
) -> Result<SmoothedValue> {
    let problem = HalfspaceProblem::new(meta)?;
    if q.dim() != meta.dim {
        return Err(Error::input("covariance and problem dimensions differ"));
    }
    smoothed_eval(|y| problem.f_star(y), x, gamma, q, n_mc, seed)
}

/// A classification problem on `ℝᵈ` exposing what the geometric-noise
/// integrals need: a sampler for `P_X`, `η` and the distance `Δ`.
pub trait GeometricProblem: Sync {
    fn dim(&self) -> usize;
    fn sample_x(&self, rng: &mut StreamRng) -> Vec<f64>;
    fn eta(&self, x: &[f64]) -> f64;
    fn delta(&self, x: &[f64]) -> f64;
    fn f_star(&self, x: &[f64]) -> f64 {
        let e = self.eta(x);
        if e > 0.5 {
            1.0
        } else if e < 0.5 {
            -1.0
        } else {
            0.0
        }
    }
}

/// The hard-margin meta-distribution seen through its centers: `P_X` is the
/// center law and `η` is the indicator of the half-space `x₁ > 0`, which agrees
/// with the class supports and makes `Δ(x) = |x₁|`.
#[derive(Debug, Clone)]
pub struct HalfspaceProblem {
    meta: MetaDistribution,
}

impl HalfspaceProblem {
    pub fn new(meta: &MetaDistribution) -> Result<Self> {
        if meta.family != MetaFamily::HardMargin {
            return Err(Error::unsupported("the half-space problem requires the hard_margin family"));
        }
        Ok(HalfspaceProblem { meta: meta.clone() })
    }
}

impl GeometricProblem for HalfspaceProblem {
    fn dim(&self) -> usize {
        self.meta.dim
    }

    fn sample_x(&self, rng: &mut StreamRng) -> Vec<f64> {
        let label = if rng.uniform() < self.meta.p_plus { 1 } else { -1 };
        self.meta.draw_center(label, rng)
    }

    fn eta(&self, x: &[f64]) -> f64 {
        if x[0] > 0.0 {
            1.0
        } else if x[0] < 0.0 {
            0.0
        } else {
            0.5
        }
    }

    fn delta(&self, x: &[f64]) -> f64 {
        x[0].abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricNoisePoint {
    pub t: f64,
    pub i1: MeanSe,
    pub i2: MeanSe,
}

/// Nested Monte Carlo for the two localization integrals on a grid of `t`.
///
/// Outer draws `x ~ P_X` and inner draws `z ~ N(0, Q)` are shared across the
/// whole grid. The inner draws serve both integrals: `y = z` for the ball
/// integral and `y = x + z` for the shifted one. Standard errors come from the
/// spread of the per-`x` inner averages.
pub fn geometric_noise_integrals<P: GeometricProblem>(
    problem: &P,
    t_grid: &[f64],
    q: &CovarianceOperator,
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> Result<Vec<GeometricNoisePoint>> {
    if t_grid.is_empty() {
        return Err(Error::input("t grid is empty"));
    }
    if let Some(t) = t_grid.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::input(format!("t must be positive, got {t}")));
    }
    if n_outer < 2 || n_inner < 1 {
        return Err(Error::input("need at least two outer and one inner draw"));
    }
    if q.dim() != problem.dim() {
        return Err(Error::input("covariance and problem dimensions differ"));
    }
    let nt = t_grid.len();
    // Per outer draw: (I1 term, I2 term) for every t.
    let per_x: Vec<Vec<(f64, f64)>> = (0..n_outer)
        .into_par_iter()
        .map(|i| {
            let mut outer = StreamRng::new(seed, tag::OUTER_MC, i as u64);
            let x = problem.sample_x(&mut outer);
            let weight = (2.0 * problem.eta(&x) - 1.0).abs();
            if weight == 0.0 {
                return vec![(0.0, 0.0); nt];
            }
            let delta = problem.delta(&x);
            let d2 = delta * delta;
            let mut inner = StreamRng::new(seed, tag::INNER_MC, i as u64);
            let mut xi = vec![0.0; q.dim()];
            let mut ball = vec![0.0; nt];
            let mut shifted = vec![0.0; nt];
            for _ in 0..n_inner {
                inner.fill_normal(&mut xi);
                let z = q.draw(&xi);
                let dz = crate::base_kernels::squared_distance(&x, &z);
                let mut yy = 0.0;
                for (a, b) in x.iter().zip(&z) {
                    yy += (a + b) * (a + b);
                }
                for (k, &t) in t_grid.iter().enumerate() {
                    if dz <= d2 {
                        ball[k] += (-dz / t).exp();
                    }
                    shifted[k] += (-yy / t).exp();
                }
            }
            let m = n_inner as f64;
            (0..nt).map(|k| ((1.0 - 2.0 * ball[k] / m) * weight, shifted[k] / m * weight)).collect()
        })
        .collect();
    Ok(t_grid
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut a = Moments::default();
            let mut b = Moments::default();
            for row in &per_x {
                a.push(row[k].0);
                b.push(row[k].1);
            }
            GeometricNoisePoint { t, i1: a.mean_se(), i2: b.mean_se() }
        })
        .collect())
}

/// Power-law fit `I(t) ≤ Ĉ·t^α̂` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub alpha_hat: f64,
    pub c_hat: f64,
    /// Too few points above the floor to identify the exponent.
    pub degenerate: bool,
    pub points_used: usize,
}

/// Least squares on `(log t, log I)` over grid points above `floor`; `Ĉ` is
/// the smallest constant with `I(t) ≤ Ĉ·t^α̂` on the full grid.
pub fn fit_noise_exponent(t_grid: &[f64], values: &[f64], floor: f64) -> Result<ExponentFit> {
    if t_grid.len() != values.len() || t_grid.len() < 3 {
        return Err(Error::input("exponent fit needs at least three grid points"));
    }
    if !(floor > 0.0) {
        return Err(Error::input("floor must be positive"));
    }
    if t_grid.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::input("grid points must be positive"));
    }
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::input("integral values must be finite and nonnegative"));
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) =
        t_grid.iter().zip(values).filter(|(_, v)| **v > floor).map(|(t, v)| (t.ln(), v.ln())).unzip();
    if lx.len() < 2 {
        return Ok(ExponentFit { alpha_hat: f64::NAN, c_hat: f64::NAN, degenerate: true, points_used: lx.len() });
    }
    let (alpha, _) = linear_fit(&lx, &ly)?;
    let c = covering_constant(t_grid, values, alpha);
    Ok(ExponentFit { alpha_hat: alpha, c_hat: c, degenerate: false, points_used: lx.len() })
}

pub(crate) fn covering_constant(grid: &[f64], values: &[f64], exponent: f64) -> f64 {
    grid.iter().zip(values).map(|(t, v)| v / t.powf(exponent)).fold(0.0, f64::max)
}

/// Combined fit for both integrals: `α̂ = min(α̂₁, α̂₂)` and `Ĉ` covering both
/// series at that exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseExponentFit {
    pub t_grid: Vec<f64>,
    pub points: Vec<GeometricNoisePoint>,
    pub i1_fit: ExponentFit,
    pub i2_fit: ExponentFit,
    pub alpha_hat: f64,
    pub c_hat: f64,
    pub degenerate: bool,
    /// `α̂ > 0`, as the assumption requires.
    pub valid: bool,
}

pub fn fit_geometric_noise(points: &[GeometricNoisePoint], floor: f64) -> Result<NoiseExponentFit> {
    let t: Vec<f64> = points.iter().map(|p| p.t).collect();
    let i1: Vec<f64> = points.iter().map(|p| p.i1.mean.max(0.0)).collect();
    let i2: Vec<f64> = points.iter().map(|p| p.i2.mean.max(0.0)).collect();
    let f1 = fit_noise_exponent(&t, &i1, floor)?;
    let f2 = fit_noise_exponent(&t, &i2, floor)?;
    let (alpha, degenerate) = match (f1.degenerate, f2.degenerate) {
        (true, true) => (f64::NAN, true),
        (true, false) => (f2.alpha_hat, false),
        (false, true) => (f1.alpha_hat, false),
        (false, false) => (f1.alpha_hat.min(f2.alpha_hat), false),
    };
    let c = if degenerate { f64::NAN } else { covering_constant(&t, &i1, alpha).max(covering_constant(&t, &i2, alpha)) };
    Ok(NoiseExponentFit {
        t_grid: t,
        points: points.to_vec(),
        i1_fit: f1,
        i2_fit: f2,
        alpha_hat: alpha,
        c_hat: c,
        degenerate,
        valid: !degenerate && alpha > 0.0,
    })
}
