//! Hinge-loss SVM over the second-level RKHS.
//!
//! The learner minimizes `(1/N) Σ max{0, 1 − yₙ f(xₙ)} + λ‖f‖²` over the RKHS
//! with no offset term. Its dual is the box-constrained QP
//! `max Σαᵢ − ½ Σᵢⱼ αᵢαⱼyᵢyⱼKᵢⱼ` subject to `0 ≤ αᵢ ≤ C = 1/(2λN)`, with
//! `f = Σ αᵢyᵢ k(·, xᵢ)`. There is no equality constraint, so plain cyclic
//! coordinate ascent with exact one-dimensional maximization converges.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_kernels::BaseKernel;
use crate::error::{Error, Result};
use crate::hilbert_kernel::{HilbertFamily, HilbertKernel};
use crate::kme::{embed, inner, EmpiricalEmbedding, LabeledBag};

/// Diagonal entries at or below this are treated as zero.
const DEGENERATE_DIAGONAL: f64 = 1e-12;
/// Gradients are recomputed from scratch this often to stop drift.
const REFRESH_SWEEPS: usize = 50;
/// Newton refinement is skipped when more coordinates than this are free.
const NEWTON_MAX_FREE: usize = 3000;
const NEWTON_RIDGE: f64 = 1e-12;
/// Boundary cuts allowed per refinement.
const NEWTON_MAX_CUTS: usize = 20;

pub fn check_label(y: i8) -> Result<f64> {
    match y {
        1 => Ok(1.0),
        -1 => Ok(-1.0),
        _ => Err(Error::input(format!("labels must be ±1, got {y}"))),
    }
}

/// Sign with `sgn(0) = +1`.
#[inline]
pub fn sgn(t: f64) -> i8 {
    if t >= 0.0 {
        1
    } else {
        -1
    }
}

pub fn hinge(y: i8, t: f64) -> Result<f64> {
    Ok((1.0 - check_label(y)? * t).max(0.0))
}

pub fn zero_one(y: i8, t: f64) -> Result<f64> {
    check_label(y)?;
    Ok(if sgn(t) == y { 0.0 } else { 1.0 })
}

#[inline]
pub fn clip(t: f64, bound: f64) -> f64 {
    t.clamp(-bound, bound)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Hinge,
    ZeroOne,
}

impl Loss {
    pub fn eval(&self, y: i8, t: f64) -> Result<f64> {
        match self {
            Loss::Hinge => hinge(y, t),
            Loss::ZeroOne => zero_one(y, t),
        }
    }
}

/// Symmetric matrix of second-level kernel values between training inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
}

impl GramMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(Error::input("Gram matrix must be square and nonempty"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("Gram matrix has non-finite entries"));
        }
        let n = entries.nrows();
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (entries[(i, j)], entries[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::input(format!("Gram matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(GramMatrix { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::input("Gram rows must all have length N"));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    /// Builds `K[i][j] = k(eᵢ, eⱼ)` from a base inner-product oracle.
    /// Self inner products are computed once; rows are filled in parallel and
    /// assembled in index order.
    pub fn from_inner_fn<F>(n: usize, hkernel: &HilbertKernel, inner_fn: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> Result<f64> + Sync,
    {
        let norms: Vec<f64> = (0..n).into_par_iter().map(|i| inner_fn(i, i)).collect::<Result<_>>()?;
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i..n)
                    .map(|j| {
                        let ab = if i == j { norms[i] } else { inner_fn(i, j)? };
                        hkernel.eval_from_inners(norms[i], ab, norms[j])
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in upper.iter().enumerate() {
            for (off, &v) in row.iter().enumerate() {
                m[(i, i + off)] = v;
                m[(i + off, i)] = v;
            }
        }
        Self::new(m)
    }

    pub fn from_embeddings(hkernel: &HilbertKernel, embeddings: &[EmpiricalEmbedding]) -> Result<Self> {
        Self::from_inner_fn(embeddings.len(), hkernel, |i, j| inner(&embeddings[i], &embeddings[j]))
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.entries.clone().symmetric_eigenvalues().min()
    }

    /// PSD up to `−10⁻⁸·N`.
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -1e-8 * self.n() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrder {
    #[default]
    Cyclic,
    /// A fresh pseudo-random permutation each sweep, derived from the seed.
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub tol: f64,
    pub max_sweeps: usize,
    pub order: SweepOrder,
    #[serde(skip)]
    pub deadline: Option<Instant>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { tol: 1e-8, max_sweeps: 10_000, order: SweepOrder::Cyclic, deadline: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub dual_coefs: Vec<f64>,
    pub labels: Vec<i8>,
    pub box_c: f64,
    pub lambda: f64,
    pub clip_bound: f64,
    /// Training embeddings; empty when trained from a bare Gram matrix.
    pub support: Vec<EmpiricalEmbedding>,
    pub hkernel: Option<HilbertKernel>,
    pub kkt_residual: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub timed_out: bool,
    /// Dual objective after each sweep.
    pub objective_trace: Vec<f64>,
}

/// Solves the dual by cyclic coordinate ascent.
pub fn train(gram: &GramMatrix, labels: &[i8], lambda: f64, opts: &TrainOptions) -> Result<SvmModel> {
    let n = gram.n();
    if labels.len() != n {
        return Err(Error::input(format!("{} labels for a {n}×{n} Gram matrix", labels.len())));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::input(format!("λ must be positive, got {lambda}")));
    }
    let y: Vec<f64> = labels.iter().map(|&l| check_label(l)).collect::<Result<_>>()?;
    let k = gram.matrix();
    let c = 1.0 / (2.0 * lambda * n as f64);

    let mut alpha = vec![0.0; n];
    let mut grad = vec![1.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::new();
    let mut sweeps = 0;
    let mut residual = projected_residual(&alpha, &grad, c);
    let mut timed_out = false;

    while residual > opts.tol && sweeps < opts.max_sweeps {
        if let Some(deadline) = opts.deadline {
            if Instant::now() >= deadline {
                timed_out = true;
                break;
            }
        }
        if let SweepOrder::Shuffled { seed } = opts.order {
            shuffle(&mut order, seed.wrapping_add(sweeps as u64));
        }
        for &i in &order {
            let kii = k[(i, i)];
            let target = if kii > DEGENERATE_DIAGONAL {
                alpha[i] + grad[i] / kii
            } else if grad[i] > 0.0 {
                c
            } else {
                0.0
            };
            let new = target.clamp(0.0, c);
            let delta = new - alpha[i];
            if delta != 0.0 {
                alpha[i] = new;
                let s = delta * y[i];
                let col = k.column(i);
                for j in 0..n {
                    grad[j] -= s * y[j] * col[j];
                }
            }
        }
        sweeps += 1;
        if sweeps % REFRESH_SWEEPS == 0 {
            grad = dual_gradient(k, &y, &alpha);
            if newton_refine(k, &y, &mut alpha, &grad, c) {
                grad = dual_gradient(k, &y, &alpha);
            }
        }
        trace.push(dual_objective_from_grad(&alpha, &grad));
        residual = projected_residual(&alpha, &grad, c);
    }
    grad = dual_gradient(k, &y, &alpha);
    residual = projected_residual(&alpha, &grad, c);

    Ok(SvmModel {
        dual_coefs: alpha,
        labels: labels.to_vec(),
        box_c: c,
        lambda,
        clip_bound: 1.0,
        support: Vec::new(),
        hkernel: None,
        kkt_residual: residual,
        sweeps,
        converged: residual <= opts.tol,
        timed_out,
        objective_trace: trace,
    })
}

fn dual_gradient(k: &DMatrix<f64>, y: &[f64], alpha: &[f64]) -> Vec<f64> {
    let n = y.len();
    let ay: Vec<f64> = alpha.iter().zip(y).map(|(a, b)| a * b).collect();
    (0..n)
        .map(|i| {
            let row: f64 = (0..n).map(|j| k[(i, j)] * ay[j]).sum();
            1.0 - y[i] * row
        })
        .collect()
}

/// Newton steps on the coordinates strictly inside the box, holding the bound
/// ones fixed. A step that would leave the box is cut at the first boundary
/// crossing, that coordinate joins the bound set and the step is repeated.
/// Coordinate ascent alone crawls on ill-conditioned Gram matrices; once the
/// active set has settled this lands on the optimum directly. Kept only if it
/// raises the objective.
fn newton_refine(k: &DMatrix<f64>, y: &[f64], alpha: &mut [f64], grad: &[f64], c: f64) -> bool {
    let before = dual_objective_from_grad(alpha, grad);
    let mut trial = alpha.to_vec();
    let mut g = grad.to_vec();
    for _ in 0..NEWTON_MAX_CUTS {
        let free: Vec<usize> = (0..trial.len()).filter(|&i| trial[i] > 0.0 && trial[i] < c).collect();
        if free.is_empty() || free.len() > NEWTON_MAX_FREE {
            break;
        }
        let h = DMatrix::from_fn(free.len(), free.len(), |a, b| {
            let (i, j) = (free[a], free[b]);
            y[i] * y[j] * k[(i, j)] + if a == b { NEWTON_RIDGE * (1.0 + k[(i, i)]) } else { 0.0 }
        });
        let Some(chol) = h.cholesky() else { break };
        let step = chol.solve(&nalgebra::DVector::from_iterator(free.len(), free.iter().map(|&i| g[i])));
        let mut t = 1.0f64;
        let mut blocking = None;
        for (a, &i) in free.iter().enumerate() {
            let limit = if step[a] < 0.0 {
                trial[i] / -step[a]
            } else if step[a] > 0.0 {
                (c - trial[i]) / step[a]
            } else {
                f64::INFINITY
            };
            if limit < t {
                t = limit;
                blocking = Some((a, i));
            }
        }
        for (a, &i) in free.iter().enumerate() {
            trial[i] = (trial[i] + t * step[a]).clamp(0.0, c);
        }
        if let Some((a, i)) = blocking {
            trial[i] = if step[a] < 0.0 { 0.0 } else { c };
        }
        g = dual_gradient(k, y, &trial);
        if blocking.is_none() {
            break;
        }
    }
    if dual_objective_from_grad(&trial, &g) > before {
        alpha.copy_from_slice(&trial);
        true
    } else {
        false
    }
}

fn dual_objective_from_grad(alpha: &[f64], grad: &[f64]) -> f64 {
    0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (1.0 + g)).sum::<f64>()
}

fn projected_residual(alpha: &[f64], grad: &[f64], c: f64) -> f64 {
    alpha
        .iter()
        .zip(grad)
        .map(|(&a, &g)| {
            if a <= 0.0 {
                g.max(0.0)
            } else if a >= c {
                (-g).max(0.0)
            } else {
                g.abs()
            }
        })
        .fold(0.0, f64::max)
}

fn shuffle(order: &mut [usize], seed: u64) {
    let mut rng = crate::rng::StreamRng::new(seed, crate::rng::tag::AUX, 0);
    for i in (1..order.len()).rev() {
        let j = ((rng.uniform() * (i + 1) as f64) as usize).min(i);
        order.swap(i, j);
    }
}

impl SvmModel {
    /// Embeds nothing; takes already-embedded training inputs, builds the Gram
    /// matrix and trains.
    pub fn fit(
        support: Vec<EmpiricalEmbedding>,
        labels: &[i8],
        hkernel: &HilbertKernel,
        lambda: f64,
        opts: &TrainOptions,
    ) -> Result<Self> {
        let gram = GramMatrix::from_embeddings(hkernel, &support)?;
        let mut model = train(&gram, labels, lambda, opts)?;
        model.support = support;
        model.hkernel = Some(*hkernel);
        Ok(model)
    }

    pub fn n(&self) -> usize {
        self.dual_coefs.len()
    }

    /// `f(x)` given the kernel values `k(xᵢ, x)` against every training input.
    pub fn decision_from_kernel_row(&self, row: &[f64]) -> f64 {
        self.dual_coefs
            .iter()
            .zip(&self.labels)
            .zip(row)
            .map(|((a, &y), k)| a * y as f64 * k)
            .sum()
    }

    /// `f` at every training input.
    pub fn training_decisions(&self, gram: &GramMatrix) -> Vec<f64> {
        (0..gram.n())
            .map(|i| {
                let row: Vec<f64> = (0..gram.n()).map(|j| gram.get(i, j)).collect();
                self.decision_from_kernel_row(&row)
            })
            .collect()
    }

    /// `‖f‖²_k = Σᵢⱼ αᵢαⱼyᵢyⱼKᵢⱼ`.
    pub fn rkhs_norm_sq(&self, gram: &GramMatrix) -> f64 {
        let n = self.n();
        let ay: Vec<f64> = self.dual_coefs.iter().zip(&self.labels).map(|(a, &y)| a * y as f64).collect();
        let mut s = 0.0;
        for i in 0..n {
            if ay[i] == 0.0 {
                continue;
            }
            let row: f64 = (0..n).map(|j| gram.get(i, j) * ay[j]).sum();
            s += ay[i] * row;
        }
        s.max(0.0)
    }

    pub fn dual_objective(&self, gram: &GramMatrix) -> f64 {
        self.dual_coefs.iter().sum::<f64>() - 0.5 * self.rkhs_norm_sq(gram)
    }

    pub fn decision_value(&self, e: &EmpiricalEmbedding) -> Result<f64> {
        let hk = self
            .hkernel
            .ok_or_else(|| Error::input("model has no attached training embeddings"))?;
        let mut row = Vec::with_capacity(self.n());
        let ee = inner(e, e)?;
        for (i, s) in self.support.iter().enumerate() {
            if self.dual_coefs[i] == 0.0 {
                row.push(0.0);
                continue;
            }
            let v = match hk.family {
                HilbertFamily::Gaussian => hk.eval_from_inners(inner(s, s)?, inner(s, e)?, ee)?,
                HilbertFamily::Linear => inner(s, e)?,
            };
            row.push(v);
        }
        Ok(self.decision_from_kernel_row(&row))
    }

    /// Predicted label of a raw bag: `sgn(clip(f(embed(S))))`.
    pub fn predict(&self, samples: &crate::kme::SampleSet) -> Result<i8> {
        let base = self
            .support
            .first()
            .map(|s| *s.kernel())
            .ok_or_else(|| Error::input("model has no attached training embeddings"))?;
        let e = embed(&base, samples)?;
        Ok(sgn(clip(self.decision_value(&e)?, self.clip_bound)))
    }

    pub fn to_saved(&self) -> Result<SavedModel> {
        let hk = self.hkernel.ok_or_else(|| Error::input("model has no kernel configuration"))?;
        let base = *self
            .support
            .first()
            .ok_or_else(|| Error::input("model has no support bags to persist"))?
            .kernel();
        let support_bags = self
            .support
            .iter()
            .zip(&self.labels)
            .map(|(e, &label)| {
                if !e.is_point_expansion() {
                    return Err(Error::unsupported("only sample-bag embeddings can be persisted"));
                }
                Ok(LabeledBag { label, samples: (0..e.len()).map(|i| e.point(i).to_vec()).collect() })
            })
            .collect::<Result<_>>()?;
        Ok(SavedModel {
            dual_coefs: self.dual_coefs.clone(),
            labels: self.labels.clone(),
            lambda: self.lambda,
            box_c: self.box_c,
            clip_bound: self.clip_bound,
            base_kernel: base,
            hilbert_kernel: hk,
            kkt_residual: self.kkt_residual,
            support_bags,
        })
    }
}

/// On-disk model: coefficients, kernels and the raw support bags, so that
/// prediction re-embeds from samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub dual_coefs: Vec<f64>,
    pub labels: Vec<i8>,
    pub lambda: f64,
    pub box_c: f64,
    pub clip_bound: f64,
    pub base_kernel: BaseKernel,
    pub hilbert_kernel: HilbertKernel,
    pub kkt_residual: f64,
    pub support_bags: Vec<LabeledBag>,
}

impl SavedModel {
    pub fn into_model(self) -> Result<SvmModel> {
        if self.dual_coefs.len() != self.labels.len() || self.labels.len() != self.support_bags.len() {
            return Err(Error::input("model file has inconsistent lengths"));
        }
        let support = self
            .support_bags
            .iter()
            .map(|b| embed(&self.base_kernel, &b.sample_set()?))
            .collect::<Result<_>>()?;
        Ok(SvmModel {
            dual_coefs: self.dual_coefs,
            labels: self.labels,
            box_c: self.box_c,
            lambda: self.lambda,
            clip_bound: self.clip_bound,
            support,
            hkernel: Some(self.hilbert_kernel),
            kkt_residual: self.kkt_residual,
            sweeps: 0,
            converged: true,
            timed_out: false,
            objective_trace: Vec::new(),
        })
    }
}

/// `(1/N) Σ loss(yₙ, [clip] f(xₙ)) + λ‖f‖²`.
pub fn regularized_empirical_risk(
    model: &SvmModel,
    gram: &GramMatrix,
    labels: &[i8],
    lambda: f64,
    loss: Loss,
    clipped: bool,
) -> Result<f64> {
    if labels.len() != gram.n() || model.n() != gram.n() {
        return Err(Error::input("model, Gram matrix and labels disagree in size"));
    }
    let f = model.training_decisions(gram);
    let mut total = 0.0;
    for (&y, &t) in labels.iter().zip(&f) {
        let t = if clipped { clip(t, model.clip_bound) } else { t };
        total += loss.eval(y, t)?;
    }
    Ok(total / labels.len() as f64 + lambda * model.rkhs_norm_sq(gram))
}

/// Largest projected-gradient magnitude of the dual objective over the box.
pub fn kkt_residual(model: &SvmModel, gram: &GramMatrix, labels: &[i8]) -> Result<f64> {
    let y: Vec<f64> = labels.iter().map(|&l| check_label(l)).collect::<Result<_>>()?;
    let grad = dual_gradient(gram.matrix(), &y, &model.dual_coefs);
    Ok(projected_residual(&model.dual_coefs, &grad, model.box_c))
}
