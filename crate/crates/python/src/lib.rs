//! Python bindings: kernels, embeddings, the bag SVM, synthetic data and the
//! experiment runners.

use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use serde::Deserialize;
use serde_json::json;

use tsk_core::bounds::{make_schedule, oracle_rhs, OracleTerms, ScheduleParams};
use tsk_core::experiments::{run_rate_experiment, ExperimentConfig};
use tsk_core::kme::{self, SampleSet};
use tsk_core::svm::{SavedModel, TrainOptions};
use tsk_core::synth;
use tsk_core::{Error, HolderModulus};

create_exception!(tsk, InputError, PyValueError);
create_exception!(tsk, NumericalError, PyArithmeticError);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) => NumericalError::new_err(e.to_string()),
        _ => InputError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for tsk_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn from_json<T: for<'de> Deserialize<'de>>(v: serde_json::Value) -> PyResult<T> {
    serde_json::from_value(v).map_err(|e| InputError::new_err(e.to_string()))
}

fn samples(rows: Vec<Vec<f64>>) -> PyResult<SampleSet> {
    SampleSet::from_rows(&rows).py()
}

#[pyclass(frozen, skip_from_py_object, module = "tsk")]
#[derive(Clone)]
struct BaseKernel(tsk_core::BaseKernel);

#[pymethods]
impl BaseKernel {
    /// `family` is "gaussian" or "laplacian".
    #[new]
    fn new(family: &str, width: f64, dim: usize) -> PyResult<Self> {
        from_json(json!({"family": family, "width": width, "dim": dim})).map(BaseKernel)
    }

    #[getter]
    fn width(&self) -> f64 {
        self.0.width
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim
    }

    fn __call__(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        self.0.eval(&x, &y).py()
    }

    fn __repr__(&self) -> String {
        format!("BaseKernel({:?}, width={}, dim={})", self.0.family, self.0.width, self.0.dim)
    }
}

#[pyclass(frozen, skip_from_py_object, module = "tsk")]
#[derive(Clone)]
struct HilbertKernel(tsk_core::HilbertKernel);

#[pymethods]
impl HilbertKernel {
    /// `family` is "gaussian" (needs `width`) or "linear".
    #[new]
    #[pyo3(signature = (family, width=None))]
    fn new(family: &str, width: Option<f64>) -> PyResult<Self> {
        from_json(json!({"family": family, "width": width})).map(HilbertKernel)
    }

    #[getter]
    fn width(&self) -> Option<f64> {
        self.0.width
    }

    /// Kernel value from the three embedding inner products.
    fn eval_from_inners(&self, aa: f64, ab: f64, bb: f64) -> PyResult<f64> {
        self.0.eval_from_inners(aa, ab, bb).py()
    }
}

#[pyclass(frozen, skip_from_py_object, module = "tsk")]
#[derive(Clone)]
struct Embedding(kme::EmpiricalEmbedding);

#[pymethods]
impl Embedding {
    /// Exact embedding of N(mean, spread²·I) under a Gaussian base kernel.
    #[staticmethod]
    fn exact_gaussian(kernel: &BaseKernel, mean: Vec<f64>, spread: f64) -> PyResult<Self> {
        kme::EmpiricalEmbedding::exact_gaussian(&kernel.0, &mean, spread).py().map(Embedding)
    }

    fn inner(&self, other: &Embedding) -> PyResult<f64> {
        kme::inner(&self.0, &other.0).py()
    }

    fn distance(&self, other: &Embedding) -> PyResult<f64> {
        kme::rkhs_distance(&self.0, &other.0).py()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Empirical mean embedding of a bag (rows are samples).
#[pyfunction]
fn embed(kernel: &BaseKernel, bag: Vec<Vec<f64>>) -> PyResult<Embedding> {
    kme::embed(&kernel.0, &samples(bag)?).py().map(Embedding)
}

/// Deviation bound for a single bag of size `bag_size` at confidence `1 − δ`.
#[pyfunction]
#[pyo3(signature = (bag_size, delta, kernel_sup=1.0))]
fn concentration_bound(bag_size: usize, delta: f64, kernel_sup: f64) -> PyResult<f64> {
    kme::concentration_bound(bag_size, delta, kernel_sup).py()
}

#[pyfunction]
fn gaussian_family_kme_inner(mean: Vec<f64>, spread: f64, other_mean: Vec<f64>, other_spread: f64, kernel: &BaseKernel) -> PyResult<f64> {
    kme::gaussian_family_kme_inner(&mean, spread, &other_mean, other_spread, &kernel.0).py()
}

#[pyclass(frozen, module = "tsk")]
struct SvmModel(tsk_core::SvmModel);

#[pymethods]
impl SvmModel {
    /// Embeds each bag with `base`, then trains at regularization `lam`.
    #[staticmethod]
    #[pyo3(signature = (bags, labels, base, hilbert, lam, tol=1e-8, max_sweeps=10_000))]
    fn fit(
        py: Python<'_>,
        bags: Vec<Vec<Vec<f64>>>,
        labels: Vec<i8>,
        base: &BaseKernel,
        hilbert: &HilbertKernel,
        lam: f64,
        tol: f64,
        max_sweeps: usize,
    ) -> PyResult<Self> {
        let sets = bags.into_iter().map(samples).collect::<PyResult<Vec<_>>>()?;
        let (base, hilbert) = (base.0, hilbert.0);
        py.detach(|| {
            let support = sets.iter().map(|s| kme::embed(&base, s)).collect::<tsk_core::Result<Vec<_>>>()?;
            let opts = TrainOptions { tol, max_sweeps, ..TrainOptions::default() };
            tsk_core::SvmModel::fit(support, &labels, &hilbert, lam, &opts)
        })
        .py()
        .map(SvmModel)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let saved: SavedModel = serde_json::from_str(text).map_err(|e| InputError::new_err(e.to_string()))?;
        saved.into_model().py().map(SvmModel)
    }

    fn to_json(&self) -> PyResult<String> {
        let saved = self.0.to_saved().py()?;
        serde_json::to_string(&saved).map_err(|e| InputError::new_err(e.to_string()))
    }

    fn decision_value(&self, bag: Vec<Vec<f64>>) -> PyResult<f64> {
        let base = *self.0.support.first().ok_or_else(|| InputError::new_err("empty model"))?.kernel();
        self.0.decision_value(&kme::embed(&base, &samples(bag)?).py()?).py()
    }

    fn predict(&self, bag: Vec<Vec<f64>>) -> PyResult<i8> {
        self.0.predict(&samples(bag)?).py()
    }

    #[getter]
    fn dual_coefs(&self) -> Vec<f64> {
        self.0.dual_coefs.clone()
    }

    #[getter]
    fn kkt_residual(&self) -> f64 {
        self.0.kkt_residual
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }
}

#[pyclass(frozen, skip_from_py_object, module = "tsk")]
#[derive(Clone)]
struct MetaDistribution(tsk_core::MetaDistribution);

#[pymethods]
impl MetaDistribution {
    /// `family` is "hard_margin" or "gaussian_overlap".
    #[new]
    #[pyo3(signature = (family, dim, c, s, sigma, p_plus=0.5, r=0.0))]
    fn new(family: &str, dim: usize, c: f64, s: f64, sigma: f64, p_plus: f64, r: f64) -> PyResult<Self> {
        from_json(json!({"family": family, "dim": dim, "c": c, "s": s, "sigma": sigma, "p_plus": p_plus, "r": r}))
            .map(MetaDistribution)
    }

    /// `n` labeled bags of `m` samples: a list of `(label, rows)`.
    fn sample(&self, n: usize, m: usize, seed: u64) -> PyResult<Vec<(i8, Vec<Vec<f64>>)>> {
        let bags = synth::sample_bags(&self.0, n, m, seed).py()?;
        Ok(bags.into_iter().map(|b| (b.label, b.samples.to_rows())).collect())
    }

    /// Monte Carlo Bayes 0-1 risk and its standard error.
    fn bayes_risk(&self, draws: usize, seed: u64) -> PyResult<(f64, f64)> {
        let e = synth::bayes_risk(&self.0, draws, seed).py()?;
        Ok((e.value, e.std_error))
    }
}

/// `(λ_N, M_N, γ_N)` per N. `kind` is "thm45" or "thm55".
#[pyfunction]
#[pyo3(signature = (kind, n_grid, alpha=1.0, beta=1.0, mu=0.25))]
fn schedule(kind: &str, n_grid: Vec<usize>, alpha: f64, beta: f64, mu: f64) -> PyResult<Vec<(f64, usize, Option<f64>)>> {
    let params: ScheduleParams = from_json(json!({"kind": kind, "alpha": alpha, "beta": beta, "mu": mu}))?;
    let s = make_schedule(params, &n_grid).py()?;
    Ok(s.rows.iter().map(|r| (r.lambda, r.bag_size, r.gamma)).collect())
}

/// Right-hand side of the oracle inequality for the hinge loss, with bag
/// size `bag_size` for all `n` training bags and a Hölder modulus `C s^a`.
#[pyfunction]
#[pyo3(signature = (n, lam, bag_size, approx_error, modulus_c, modulus_exp=1.0, tau=1.0, universal_c=100.0, gap=0.0))]
#[allow(clippy::too_many_arguments)]
fn oracle_bound(
    n: usize,
    lam: f64,
    bag_size: usize,
    approx_error: f64,
    modulus_c: f64,
    modulus_exp: f64,
    tau: f64,
    universal_c: f64,
    gap: f64,
) -> PyResult<f64> {
    let modulus = HolderModulus::new(modulus_c, modulus_exp).py()?;
    let mut terms = OracleTerms::hinge(universal_c, tau, lam, vec![bag_size; n], approx_error, modulus);
    terms.gap = gap;
    Ok(oracle_rhs(&terms).py()?.total)
}

/// Runs a learning-rate sweep from a JSON config; returns `(csv, summary_json)`.
#[pyfunction]
fn run_rates(py: Python<'_>, config_json: &str) -> PyResult<(String, String)> {
    let cfg: ExperimentConfig = serde_json::from_str(config_json).map_err(|e| InputError::new_err(e.to_string()))?;
    let report = py.detach(|| run_rate_experiment(&cfg)).py()?;
    let summary = serde_json::to_string(&report.summary).map_err(|e| InputError::new_err(e.to_string()))?;
    Ok((report.to_csv().py()?, summary))
}

#[pymodule]
fn tsk(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("InputError", m.py().get_type::<InputError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<BaseKernel>()?;
    m.add_class::<HilbertKernel>()?;
    m.add_class::<Embedding>()?;
    m.add_class::<SvmModel>()?;
    m.add_class::<MetaDistribution>()?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(concentration_bound, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_family_kme_inner, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_bound, m)?)?;
    m.add_function(wrap_pyfunction!(run_rates, m)?)?;
    Ok(())
}
