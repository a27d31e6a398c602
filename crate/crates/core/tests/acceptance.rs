//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails. `TSK_ACCEPTANCE_ONLY=1,5,8` restricts the run.

use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use tsk_core::experiments::{
    random_covariance, read_json, run_approx_error, run_kme_coverage, run_rate_experiment, ApproxErrorRunConfig,
    CoverageConfig, ExperimentConfig, RateReport,
};
use tsk_core::rng::{tag, StreamRng};
use tsk_core::svm::{kkt_residual, regularized_empirical_risk, train, Loss, TrainOptions};
use tsk_core::whitenoise::{
    canonical_surjection_eval, characteristic_identity_check, feature_inner_mc, feature_map,
    white_noise_isometry_check, CheckReport,
};
use tsk_core::{BaseKernel, GramMatrix, Result};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn normals(rng: &mut StreamRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn random_psd(n: usize, rank: usize, seed: u64) -> GramMatrix {
    let mut rng = StreamRng::new(seed, tag::AUX, 11);
    let b = DMatrix::from_fn(n, rank, |_, _| rng.normal());
    let k = &b * b.transpose() / rank as f64;
    GramMatrix::new((&k + k.transpose()) * 0.5).expect("valid Gram matrix")
}

fn random_labels(n: usize, seed: u64) -> Vec<i8> {
    let mut rng = StreamRng::new(seed, tag::AUX, 12);
    (0..n).map(|_| if rng.uniform() < 0.5 { 1 } else { -1 }).collect()
}

// ---------------------------------------------------------------------------
// 1. Embedding concentration coverage

fn kme_coverage() -> Result<Outcome> {
    let cfg = CoverageConfig {
        base_kernel: BaseKernel::gaussian(1.0, 2)?,
        mean: Some(vec![0.0, 0.0]),
        spread: 0.5,
        bag_sizes: vec![25, 100],
        deltas: vec![0.05, 0.1],
        replicates: 2000,
        seed: 20,
    };
    let report = run_kme_coverage(&cfg)?;
    let pass = report.cells.iter().all(|c| c.violation_rate < c.delta);
    let cells: Vec<String> =
        report.cells.iter().map(|c| format!("M={} δ={}: {:.4}", c.bag_size, c.delta, c.violation_rate)).collect();
    outcome(pass, cells.join(", "))
}

// ---------------------------------------------------------------------------
// 2. Dual solver against brute-force oracles

/// Projected gradient ascent run to stagnation.
fn projected_gradient_dual(gram: &GramMatrix, labels: &[i8], lambda: f64) -> f64 {
    let n = gram.n();
    let c = 1.0 / (2.0 * lambda * n as f64);
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let h = DMatrix::from_fn(n, n, |i, j| y[i] * y[j] * gram.get(i, j));
    let step = 1.0 / (h.clone().symmetric_eigen().eigenvalues.max() + 1e-12);
    let objective = |a: &nalgebra::DVector<f64>| a.sum() - 0.5 * a.dot(&(&h * a));
    let mut a = nalgebra::DVector::zeros(n);
    let mut prev = f64::NEG_INFINITY;
    for it in 0..2_000_000 {
        let g = nalgebra::DVector::from_element(n, 1.0) - &h * &a;
        a += g * step;
        a.apply(|v| *v = v.clamp(0.0, c));
        if it % 1000 == 999 {
            let obj = objective(&a);
            if (obj - prev).abs() < 1e-15 * (1.0 + obj.abs()) {
                break;
            }
            prev = obj;
        }
    }
    objective(&a)
}

/// Regularized hinge risk of `f = Φw` with `ΦΦᵀ = K`.
fn primal_in_features(phi: &DMatrix<f64>, labels: &[i8], lambda: f64, w: &[f64]) -> f64 {
    let n = phi.nrows();
    let risk: f64 = (0..n)
        .map(|i| {
            let fi: f64 = (0..phi.ncols()).map(|k| phi[(i, k)] * w[k]).sum();
            (1.0 - labels[i] as f64 * fi).max(0.0)
        })
        .sum();
    risk / n as f64 + lambda * w.iter().map(|v| v * v).sum::<f64>()
}

/// Exact primal minimum: enumerate which points sit on the margin and which
/// pay loss, solve each equality-constrained quadratic, keep the best.
fn primal_exact(gram: &GramMatrix, labels: &[i8], lambda: f64) -> f64 {
    let n = gram.n();
    let eig = gram.matrix().clone().symmetric_eigen();
    let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 1e-14).collect();
    let phi = DMatrix::from_fn(n, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])] * eig.eigenvalues[keep[j]].sqrt());
    let mut best = primal_in_features(&phi, labels, lambda, &vec![0.0; keep.len()]);
    for code in 0..3usize.pow(n as u32) {
        let state: Vec<usize> = (0..n).map(|i| code / 3usize.pow(i as u32) % 3).collect();
        let mut w = nalgebra::DVector::zeros(keep.len());
        for i in (0..n).filter(|&i| state[i] == 1) {
            w += phi.row(i).transpose() * (labels[i] as f64 / (2.0 * lambda * n as f64));
        }
        let margin: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        if !margin.is_empty() {
            let pe = phi.select_rows(&margin);
            let target = nalgebra::DVector::from_iterator(margin.len(), margin.iter().map(|&i| labels[i] as f64));
            let rhs = target - &pe * &w;
            let Ok(pinv) = (&pe * pe.transpose()).pseudo_inverse(1e-13) else { continue };
            w += pe.transpose() * (pinv * rhs);
        }
        best = best.min(primal_in_features(&phi, labels, lambda, w.as_slice()));
    }
    best
}

fn svm_dual_correctness() -> Result<Outcome> {
    let mut worst_dual = 0.0f64;
    let mut worst_kkt = 0.0f64;
    let mut worst_primal = 0.0f64;
    let opts = TrainOptions::default();
    for inst in 0..200u64 {
        let n = 1 + (inst % 6) as usize;
        let rank = 1 + (inst / 6 % n as u64) as usize;
        let gram = random_psd(n, rank, 7000 + inst);
        let labels = random_labels(n, 7000 + inst);
        let lambda = [0.01, 0.1, 1.0][(inst / 2 % 3) as usize];
        let model = train(&gram, &labels, lambda, &opts)?;
        worst_dual = worst_dual.max((model.dual_objective(&gram) - projected_gradient_dual(&gram, &labels, lambda)).abs());
        worst_kkt = worst_kkt.max(kkt_residual(&model, &gram, &labels)?);
        if n <= 3 {
            let primal = regularized_empirical_risk(&model, &gram, &labels, lambda, Loss::Hinge, false)?;
            worst_primal = worst_primal.max((primal - primal_exact(&gram, &labels, lambda)).abs());
        }
    }
    outcome(
        worst_dual <= 1e-6 && worst_kkt <= 1e-6 && worst_primal <= 1e-5,
        format!("max |dual − oracle| {worst_dual:.2e}, max KKT residual {worst_kkt:.2e}, max |primal − exact| {worst_primal:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Analytic fixtures

fn analytic_fixtures() -> Result<Outcome> {
    let opts = TrainOptions::default();
    let g1 = GramMatrix::from_rows(&[vec![1.0]])?;
    let m1 = train(&g1, &[1], 1.0, &opts)?;
    let r1 = regularized_empirical_risk(&m1, &g1, &[1], 1.0, Loss::Hinge, false)?;
    let g2 = GramMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let m2 = train(&g2, &[1, -1], 0.25, &opts)?;
    let r2 = regularized_empirical_risk(&m2, &g2, &[1, -1], 0.25, Loss::Hinge, false)?;
    outcome((r1 - 0.75).abs() <= 1e-10 && (r2 - 0.5).abs() <= 1e-10, format!("N=1: {r1:.12}, N=2: {r2:.12}"))
}

// ---------------------------------------------------------------------------
// 4. Clipping never increases the regularized hinge risk

fn clippability() -> Result<Outcome> {
    let mut violations = 0;
    let mut clipped_strictly = 0;
    for inst in 0..100u64 {
        let n = 5 + (inst % 30) as usize;
        let gram = random_psd(n, 1 + (inst as usize % n), 9000 + inst);
        // Scale up so trained decision values leave [−1, 1] often.
        let gram = GramMatrix::new(gram.matrix() * (1.0 + (inst % 7) as f64))?;
        let labels = random_labels(n, 9000 + inst);
        let lambda = 10f64.powf(-3.0 + 3.0 * (inst % 10) as f64 / 9.0);
        let model = train(&gram, &labels, lambda, &TrainOptions::default())?;
        let plain = regularized_empirical_risk(&model, &gram, &labels, lambda, Loss::Hinge, false)?;
        let clipped = regularized_empirical_risk(&model, &gram, &labels, lambda, Loss::Hinge, true)?;
        if clipped > plain {
            violations += 1;
        }
        if clipped < plain {
            clipped_strictly += 1;
        }
    }
    outcome(violations == 0, format!("{violations}/100 violations ({clipped_strictly} models changed by clipping)"))
}

// ---------------------------------------------------------------------------
// 5. Gaussian-kernel feature space by Monte Carlo

fn feature_space_mc() -> Result<Outcome> {
    let dim = 5;
    let gamma = 1.0;
    let n_mc = 200_000;
    let mut details = Vec::new();
    let mut pass = true;
    for qi in 0..2u64 {
        let q = random_covariance(dim, 50, qi)?;
        let mut rng = StreamRng::new(50, tag::AUX, 100 + qi);
        let mut inner_ok = 0;
        for p in 0..25u64 {
            let x = normals(&mut rng, dim, 0.4);
            let x2 = normals(&mut rng, dim, 0.4);
            if feature_inner_mc(&x, &x2, gamma, &q, n_mc, 1000 * qi + p)?.pass {
                inner_ok += 1;
            }
        }
        let mut surj_ok = 0;
        for p in 0..10u64 {
            let x = normals(&mut rng, dim, 0.4);
            let x2 = normals(&mut rng, dim, 0.4);
            let est = canonical_surjection_eval(feature_map(&x2, gamma, &q)?, &x, gamma, &q, n_mc, 5000 + 1000 * qi + p)?;
            let target = (-tsk_core::base_kernels::squared_distance(&x, &x2) / (gamma * gamma)).exp();
            if CheckReport::new(est, target).pass {
                surj_ok += 1;
            }
        }
        pass &= inner_ok >= 24 && surj_ok == 10;
        details.push(format!("Q{qi}: inner {inner_ok}/25, reproducing {surj_ok}/10"));
    }
    outcome(pass, details.join("; "))
}

// ---------------------------------------------------------------------------
// 6. White-noise identities

fn white_noise_identities() -> Result<Outcome> {
    let dim = 5;
    let n_mc = 100_000;
    let mut iso_ok = 0;
    let mut char_ok = 0;
    for case in 0..20u64 {
        let q = random_covariance(dim, 60, case)?;
        let mut rng = StreamRng::new(60, tag::AUX, 200 + case);
        let h1 = normals(&mut rng, dim, 1.0);
        let h2 = normals(&mut rng, dim, 1.0);
        let lambda = 0.25 + 1.5 * rng.uniform();
        if white_noise_isometry_check(&h1, &h2, &q, n_mc, 10 * case)?.pass {
            iso_ok += 1;
        }
        if characteristic_identity_check(&h1, lambda, &q, n_mc, 10 * case + 1)?.pass {
            char_ok += 1;
        }
    }
    outcome(iso_ok == 20 && char_ok == 20, format!("isometry {iso_ok}/20, characteristic {char_ok}/20"))
}

// ---------------------------------------------------------------------------
// 7. Geometric noise exponent → approximation-error bound

fn geometric_noise_pipeline() -> Result<Outcome> {
    let cfg: ApproxErrorRunConfig = read_json(&config_path("reference_geometric.json"))?;
    let report = run_approx_error(&cfg)?;
    let fit = report.noise_fit.as_ref().expect("geometric check configured");
    let failed: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("γ={} λ={}: Â={:.4} > {:.4}", c.gamma, c.lambda, c.a_hat, c.bound))
        .collect();
    outcome(
        report.checks.len() == 6 && report.pass,
        format!(
            "Ĉ_Q={:.4} α̂_Q={:.4}, {}/{} checks hold{}",
            fit.c_hat,
            fit.alpha_hat,
            report.checks.len() - failed.len(),
            report.checks.len(),
            if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 8–9. Learning curve and oracle monitoring share one sweep

fn reference_sweep() -> &'static Result<(RateReport, Duration)> {
    static SWEEP: OnceLock<Result<(RateReport, Duration)>> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let cfg: ExperimentConfig = read_json(&config_path("reference_rates.json"))?;
        let start = Instant::now();
        let report = run_rate_experiment(&cfg)?;
        Ok((report, start.elapsed()))
    })
}

fn learning_curve() -> Result<Outcome> {
    let (report, took) = match reference_sweep() {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let s = &report.summary;
    let medians: Vec<String> = s.grid.iter().map(|g| format!("{:.4}", g.median_excess_01)).collect();
    outcome(
        s.failed_rows == 0 && s.monotone && s.final_median_excess_01 <= 0.05 && s.slope <= -0.25 && *took < Duration::from_secs(1800),
        format!(
            "medians [{}], slope {:.3}, monotone {}, final {:.4}, sweep {:.0}s",
            medians.join(", "),
            s.slope,
            s.monotone,
            s.final_median_excess_01,
            took.as_secs_f64()
        ),
    )
}

fn oracle_monitoring() -> Result<Outcome> {
    let (report, _) = match reference_sweep() {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let ok: Vec<_> = report.rows.iter().filter(|r| r.ok()).collect();
    let n = ok.len() as f64;
    let rate = ok.iter().filter(|r| r.oracle_violated).count() as f64 / n;
    // 4e^{-1} exceeds 1; the tighter 0.536 is used as the allowance.
    let allowed = 0.536f64.min(4.0 * (-1.0f64).exp());
    let se = (allowed * (1.0 - allowed) / n).sqrt();
    outcome(n > 0.0 && rate <= allowed + 2.0 * se, format!("violation rate {rate:.4} over {n} rows (limit {:.4})", allowed + 2.0 * se))
}

// ---------------------------------------------------------------------------
// 10. Determinism of every subcommand

fn run_cli(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tsk")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| tsk_core::Error::input(e.to_string()))?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let write = |name: &str, text: &str| std::fs::write(dir.path().join(name), text).expect("write temp file");
    write(
        "rates.json",
        r#"{"meta": {"family": "hard_margin", "dim": 1, "c": 1.0, "s": 1.0, "sigma": 0.25, "p_plus": 0.3, "r": 0.02},
            "base_kernel": {"family": "gaussian", "width": 2.0, "dim": 1},
            "hilbert_kernel": {"family": "gaussian", "width": 1.0},
            "schedule": {"kind": "thm55"}, "n_grid": [8, 16, 32, 64], "replicates": 2, "test_bags": 300}"#,
    );
    write(
        "coverage.json",
        r#"{"base_kernel": {"family": "gaussian", "width": 1.0, "dim": 2}, "spread": 0.5, "replicates": 200}"#,
    );
    write(
        "noise.json",
        r#"{"meta": {"family": "hard_margin", "dim": 2, "c": 1.0, "s": 1.0, "sigma": 0.25, "p_plus": 0.3, "r": 0.02},
            "covariance_eigenvalues": [1.0, 0.5], "t_grid": [1.0, 0.5, 0.25, 0.125], "t_bar": 1.5,
            "n_outer": 200, "n_inner": 200}"#,
    );
    write(
        "approx.json",
        r#"{"meta": {"family": "hard_margin", "dim": 2, "c": 1.0, "s": 1.0, "sigma": 0.25, "p_plus": 0.3, "r": 0.02},
            "hilbert_kernel": {"family": "gaussian", "width": 1.0}, "lambda_grid": [0.01, 0.1, 1.0],
            "big_n": 60, "test_pairs": 200, "seeds": 2}"#,
    );
    write("meta.json", r#"{"family": "hard_margin", "dim": 2, "c": 2.0, "s": 0.25, "sigma": 0.5, "p_plus": 0.5, "r": 1.0}"#);
    write(
        "train.json",
        r#"{"base_kernel": {"family": "gaussian", "width": 1.0, "dim": 2},
            "hilbert_kernel": {"family": "gaussian", "width": 1.0}, "lambda": 0.05}"#,
    );
    let (rates, coverage, noise, approx) = (p("rates.json"), p("coverage.json"), p("noise.json"), p("approx.json"));
    let (meta, train_cfg, bags, model) = (p("meta.json"), p("train.json"), p("bags.json"), p("model.json"));
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("rates", vec!["rates".into(), "--config".into(), rates, "--seed".into(), "42".into()]),
        ("kme-coverage", vec!["kme-coverage".into(), "--config".into(), coverage, "--seed".into(), "3".into()]),
        (
            "whitenoise-verify",
            ["whitenoise-verify", "--dim", "3", "--gamma", "1.0", "--mc", "5000", "--seed", "7", "--cases", "2"]
                .map(String::from)
                .to_vec(),
        ),
        ("noise-exponent", vec!["noise-exponent".into(), "--config".into(), noise, "--seed".into(), "5".into()]),
        ("approx-error", vec!["approx-error".into(), "--config".into(), approx, "--seed".into(), "5".into()]),
    ];
    run_cli(&["sample", "--config", &meta, "--n", "20", "--m", "15", "--seed", "9", "--out", &bags])
        .map_err(tsk_core::Error::input)?;
    let mut identical = Vec::new();
    let mut differing = Vec::new();
    let mut compare = |name: &str, a: Vec<u8>, b: Vec<u8>| {
        if a == b && !a.is_empty() {
            identical.push(name.to_string());
        } else {
            differing.push(name.to_string());
        }
    };
    for (name, args) in &runs {
        let mut outputs = Vec::new();
        for k in 0..2 {
            let out = p(&format!("{name}.{k}.out"));
            let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
            a.extend(["--out", &out]);
            run_cli(&a).map_err(tsk_core::Error::input)?;
            outputs.push(std::fs::read(&out).unwrap_or_default());
        }
        let b = outputs.pop().unwrap_or_default();
        compare(name, outputs.pop().unwrap_or_default(), b);
    }
    let mut models = Vec::new();
    let mut predictions = Vec::new();
    for k in 0..2 {
        let m = format!("{model}.{k}");
        run_cli(&["train", "--config", &train_cfg, "--data", &bags, "--out", &m]).map_err(tsk_core::Error::input)?;
        models.push(std::fs::read(&m).unwrap_or_default());
        let out = p(&format!("predict.{k}.out"));
        run_cli(&["predict", "--model", &m, "--data", &bags, "--out", &out]).map_err(tsk_core::Error::input)?;
        predictions.push(std::fs::read(&out).unwrap_or_default());
    }
    compare("train", models[0].clone(), models[1].clone());
    compare("predict", predictions[0].clone(), predictions[1].clone());
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} subcommands byte-identical on rerun", identical.len())
        } else {
            format!("outputs differ for {}", differing.join(", "))
        },
    )
}

type Criterion = fn() -> Result<Outcome>;

fn main() -> ExitCode {
    let criteria: [(usize, &str, Criterion, u64); 10] = [
        (1, "embedding concentration coverage", kme_coverage, 120),
        (2, "SVM dual correctness", svm_dual_correctness, 60),
        (3, "analytic fixtures", analytic_fixtures, 60),
        (4, "clippability", clippability, 60),
        (5, "feature-space Monte Carlo", feature_space_mc, 120),
        (6, "white-noise identities", white_noise_identities, 600),
        (7, "geometric-noise pipeline", geometric_noise_pipeline, 600),
        (8, "learning curve", learning_curve, 1800),
        (9, "oracle-inequality monitoring", oracle_monitoring, 1800),
        (10, "determinism", determinism, 600),
    ];
    let only: Option<Vec<usize>> = std::env::var("TSK_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failures = 0;
    for (id, name, run, limit) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            // Criterion 9 reuses the sweep timed under criterion 8.
            Ok(o) => (o.pass && (id == 9 || secs < limit as f64), o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!("criterion {id:>2} {}: {name} — {detail} [{secs:.1}s, limit {limit}s]", if pass { "PASS" } else { "FAIL" });
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
