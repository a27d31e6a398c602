use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tsk_core::experiments::{
    emit, load_bags, read_json, run_approx_error, run_kme_coverage, run_noise_exponent, run_rate_experiment,
    run_whitenoise_verify, to_json_pretty, write_text, ApproxErrorRunConfig, CoverageConfig, ExperimentConfig,
    NoiseExponentConfig, SvmOptions,
};
use tsk_core::kme::{embed, write_dataset, LabeledBag};
use tsk_core::svm::{clip, sgn, SavedModel, SvmModel};
use tsk_core::synth::sample_bags;
use tsk_core::{BaseKernel, Error, HilbertKernel, MetaDistribution, Result};

/// Classification of distributions from sample bags, and the verification
/// harness around it.
#[derive(Parser)]
#[command(name = "tsk", version)]
struct Cli {
    /// Worker threads; overrides TSK_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learning-rate sweep: CSV rows per (N, replicate) and a JSON summary.
    Rates(RatesArgs),
    /// Violation rates of the single-bag embedding deviation bound.
    KmeCoverage(CoverageArgs),
    /// Monte Carlo checks of the Gaussian-measure identities.
    WhitenoiseVerify(WhiteNoiseArgs),
    /// Geometric-noise integrals and their power-law fit.
    NoiseExponent(ConfigArgs),
    /// Approximation-error estimates, optionally checked against a noise fit.
    ApproxError(ConfigArgs),
    /// Train an SVM on labeled bags and save the model.
    Train(TrainArgs),
    /// Predict labels of bags with a saved model.
    Predict(PredictArgs),
    /// Draw a two-stage data set from a meta-distribution.
    Sample(SampleArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RatesArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV path; falls back to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the JSON summary here.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct CoverageArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    /// Standard deviation per coordinate of the sampled Gaussian.
    #[arg(long)]
    spread: Option<f64>,
    /// Width of the Gaussian base kernel.
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WhiteNoiseArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Random instances per identity.
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Labeled bags, `[{"label": 1, "samples": [[...], ...]}, ...]`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Meta-distribution JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct WhiteNoiseFile {
    dim: Option<usize>,
    gamma: Option<f64>,
    mc: Option<usize>,
    seed: Option<u64>,
    cases: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    base_kernel: BaseKernel,
    hilbert_kernel: HilbertKernel,
    lambda: Option<f64>,
    #[serde(default)]
    svm: SvmOptions,
}

#[derive(Serialize)]
struct Prediction {
    label: i8,
    decision_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_label: Option<i8>,
}

#[derive(Serialize)]
struct PredictionReport {
    predictions: Vec<Prediction>,
    accuracy: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("TSK_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::input(format!("TSK_THREADS must be a positive integer, got {v:?}"))),
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::input("thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::input(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Rates(a) => rates(a),
        Command::KmeCoverage(a) => coverage(a),
        Command::WhitenoiseVerify(a) => whitenoise(a),
        Command::NoiseExponent(a) => {
            let mut cfg: NoiseExponentConfig = read_json(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            emit(a.out.as_deref(), &to_json_pretty(&run_noise_exponent(&cfg)?)?)
        }
        Command::ApproxError(a) => {
            let mut cfg: ApproxErrorRunConfig = read_json(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            emit(a.out.as_deref(), &to_json_pretty(&run_approx_error(&cfg)?)?)
        }
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Sample(a) => {
            let meta: MetaDistribution = read_json(&a.config)?;
            let bags: Vec<LabeledBag> = sample_bags(&meta, a.n, a.m, a.seed)?.iter().map(|b| b.to_labeled()).collect();
            match a.out {
                Some(p) => write_dataset(&p, &bags),
                None => emit(None, &(serde_json::to_string(&bags)? + "\n")),
            }
        }
    }
}

fn rates(a: RatesArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = read_json(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = a.out.or_else(|| cfg.output.as_ref().map(PathBuf::from));
    let report = run_rate_experiment(&cfg)?;
    let csv = report.to_csv()?;
    let summary = to_json_pretty(&report.summary)?;
    match out {
        Some(p) => write_text(&p, &csv)?,
        None => emit(None, &csv)?,
    }
    if let Some(p) = a.summary {
        write_text(&p, &summary)?;
    }
    emit(None, &summary)
}

fn coverage(a: CoverageArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<CoverageConfig>(p)?,
        None => {
            let dim = a.dim.unwrap_or(2);
            CoverageConfig {
                base_kernel: BaseKernel::gaussian(1.0, dim)?,
                mean: None,
                spread: 0.5,
                bag_sizes: vec![25, 100],
                deltas: vec![0.05, 0.1],
                replicates: 2000,
                seed: 0,
            }
        }
    };
    if a.dim.is_some() || a.width.is_some() {
        let dim = a.dim.unwrap_or(cfg.base_kernel.dim);
        cfg.base_kernel = BaseKernel::new(cfg.base_kernel.family, a.width.unwrap_or(cfg.base_kernel.width), dim)?;
        if cfg.mean.as_ref().is_some_and(|m| m.len() != dim) {
            return Err(Error::input("configured mean does not match --dim"));
        }
    }
    if let Some(s) = a.spread {
        cfg.spread = s;
    }
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    emit(a.out.as_deref(), &to_json_pretty(&run_kme_coverage(&cfg)?)?)
}

fn whitenoise(a: WhiteNoiseArgs) -> Result<()> {
    let file: WhiteNoiseFile = match &a.config {
        Some(p) => read_json(p)?,
        None => WhiteNoiseFile::default(),
    };
    let dim = a.dim.or(file.dim).unwrap_or(5);
    let gamma = a.gamma.or(file.gamma).unwrap_or(1.0);
    let mc = a.mc.or(file.mc).unwrap_or(200_000);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let cases = a.cases.or(file.cases).unwrap_or(5);
    emit(a.out.as_deref(), &to_json_pretty(&run_whitenoise_verify(dim, gamma, mc, seed, cases)?)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg: TrainConfig = read_json(&a.config)?;
    let lambda = a.lambda.or(cfg.lambda).ok_or_else(|| Error::input("λ missing: pass --lambda or set \"lambda\""))?;
    let bags = load_bags(&a.data)?;
    let support = bags.iter().map(|b| embed(&cfg.base_kernel, &b.sample_set()?)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<i8> = bags.iter().map(|b| b.label).collect();
    let model = SvmModel::fit(support, &labels, &cfg.hilbert_kernel, lambda, &cfg.svm.train_options()?)?;
    if !model.converged {
        eprintln!("warning: solver stopped at KKT residual {:e}", model.kkt_residual);
    }
    write_text(&a.out, &to_json_pretty(&model.to_saved()?)?)
}

fn predict(a: PredictArgs) -> Result<()> {
    let saved: SavedModel = read_json(&a.model)?;
    let model = saved.into_model()?;
    let base = *model.support[0].kernel();
    let bags = load_bags(&a.data)?;
    let mut predictions = Vec::with_capacity(bags.len());
    let mut correct = 0usize;
    for b in &bags {
        let f = model.decision_value(&embed(&base, &b.sample_set()?)?)?;
        let label = sgn(clip(f, model.clip_bound));
        correct += usize::from(label == b.label);
        predictions.push(Prediction { label, decision_value: f, true_label: Some(b.label) });
    }
    let report = PredictionReport { accuracy: correct as f64 / bags.len() as f64, predictions };
    emit(a.out.as_deref(), &to_json_pretty(&report)?)
}
