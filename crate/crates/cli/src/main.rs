use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use fctn_core::bench::{run_bench, synthetic_problem, BenchConfig};
use fctn_core::io::{import_frames, read_mask, read_tensor, render_report, sample_mask, write_atomic, write_mask, write_tensor};
use fctn_core::metrics::QualityReport;
use fctn_core::regularizer::LaplacianSign;
use fctn_core::solver::{Algorithm, Extrapolation, Observation, RankPolicy, Solver, SolverConfig};
use fctn_core::FctnRank;

#[derive(Parser)]
#[command(name = "fctn", version, about = "Low-rank tensor completion with trace-regularized FCTN decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Complete a partially observed tensor.
    Complete(CompleteArgs),
    /// Time the baseline and accelerated solvers on a synthetic problem.
    Bench(BenchArgs),
    /// Compare an estimate against the ground truth.
    Metrics(MetricsArgs),
    /// Stack a directory of PGM/PPM frames into a height×width×channel×frame tensor.
    ImportFrames(ImportArgs),
    /// Write a synthetic low-rank tensor (and optionally a sampled mask).
    Synth(SynthArgs),
}

#[derive(Args)]
struct CompleteArgs {
    /// Observed tensor file.
    #[arg(long)]
    input: PathBuf,
    /// Observation mask file.
    #[arg(long, conflicts_with = "sr")]
    mask: Option<PathBuf>,
    /// Sample the observation mask at this rate instead of reading one.
    #[arg(long, required_unless_present = "mask")]
    sr: Option<f64>,
    /// Seed for mask sampling, factor initialization and update shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "afctnlr", value_parser = parse_algorithm)]
    algorithm: Algorithm,
    #[arg(long, default_value_t = 0.35)]
    lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, default_value_t = 0.1)]
    rho: f64,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Rank caps R_{i,j} for i<j as a comma list, or one value for all.
    #[arg(long, value_delimiter = ',', required = true)]
    max_rank: Vec<usize>,
    /// `fixed` starts at the caps; `increase` grows from all-ones.
    #[arg(long, default_value = "increase")]
    rank_policy: String,
    /// Factor extrapolation weights `alpha,beta`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    extrapolation: Option<Vec<f64>>,
    #[arg(long, default_value = "positive-definite", value_parser = parse_sign)]
    laplacian_sign: LaplacianSign,
    /// Keep the identity update order in the accelerated solver.
    #[arg(long)]
    no_shuffle: bool,
    /// Ground truth for the final quality summary.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    /// Reconstructed tensor file.
    #[arg(long)]
    output: PathBuf,
    /// Per-iteration CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Extents, e.g. `40,40,40,40`.
    #[arg(long, value_delimiter = ',', required = true)]
    shape: Vec<usize>,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 0.3)]
    sr: f64,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 5)]
    repeat: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    est: PathBuf,
    /// Observation mask; adds the relative error over unobserved entries.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    shape: Vec<usize>,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    /// Also write a mask sampled at `--sr`.
    #[arg(long, requires = "sr")]
    mask_output: Option<PathBuf>,
    #[arg(long)]
    sr: Option<f64>,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: fctn_core::Error| e.to_string())
}

fn parse_sign(s: &str) -> Result<LaplacianSign, String> {
    s.parse().map_err(|e: fctn_core::Error| e.to_string())
}

fn rank_table(order: usize, caps: &[usize]) -> fctn_core::Result<FctnRank> {
    match caps {
        [r] => FctnRank::uniform(order, *r),
        _ => FctnRank::new(order, caps.to_vec()),
    }
}

fn complete(args: CompleteArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let values = read_tensor(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let mask = match (&args.mask, args.sr) {
        (Some(p), _) => read_mask(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(sr)) => sample_mask(values.shape(), sr, args.seed)?,
        (None, None) => bail!("either --mask or --sr is required"),
    };
    let obs = Observation::new(values, mask)?;
    let n = obs.shape().len();

    let mut cfg = SolverConfig::new(rank_table(n, &args.max_rank)?);
    cfg.lambda = args.lambda;
    cfg.delta = args.delta;
    cfg.rho = args.rho;
    cfg.eps = args.eps;
    cfg.max_iters = args.max_iters;
    cfg.algorithm = args.algorithm;
    cfg.laplacian_sign = args.laplacian_sign;
    cfg.seed = args.seed;
    cfg.shuffle_updates = !args.no_shuffle;
    cfg.rank_policy = match args.rank_policy.as_str() {
        "fixed" => RankPolicy::Fixed,
        "increase" => RankPolicy::ThresholdIncrease { tau: None },
        other => bail!(fctn_core::Error::InvalidArgument(format!(
            "unknown rank policy {other:?} (expected fixed or increase)"
        ))),
    };
    cfg.extrapolation = args.extrapolation.as_deref().map(|v| Extrapolation { alpha: v[0], beta: v[1] });

    let mut solver = Solver::new(&obs, cfg.clone())?;
    solver.run_to_end()?;
    let outcome = solver.into_outcome();
    write_tensor(&args.output, &outcome.x).with_context(|| format!("writing {}", args.output.display()))?;

    let quality = match &args.truth {
        Some(p) => {
            let truth = read_tensor(p).with_context(|| format!("reading {}", p.display()))?;
            Some(QualityReport::compute(&truth, &outcome.x, Some(obs.mask()), args.peak)?)
        }
        None => None,
    };
    let last = outcome.trace.last();
    log::info!(
        "{} iterations, converged={}, final rel_change={:e}",
        outcome.trace.len(),
        outcome.converged,
        last.map_or(f64::NAN, |r| r.rel_change)
    );
    if let Some(path) = &args.report {
        let extrap = cfg
            .extrapolation
            .map_or_else(|| "off".to_string(), |e| format!("{};{}", e.alpha, e.beta));
        let rank: Vec<String> = cfg.max_rank.entries().iter().map(usize::to_string).collect();
        let echo: Vec<(String, String)> = [
            ("algorithm", cfg.algorithm.to_string()),
            ("shape", obs.shape().iter().map(usize::to_string).collect::<Vec<_>>().join(";")),
            ("observed", obs.mask().count().to_string()),
            ("lambda", cfg.lambda.to_string()),
            ("delta", cfg.delta.to_string()),
            ("rho", cfg.rho.to_string()),
            ("eps", cfg.eps.to_string()),
            ("max_iters", cfg.max_iters.to_string()),
            ("max_rank", rank.join(";")),
            ("rank_policy", args.rank_policy.clone()),
            ("laplacian_sign", cfg.laplacian_sign.to_string()),
            ("extrapolation", extrap),
            ("shuffle_updates", cfg.shuffle_updates.to_string()),
            ("seed", cfg.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let total_ms = start.elapsed().as_secs_f64() * 1e3;
        let csv = render_report(&echo, &outcome.trace, quality.as_ref(), outcome.converged, total_ms);
        write_atomic(path, csv.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn bench(args: BenchArgs) -> anyhow::Result<()> {
    let mut cfg = BenchConfig::new(args.shape, args.rank);
    cfg.sr = args.sr;
    cfg.iters = args.iters;
    cfg.repeat = args.repeat;
    cfg.seed = args.seed;
    let report = run_bench(&cfg)?;
    let csv = report.to_csv();
    match &args.output {
        Some(p) => write_atomic(p, csv.as_bytes()).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn metrics(args: MetricsArgs) -> anyhow::Result<()> {
    let read = |p: &Path| read_tensor(p).with_context(|| format!("reading {}", p.display()));
    let truth = read(&args.truth)?;
    let est = read(&args.est)?;
    let mask = match &args.mask {
        Some(p) => Some(read_mask(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let q = QualityReport::compute(&truth, &est, mask.as_ref(), args.peak)?;
    let off = q.rel_err_off_mask.map_or_else(|| "NaN".to_string(), |v| format!("{v:e}"));
    println!("psnr,ssim,rel_err,rel_err_off_mask");
    println!("{:e},{:e},{:e},{off}", q.psnr, q.ssim, q.rel_err);
    Ok(())
}

fn import(args: ImportArgs) -> anyhow::Result<()> {
    let t = import_frames(&args.dir)?;
    write_tensor(&args.output, &t).with_context(|| format!("writing {}", args.output.display()))?;
    log::info!("wrote tensor of shape {:?}", t.shape());
    Ok(())
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let (truth, obs) = synthetic_problem(&args.shape, args.rank, args.sr.unwrap_or(1.0), args.seed)?;
    write_tensor(&args.output, &truth).with_context(|| format!("writing {}", args.output.display()))?;
    if let Some(p) = &args.mask_output {
        write_mask(p, obs.mask()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<fctn_core::Error>() {
        Some(e) if e.is_numeric() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Ok(v) = std::env::var("FCTN_THREADS") {
        // every kernel runs on the calling thread, so any cap is already met
        log::debug!("FCTN_THREADS={v}");
    }
    let result = match cli.command {
        Command::Complete(a) => complete(a),
        Command::Bench(a) => bench(a),
        Command::Metrics(a) => metrics(a),
        Command::ImportFrames(a) => import(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
