//! Command-line driver: synthetic data generation, single optimizer runs
//! with CSV traces, the estimator-variance experiment, and multi-variant
//! convergence comparisons.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vrcg::data::{load_libsvm, maxmin_scale, synth_ridge, Dataset};
use vrcg::harness::{
    compare_convergence, emit_svg_lines, standard_variants, variance_experiment, write_report_files,
    CompareOptions, Series, SvgOptions, VarianceExperimentConfig,
};
use vrcg::model::RidgeObjective;
use vrcg::optimize::{
    run_alg1, run_alg2, Algorithm, EpochOption, GammaMode, RunConfig, RunResult,
};
use vrcg::search::WolfeParams;

#[derive(Parser)]
#[command(
    name = "vrcg",
    version,
    about = "Variance-reduced stochastic conjugate gradient experiments"
)]
struct Cli {
    /// Base RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for generated files (created if missing).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads for multi-run commands.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Flat key=value configuration file; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ridge instance and write it in LIBSVM format.
    Synth(SynthArgs),
    /// Run one optimizer configuration and write its trace as CSV.
    Train(TrainArgs),
    /// Estimator variance comparison across checkpoints (CSV + SVG).
    VarianceExp(VarianceArgs),
    /// Run all four variants over datasets and emit a comparison report.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Sample count.
    #[arg(long)]
    n: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Gaussian target noise standard deviation.
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Output file (defaults to `<out-dir>/synth.libsvm`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional file for the planted weight vector.
    #[arg(long)]
    weights_out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// LIBSVM dataset path.
    #[arg(long)]
    data: PathBuf,
    /// Expected feature dimension (indices beyond it are errors).
    #[arg(long)]
    expected_dim: Option<usize>,
    /// Feature scaling applied after loading.
    #[arg(long)]
    scale: Option<ScaleMode>,
}

#[derive(Args, Clone)]
struct WolfeArgs {
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    alpha_init: Option<f64>,
    #[arg(long)]
    alpha_max: Option<f64>,
    /// Line-search evaluation budget.
    #[arg(long)]
    ls_max_evals: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    algorithm: Option<AlgorithmArg>,
    /// Control-variate coefficient mode.
    #[arg(long)]
    gamma: Option<GammaArg>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Iteration count (table algorithm).
    #[arg(long)]
    iters: Option<usize>,
    /// Outer epochs (epoch algorithm).
    #[arg(long)]
    outer: Option<usize>,
    /// Inner iterations per epoch (epoch algorithm).
    #[arg(long)]
    inner: Option<usize>,
    /// Epoch carry-forward rule: 1 = last iterate, 2 = random iterate.
    #[arg(long)]
    option: Option<EpochOptionArg>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma_eps: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Warn when the gradient table would exceed this many MiB.
    #[arg(long)]
    max_table_mb: Option<usize>,
    #[command(flatten)]
    wolfe: WolfeArgs,
    /// Trace CSV path (defaults to `<out-dir>/trace.csv`).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct VarianceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    lambda: Option<f64>,
    /// Stored checkpoint iterates (the target is one step further).
    #[arg(long)]
    checkpoints: Option<usize>,
    /// Mini-batches drawn once and reused for every checkpoint.
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    gamma_eps: Option<f64>,
    #[command(flatten)]
    wolfe: WolfeArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// LIBSVM dataset paths (repeatable).
    #[arg(long)]
    data: Vec<PathBuf>,
    #[arg(long)]
    expected_dim: Option<usize>,
    #[arg(long)]
    scale: Option<ScaleMode>,
    /// Add the built-in six-instance synthetic suite.
    #[arg(long)]
    synth_suite: bool,
    #[arg(long)]
    iters: Option<usize>,
    /// Comma-separated seed list, e.g. 1,2,3.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma_eps: Option<f64>,
    /// Inner iterations per epoch for the epoch-algorithm variants.
    #[arg(long)]
    inner: Option<usize>,
    #[command(flatten)]
    wolfe: WolfeArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Alg1,
    Alg2,
}

#[derive(Clone, Copy, ValueEnum)]
enum GammaArg {
    Star,
    One,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleMode {
    None,
    Maxmin,
}

#[derive(Clone, Copy, ValueEnum)]
enum EpochOptionArg {
    #[value(name = "1")]
    Last,
    #[value(name = "2")]
    Random,
}

/// Flat key=value file; keys are the long flag names.
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (no, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .with_context(|| format!("config line {}: expected key=value", no + 1))?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => match raw.parse() {
                Ok(v) => Ok(Some(v)),
                Err(e) => bail!("config key {key}={raw}: {e}"),
            },
        }
    }

    /// Flag value if given, else the config value, else the default.
    fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(flag.or(self.get(key)?).unwrap_or(default))
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        log::error!("{e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let cfg = FileConfig::load(cli.config.as_deref())?;
    let seed = cfg.resolve(cli.seed, "seed", 0u64)?;
    let out_dir = match cli.out_dir {
        Some(dir) => dir,
        None => PathBuf::from(cfg.0.get("out-dir").cloned().unwrap_or_else(|| ".".into())),
    };
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating out dir {}", out_dir.display()))?;
    let threads = cfg.resolve(cli.threads, "threads", 1usize)?;

    match cli.command {
        Command::Synth(args) => cmd_synth(args, &cfg, seed, &out_dir),
        Command::Train(args) => cmd_train(args, &cfg, seed, &out_dir),
        Command::VarianceExp(args) => cmd_variance(args, &cfg, seed, &out_dir),
        Command::Compare(args) => cmd_compare(args, &cfg, seed, &out_dir, threads),
    }
}

fn load_dataset(args: &DataArgs, cfg: &FileConfig) -> Result<Arc<Dataset<f64>>> {
    let ds = load_libsvm::<f64>(&args.data, args.expected_dim)
        .with_context(|| format!("loading {}", args.data.display()))?;
    let scale = match args.scale {
        Some(s) => s,
        None => match cfg.0.get("scale").map(String::as_str) {
            Some("maxmin") => ScaleMode::Maxmin,
            Some("none") | None => ScaleMode::None,
            Some(other) => bail!("config key scale={other}: expected none or maxmin"),
        },
    };
    let ds = match scale {
        ScaleMode::None => ds,
        ScaleMode::Maxmin => maxmin_scale(&ds),
    };
    log::info!(
        "loaded {}: n={}, d={}",
        ds.name(),
        ds.n_samples(),
        ds.dim()
    );
    Ok(Arc::new(ds))
}

fn wolfe_params(args: &WolfeArgs, cfg: &FileConfig) -> Result<WolfeParams<f64>> {
    let defaults = WolfeParams::<f64>::default();
    let mut params = WolfeParams {
        sigma1: cfg.resolve(args.sigma1, "sigma1", defaults.sigma1)?,
        sigma2: cfg.resolve(args.sigma2, "sigma2", defaults.sigma2)?,
        alpha_init: cfg.resolve(args.alpha_init, "alpha-init", defaults.alpha_init)?,
        alpha_min: defaults.alpha_min,
        alpha_max: cfg.resolve(args.alpha_max, "alpha-max", defaults.alpha_max)?,
        max_evals: cfg.resolve(args.ls_max_evals, "ls-max-evals", defaults.max_evals)?,
    };
    params.alpha_init = params.alpha_init.min(params.alpha_max);
    Ok(params)
}

fn cmd_synth(args: SynthArgs, cfg: &FileConfig, seed: u64, out_dir: &Path) -> Result<()> {
    let n = cfg.resolve(args.n, "n", 1000usize)?;
    let d = cfg.resolve(args.d, "d", 20usize)?;
    let noise_sd = cfg.resolve(args.noise_sd, "noise-sd", 0.1f64)?;
    let (ds, weights) = synth_ridge::<f64>(n, d, noise_sd, seed)?;

    let out = args.out.unwrap_or_else(|| out_dir.join("synth.libsvm"));
    std::fs::write(&out, ds.to_libsvm())
        .with_context(|| format!("writing {}", out.display()))?;
    log::info!("wrote {} (n={n}, d={d}, noise_sd={noise_sd}, seed={seed})", out.display());

    if let Some(wpath) = args.weights_out {
        let mut text = String::from("coord,weight\n");
        for (j, w) in weights.iter().enumerate() {
            text.push_str(&format!("{j},{w}\n"));
        }
        std::fs::write(&wpath, text)
            .with_context(|| format!("writing {}", wpath.display()))?;
        log::info!("wrote planted weights to {}", wpath.display());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs, cfg: &FileConfig, seed: u64, out_dir: &Path) -> Result<()> {
    let ds = load_dataset(&args.data, cfg)?;
    let algorithm = match args.algorithm {
        Some(AlgorithmArg::Alg1) | None => Algorithm::Alg1,
        Some(AlgorithmArg::Alg2) => Algorithm::Alg2,
    };

    let mut run_cfg = match algorithm {
        Algorithm::Alg1 => RunConfig::alg1(cfg.resolve(args.iters, "iters", 100)?),
        Algorithm::Alg2 => RunConfig::alg2(
            cfg.resolve(args.outer, "outer", 10)?,
            cfg.resolve(args.inner, "inner", 10)?,
        ),
    };
    run_cfg.gamma_mode = match args.gamma {
        Some(GammaArg::Star) | None => GammaMode::Star,
        Some(GammaArg::One) => GammaMode::One,
    };
    run_cfg.batch_size = cfg.resolve(args.batch_size, "batch-size", 64)?;
    run_cfg.lambda = cfg.resolve(args.lambda, "lambda", 1e-3)?;
    run_cfg.gamma_eps = cfg.resolve(args.gamma_eps, "gamma-eps", 1e-12)?;
    run_cfg.eval_every = cfg.resolve(args.eval_every, "eval-every", 1)?;
    run_cfg.seed = seed;
    run_cfg.wolfe = wolfe_params(&args.wolfe, cfg)?;
    run_cfg.option = match args.option {
        Some(EpochOptionArg::Random) => EpochOption::RandomIterate,
        _ => EpochOption::LastIterate,
    };

    if algorithm == Algorithm::Alg1 {
        let budget_mb = cfg.resolve(args.max_table_mb, "max-table-mb", 1024usize)?;
        let table_mb = ds.n_samples() * ds.dim() * std::mem::size_of::<f64>() / (1 << 20);
        if table_mb > budget_mb {
            log::warn!(
                "gradient table needs ~{table_mb} MiB (budget {budget_mb} MiB); \
                 consider the epoch algorithm for this dataset"
            );
        }
    }

    let obj = RidgeObjective::new(ds, run_cfg.lambda);
    let outcome = match algorithm {
        Algorithm::Alg1 => run_alg1(&obj, &run_cfg),
        Algorithm::Alg2 => run_alg2(&obj, &run_cfg),
    };
    let trace_path = args.trace.unwrap_or_else(|| out_dir.join("trace.csv"));

    let write_trace = |trace: &vrcg::optimize::RunTrace| -> Result<()> {
        let file = File::create(&trace_path)
            .with_context(|| format!("writing {}", trace_path.display()))?;
        trace.write_csv(BufWriter::new(file))?;
        Ok(())
    };

    match outcome {
        Ok(RunResult {
            trace,
            converged_early,
            ..
        }) => {
            write_trace(&trace)?;
            let last = trace.last().expect("trace has records");
            log::info!(
                "done: iter={} loss={:.6e} grad_norm={:.3e} wall={:.1}ms{}",
                last.iter,
                last.loss,
                last.grad_norm,
                last.wall_ms,
                if converged_early { " (converged early)" } else { "" }
            );
            log::info!("trace written to {}", trace_path.display());
            Ok(())
        }
        Err(vrcg::Error::Diverged { iter, msg, trace }) => {
            write_trace(&trace)?;
            bail!(
                "run diverged at iteration {iter}: {msg} (partial trace in {})",
                trace_path.display()
            );
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_variance(args: VarianceArgs, cfg: &FileConfig, seed: u64, out_dir: &Path) -> Result<()> {
    let ds = load_dataset(&args.data, cfg)?;
    let lambda = cfg.resolve(args.lambda, "lambda", 1e-3)?;
    let mut exp_cfg = VarianceExperimentConfig::new(lambda);
    exp_cfg.num_checkpoints = cfg.resolve(args.checkpoints, "checkpoints", 100)?;
    exp_cfg.num_batches = cfg.resolve(args.batches, "batches", 100)?;
    exp_cfg.batch_size = cfg.resolve(args.batch_size, "batch-size", 64)?;
    exp_cfg.gamma_eps = cfg.resolve(args.gamma_eps, "gamma-eps", 1e-12)?;
    exp_cfg.seed = seed;
    if args.wolfe.sigma1.is_some()
        || args.wolfe.sigma2.is_some()
        || args.wolfe.alpha_init.is_some()
        || args.wolfe.alpha_max.is_some()
        || args.wolfe.ls_max_evals.is_some()
    {
        exp_cfg.wolfe = wolfe_params(&args.wolfe, cfg)?;
    }

    let obj = RidgeObjective::new(ds.clone(), lambda);
    let table = variance_experiment(&obj, &exp_cfg)?;

    let csv_path = out_dir.join("variance.csv");
    let file = File::create(&csv_path)?;
    table.write_csv(BufWriter::new(file))?;

    let meta_path = out_dir.join("variance_meta.txt");
    std::fs::write(
        &meta_path,
        format!(
            "dataset={}\nn={}\nd={}\nlambda={lambda}\ncheckpoints-requested={}\n\
             checkpoints-used={}\ntruncated={}\nbatches={}\nbatch-size={}\nseed={seed}\n\
             cg=full-batch PRP-FR with strong Wolfe (sigma1={}, sigma2={}, alpha in [{}, {}])\n",
            ds.name(),
            ds.n_samples(),
            ds.dim(),
            exp_cfg.num_checkpoints,
            table.checkpoints_used,
            table.truncated,
            exp_cfg.num_batches,
            exp_cfg.batch_size,
            exp_cfg.wolfe.sigma1,
            exp_cfg.wolfe.sigma2,
            exp_cfg.wolfe.alpha_min,
            exp_cfg.wolfe.alpha_max,
        ),
    )?;

    let positive = table
        .rows
        .iter()
        .all(|r| r.var_gamma_star > 0.0 && r.var_gamma_one > 0.0);
    let svg_path = out_dir.join("variance.svg");
    let series = vec![
        Series::new(
            "gamma = gamma*",
            table
                .rows
                .iter()
                .map(|r| (r.k as f64, r.var_gamma_star))
                .collect(),
        ),
        Series::new(
            "gamma = 1",
            table
                .rows
                .iter()
                .map(|r| (r.k as f64, r.var_gamma_one))
                .collect(),
        ),
    ];
    let opts = SvgOptions {
        title: format!("estimate variance vs checkpoint ({})", ds.name()),
        x_label: "checkpoint k".into(),
        y_label: "variance".into(),
        log_y: positive,
    };
    emit_svg_lines(&series, &opts, &svg_path)?;

    log::info!(
        "variance experiment done: {} checkpoints{}; wrote {}, {}, {}",
        table.checkpoints_used,
        if table.truncated { " (truncated)" } else { "" },
        csv_path.display(),
        svg_path.display(),
        meta_path.display()
    );
    Ok(())
}

fn cmd_compare(
    args: CompareArgs,
    cfg: &FileConfig,
    seed: u64,
    out_dir: &Path,
    threads: usize,
) -> Result<()> {
    let mut datasets = Vec::new();
    for path in &args.data {
        let data_args = DataArgs {
            data: path.clone(),
            expected_dim: args.expected_dim,
            scale: args.scale,
        };
        datasets.push(load_dataset(&data_args, cfg)?);
    }
    if args.synth_suite {
        for (i, d) in [12usize, 22, 27, 54, 90, 123].into_iter().enumerate() {
            let (ds, _) = synth_ridge::<f64>(1500, d, 0.01, seed + 1000 + i as u64)?;
            datasets.push(Arc::new(ds));
        }
    }
    if datasets.is_empty() {
        bail!("no datasets: pass --data files and/or --synth-suite");
    }

    let iters = cfg.resolve(args.iters, "iters", 100)?;
    let batch_size = cfg.resolve(args.batch_size, "batch-size", 64)?;
    let lambda = cfg.resolve(args.lambda, "lambda", 1e-3)?;
    let gamma_eps = cfg.resolve(args.gamma_eps, "gamma-eps", 1e-12)?;
    let inner = cfg.resolve(args.inner, "inner", 10)?;
    let wolfe = wolfe_params(&args.wolfe, cfg)?;
    let seeds: Vec<u64> = {
        let raw = args
            .seeds
            .or(cfg.0.get("seeds").cloned())
            .unwrap_or_else(|| "1,2,3".into());
        raw.split(',')
            .map(|s| s.trim().parse().with_context(|| format!("bad seed {s:?}")))
            .collect::<Result<_>>()?
    };

    let mut base1 = RunConfig::alg1(iters);
    base1.batch_size = batch_size;
    base1.lambda = lambda;
    base1.gamma_eps = gamma_eps;
    base1.wolfe = wolfe;
    let mut base2 = RunConfig::alg2(1, inner);
    base2.batch_size = batch_size;
    base2.lambda = lambda;
    base2.gamma_eps = gamma_eps;
    base2.wolfe = wolfe;
    let variants = standard_variants(base1, base2);

    let opts = CompareOptions {
        threads,
        ..Default::default()
    };
    let report = compare_convergence(&datasets, &variants, iters, &seeds, &opts)?;
    write_report_files(&report, out_dir)?;

    for ds in &report.datasets {
        for cell in &ds.cells {
            log::info!(
                "{} / {}: {} final log10 loss {:.4}, wall {:.1}ms",
                ds.dataset,
                cell.variant,
                if cell.failed { "FAILED" } else { "ok" },
                cell.final_log10_loss,
                cell.wall_ms_total
            );
        }
    }
    let star = report.wall_ms_where(|l| l == "alg1" || l == "alg2");
    let one = report.wall_ms_where(|l| l == "scga" || l == "cgvr");
    log::info!(
        "total wall: gamma* variants {star:.1}ms, gamma=1 variants {one:.1}ms (ratio {:.3})",
        star / one
    );
    log::info!("report written to {}", out_dir.display());
    Ok(())
}
