//! `air` command-line front end. Everything here is argument handling and
//! printing; the work happens in `air_core`.

use std::ffi::OsString;
use std::path::PathBuf;

use air_core::evalbench::{run_sweep, Paradigm, SweepOptions, SweepParameter, SweepSpec};
use air_core::experiment::{run_id, run_to_dir, ExperimentConfig};
use air_core::report::report_dir;
use air_core::selftest::run_selftest;
use air_core::{AirError, Result};
use clap::{Args, Parser, Subcommand};

/// The configuration used when `--config` is not given.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

/// Environment variable naming the root for run directories.
pub const OUT_DIR_ENV: &str = "AIR_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "air", version, about = "Prompt learning with diffusion-generated auxiliary classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train once and write a run directory.
    Run(RunArgs),
    /// Run a parameter grid over several seeds.
    Sweep(SweepArgs),
    /// Render plots and a summary for a run or sweep directory.
    Report(ReportArgs),
    /// Run the built-in invariant and oracle checks.
    Selftest,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON experiment config; the bundled default when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $AIR_OUT_DIR, else the config's
    /// output_dir, else ./runs, plus a hash-named subdirectory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fusion weight of the auxiliary classifier.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Weight of the synthetic-sample loss.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Synthetic samples generated per class.
    #[arg(long = "num-synth")]
    pub num_synth: Option<usize>,
    /// Outer iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, value_parser = ["ul", "ssl", "trzsl"])]
    pub paradigm: Option<String>,
    #[arg(long = "prompt-mode", value_parser = ["text", "visual"])]
    pub prompt_mode: Option<String>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Record wall-clock seconds in results.csv (makes it run-dependent).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// lambda, beta or num_synthetic.
    #[arg(long)]
    pub param: Option<String>,
    /// Comma-separated values; the parameter's default grid when omitted.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub grid: Option<Vec<f64>>,
    /// Comma-separated seeds (default 0,1,2).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// A directory written by `air run` or `air sweep`.
    pub dir: PathBuf,
}

/// Loads the config and applies command-line overrides.
pub fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::from_json(DEFAULT_CONFIG)?,
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(l) = args.lambda {
        cfg.trainer.lambda = l;
    }
    if let Some(b) = args.beta {
        cfg.trainer.beta = b;
    }
    if let Some(m) = args.num_synth {
        cfg.generator.num_synthetic = m;
    }
    if let Some(i) = args.iters {
        cfg.trainer.iterations = i;
    }
    if let Some(p) = &args.paradigm {
        cfg.paradigm.kind = p.parse::<Paradigm>()?;
    }
    if let Some(m) = &args.prompt_mode {
        cfg.trainer.prompt_mode = m.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn init_workers(workers: usize) {
    if workers > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn cmd_run(args: &RunArgs) -> Result<i32> {
    let cfg = load_config(args)?;
    init_workers(args.workers);
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => output_root(&cfg).join(format!("run-{}", run_id(&cfg.hash()?))),
    };
    let (_, row) = run_to_dir(&cfg, &dir, args.timing)?;
    println!(
        "run {}: accuracy {}, harmonic mean {}, top-50 pseudo-label accuracy {}",
        row.run_id,
        opt(row.accuracy),
        opt(row.harmonic_mean),
        opt(row.pseudo_top50_acc)
    );
    println!("wrote {}", dir.display());
    Ok(0)
}

fn sweep_spec(args: &SweepArgs, cfg: &ExperimentConfig) -> Result<SweepSpec> {
    let mut spec = match (&args.param, &cfg.sweep) {
        (Some(p), _) => SweepSpec::new(p.parse::<SweepParameter>()?),
        (None, Some(s)) => s.clone(),
        (None, None) => {
            return Err(AirError::Config("no sweep parameter: pass --param or set `sweep` in the config".into()))
        }
    };
    if let Some(g) = &args.grid {
        spec.grid = g.clone();
    }
    if let Some(s) = &args.seeds {
        spec.seeds = s.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let mut cfg = load_config(&args.run)?;
    let spec = sweep_spec(args, &cfg)?;
    cfg.sweep = Some(spec.clone());
    let dir = match &args.run.out {
        Some(d) => d.clone(),
        None => output_root(&cfg).join(format!("sweep-{}", run_id(&cfg.hash()?))),
    };
    cfg.sweep = None;
    let opts = SweepOptions { out_dir: Some(dir.clone()), workers: args.run.workers, timing: args.run.timing };
    let out = run_sweep(&cfg, &spec, &opts)?;
    println!(
        "sweep {} over {}: {} cells ({} reused, {} failed)",
        run_id(&out.config_hash),
        spec.parameter.as_str(),
        out.rows.len(),
        out.reused,
        out.failures.len()
    );
    for f in &out.failures {
        eprintln!("cell {}={} seed {} failed: {}", spec.parameter.as_str(), f.value, f.seed, f.error);
    }
    println!("wrote {}", dir.display());
    Ok(0)
}

fn cmd_report(args: &ReportArgs) -> Result<i32> {
    if !args.dir.exists() {
        return Err(AirError::Config(format!("{} does not exist", args.dir.display())));
    }
    let s = report_dir(&args.dir)?;
    println!("{} report for {}: {} rows", s.kind, run_id(&s.config_hash), s.rows);
    for f in &s.files {
        println!("wrote {}", f.display());
    }
    Ok(0)
}

fn cmd_selftest() -> i32 {
    let results = run_selftest();
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    i32::from(failed > 0)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 failed selftest, 2 bad input, 3 numeric
/// failure, 4 corrupt or inconsistent artifacts.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
        Command::Selftest => Ok(cmd_selftest()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Directory a run with this config would be written to by default.
pub fn default_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    Ok(output_root(cfg).join(format!("run-{}", run_id(&cfg.hash()?))))
}
