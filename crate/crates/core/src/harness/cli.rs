use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::bench::Method;
use crate::error::{Error, Result};

use super::checks;
use super::config::ExperimentConfig;
use super::run::{self, write_atomic, LandscapeOptions};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "giftlab", version, about = "Continual-learning lab for a toy two-tower encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain, run every method through the task suite and write artifacts.
    Run(RunArgs),
    /// Tabulate median metrics of two or more runs against a baseline.
    Compare(CompareArgs),
    /// Loss heightfields over the plane through three snapshots.
    Landscape(LandscapeArgs),
    /// Teacher-student cross-entropy across task boundaries.
    Trace(TraceArgs),
    /// Print the default configuration as TOML.
    Defaults,
    /// Run the built-in checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; falls back to the config, then $GIFT_BENCH_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub parallel: bool,
    /// Replaces the configured method list; repeatable.
    #[arg(long = "method")]
    pub methods: Vec<Method>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directories or manifest files.
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
    /// Baseline method in the first run; defaults to each method itself.
    #[arg(long)]
    pub baseline: Option<Method>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    pub run: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "finetune")]
    pub a: Method,
    #[arg(long, default_value = "gift_full")]
    pub b: Method,
    #[arg(long, default_value_t = 1)]
    pub task: usize,
    #[arg(long)]
    pub unlearned: Option<usize>,
    #[arg(long, default_value_t = 41)]
    pub resolution: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    pub run: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Methods to trace; defaults to every trained method of the run.
    #[arg(long = "method")]
    pub methods: Vec<Method>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Skip the multi-seed sweep and the determinism runs.
    #[arg(long)]
    pub quick: bool,
}

/// Config and input problems exit with 2, everything else with 1.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io { .. } | Error::Format(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(r) = args.replicates {
        config.replicates = r;
    }
    if args.parallel {
        config.parallel = true;
    }
    if !args.methods.is_empty() {
        config.methods = args.methods.clone();
    }
    config.validate()?;
    Ok(config)
}

fn cmd_run(args: &RunArgs) -> std::result::Result<(), (u8, String)> {
    let config = load_config(args).map_err(|e| (exit_code(&e), e.to_string()))?;
    let out = config.resolve_output(args.out.as_deref());
    match run::execute(&config, &out) {
        Ok(results) => {
            println!("{}", std::fs::read_to_string(out.join(&results.manifest.summary)).unwrap_or_default());
            println!("wrote {}", out.display());
            Ok(())
        }
        Err(e) => {
            let note = format!("{e}\n");
            let _ = write_atomic(&out.join("failure.txt"), note.as_bytes());
            Err((EXIT_RUNTIME, e.to_string()))
        }
    }
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let cmp = run::compare(&args.runs, args.baseline)?;
    print!("{}", cmp.to_text());
    if let Some(out) = &args.out {
        write_atomic(&out.join("comparison.csv"), cmp.to_csv().as_bytes())?;
        write_atomic(&out.join("comparison.txt"), cmp.to_text().as_bytes())?;
    }
    Ok(())
}

fn cmd_landscape(args: &LandscapeArgs) -> Result<()> {
    let opts = LandscapeOptions {
        seed: args.seed,
        a: args.a,
        b: args.b,
        task: args.task,
        unlearned: args.unlearned,
        resolution: args.resolution,
        out: args.out.clone(),
    };
    let out = run::landscape(&args.run, &opts)?;
    for (label, land) in [("train", &out.train), ("test", &out.test)] {
        let names = ["theta0", "a", "b"];
        let anchors: Vec<String> =
            names.iter().zip(&land.anchors).map(|(n, p)| format!("{n}={:.4}", p.loss)).collect();
        println!("{label} loss at anchors: {}", anchors.join(" "));
    }
    println!("wrote {}", out.dir.display());
    Ok(())
}

fn cmd_trace(args: &TraceArgs) -> Result<()> {
    let methods = if args.methods.is_empty() {
        let manifest = run::RunManifest::load(&args.run)?;
        let mut ms: Vec<Method> = Vec::new();
        for e in manifest.methods.iter().filter(|e| e.seed == args.seed && !e.traces.is_empty()) {
            if !ms.contains(&e.method) {
                ms.push(e.method);
            }
        }
        ms
    } else {
        args.methods.clone()
    };
    let out = run::trace(&args.run, args.seed, &methods, args.out.as_deref())?;
    for (m, report) in &out.reports {
        let starts: Vec<String> = report.task_starts.iter().map(|(t, x)| format!("t{t}={x:.3}")).collect();
        println!("{m}: distillation cross-entropy at task starts {}", starts.join(" "));
    }
    println!("wrote {}", out.dir.display());
    Ok(())
}

fn cmd_selftest(args: &SelftestArgs) -> std::result::Result<(), (u8, String)> {
    let outcomes = checks::run_all(args.quick);
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err((EXIT_RUNTIME, format!("{failed} of {} checks failed", outcomes.len())))
    }
}

fn lift(r: Result<()>) -> std::result::Result<(), (u8, String)> {
    r.map_err(|e| (exit_code(&e), e.to_string()))
}

pub fn dispatch(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => lift(cmd_compare(a)),
        Command::Landscape(a) => lift(cmd_landscape(a)),
        Command::Trace(a) => lift(cmd_trace(a)),
        Command::Defaults => {
            print!("{}", ExperimentConfig::default().to_toml());
            Ok(())
        }
        Command::Selftest(a) => cmd_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

/// Entry point of the binary.
pub fn main_from_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => dispatch(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            }
        }
    }
}
