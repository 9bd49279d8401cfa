use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acrl::harness::{self, aggregate, emit_report, emit_runtime, measure_runtime, run_experiment};
use acrl::{ConstraintSpec, Error, ExperimentConfig, Family, RunRecord, RuntimeSetup, Variant};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "acrl", version, about = "Action-constrained RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (family, variant, seed) run of a config and write reports.
    Run(RunArgs),
    /// Time gradient steps per variant and batch size.
    BenchRuntime(BenchArgs),
    /// Rewrite reports from a saved `records.json`.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list; repeatable.
    #[arg(long)]
    seed: Vec<u64>,
    /// Replaces the config's variants; repeatable, e.g. `--variant DPre+`.
    #[arg(long)]
    variant: Vec<Variant>,
    /// Replaces the config's families; repeatable, e.g. `--family O:budget=0.3`.
    #[arg(long, value_parser = parse_family)]
    family: Vec<ConstraintSpec>,
    /// Replaces the config's training length.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Maximum concurrent runs.
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Runtime setup (JSON): env, family, overrides, warm_steps, trials.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 16, 100])]
    batch: Vec<usize>,
    /// Gradient steps per trial.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long)]
    trials: Option<usize>,
    /// Replaces the setup's constraint family.
    #[arg(long, value_parser = parse_family)]
    family: Option<ConstraintSpec>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding `records.json`; reports are written next to it
    /// unless `--out-dir` is given.
    #[arg(long, default_value = "results")]
    input: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// `NAME` or `NAME:key=value,key=value`.
fn parse_family(s: &str) -> Result<ConstraintSpec, String> {
    let (name, params) = s.split_once(':').unwrap_or((s, ""));
    let mut spec = ConstraintSpec::new(Family::parse(name).map_err(|e| e.to_string())?);
    for kv in params.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got `{kv}`"))?;
        let v: f64 = v.parse().map_err(|_| format!("bad number `{v}`"))?;
        spec = spec.with_param(k.trim(), v);
    }
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_summary(records: &[RunRecord]) {
    println!("{:<16} {:<8} {:>5} {:>12} {:>10} {:>12}", "family", "variant", "seeds", "mean", "stderr", "median");
    for a in aggregate(records) {
        println!(
            "{:<16} {:<8} {:>5} {:>12.4} {:>10.4} {:>12.4}",
            a.family,
            a.variant.to_string(),
            a.seeds,
            a.mean,
            a.stderr,
            a.median
        );
    }
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if !args.seed.is_empty() {
        cfg.seeds = args.seed;
    }
    if !args.variant.is_empty() {
        cfg.variants = args.variant;
    }
    if !args.family.is_empty() {
        cfg.families = args.family;
    }
    if let Some(steps) = args.steps {
        cfg.total_steps = steps;
    }
    cfg.validate()?;
    let records = run_experiment(&cfg, args.jobs)?;
    if let Some(r) = records.iter().find(|r| r.violations > 0) {
        bail!(Error::FeasibilityViolation { step: 0, excess: r.violations as f64 });
    }
    emit_report(&records, &cfg, &args.out_dir)?;
    let saved = json!({ "config": cfg, "records": records });
    std::fs::write(args.out_dir.join("records.json"), serde_json::to_string_pretty(&saved)?)?;
    print_summary(&records);
    Ok(())
}

fn bench(args: BenchArgs) -> anyhow::Result<()> {
    let mut setup: RuntimeSetup = match &args.config {
        Some(p) => read_json(p)?,
        None => RuntimeSetup::default(),
    };
    if let Some(t) = args.trials {
        setup.trials = t;
    }
    if let Some(f) = args.family {
        setup.family = f;
    }
    let variants = if args.variant.is_empty() { Variant::ALL.to_vec() } else { args.variant };
    let mut rows = Vec::new();
    for &batch in &args.batch {
        for &v in &variants {
            let m = measure_runtime(&setup, v, batch, args.steps)?;
            println!(
                "{:<8} batch {:>4}: {:.4} s ± {:.4} per {} steps",
                v.to_string(),
                batch,
                m.seconds_mean,
                m.seconds_std,
                args.steps
            );
            rows.push(m);
        }
    }
    let path = emit_runtime(&rows, &args.out_dir)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    #[derive(serde::Deserialize)]
    struct Saved {
        config: ExperimentConfig,
        records: Vec<RunRecord>,
    }
    let saved: Saved = read_json(&args.input.join("records.json"))?;
    let out = args.out_dir.unwrap_or(args.input);
    let files = harness::emit_report(&saved.records, &saved.config, &out)?;
    print_summary(&saved.records);
    println!("wrote {}", files.rewards.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::BenchRuntime(a) => bench(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let infeasible = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::FeasibilityViolation { .. })));
            ExitCode::from(if infeasible { 2 } else { 1 })
        }
    }
}
