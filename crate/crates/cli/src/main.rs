use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bayescns::experiment::{
    aggregate, build_world, run_bayesian, run_experiment, CtrSeries, ExperimentConfig, MethodVariant,
    VariantSummary,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Environment variable naming the default output directory.
const OUT_DIR_VAR: &str = "BAYESCNS_OUT_DIR";

#[derive(Parser)]
#[command(name = "bayescns", version, about = "Simulation studies for Bayesian cold-start ranking")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the prior network on a trial's offline history and save a checkpoint.
    TrainPrior(ModelArgs),
    /// Train the contextual and interaction rankers and save both checkpoints.
    TrainRanker(ModelArgs),
    /// Run every configured variant and write one CSV per variant.
    Run(RunArgs),
    /// Summarize CSVs written by `run`.
    Aggregate(AggregateArgs),
    /// Run one Bayesian variant for a trial and save its final posterior store.
    Snapshot(SnapshotArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    /// Overrides `experiment.base_seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,

    /// Trial whose world is used for training.
    #[arg(long, default_value_t = 0)]
    trial: usize,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,

    /// Restrict the run to these variants (repeatable).
    #[arg(long, value_name = "VARIANT")]
    variant: Vec<MethodVariant>,

    /// Output directory; defaults to `experiment.output`, then $BAYESCNS_OUT_DIR, then `.`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Skip writing summary.json.
    #[arg(long)]
    no_summary: bool,
}

#[derive(Args)]
struct AggregateArgs {
    /// CSV files; the variant is read from each file stem unless --variant is given.
    #[arg(required = true, value_name = "CSV")]
    inputs: Vec<PathBuf>,

    /// Variant of every input.
    #[arg(long)]
    variant: Option<MethodVariant>,

    /// Moving-average window used when the CSVs were written.
    #[arg(long, default_value_t = 500)]
    window: usize,

    /// Write the summary as JSON to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SnapshotArgs {
    #[command(flatten)]
    common: Common,

    #[arg(long, default_value_t = MethodVariant::BayesCns)]
    variant: MethodVariant,

    #[arg(long, default_value_t = 0)]
    trial: usize,

    /// Snapshot file; defaults to `<variant>.posterior` in the output directory.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Summary<'a> {
    base_seed: u64,
    num_trials: usize,
    timesteps: u64,
    variants: &'a [VariantSummary],
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::TrainPrior(args) => train_prior(args),
        Command::TrainRanker(args) => train_ranker(args),
        Command::Run(args) => run(args),
        Command::Aggregate(args) => aggregate_csvs(args),
        Command::Snapshot(args) => snapshot(args),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.experiment.base_seed = seed;
    }
    Ok(config)
}

fn out_dir(flag: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| config.experiment.output.clone())
        .or_else(|| std::env::var_os(OUT_DIR_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn check_trial(config: &ExperimentConfig, trial: usize) -> Result<()> {
    if trial >= config.experiment.num_trials {
        bail!(
            "trial {trial} out of range: config has {} trials",
            config.experiment.num_trials
        );
    }
    Ok(())
}

fn train_prior(args: ModelArgs) -> Result<()> {
    let config = load_config(&args.common)?;
    check_trial(&config, args.trial)?;
    let world = build_world(&config, args.trial, true)?;
    let dir = out_dir(args.out, &config);
    ensure_dir(&dir)?;
    let path = dir.join("prior.ckpt");
    let net = world.prior.expect("world built with a prior");
    net.to_checkpoint().save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn train_ranker(args: ModelArgs) -> Result<()> {
    let config = load_config(&args.common)?;
    check_trial(&config, args.trial)?;
    let world = build_world(&config, args.trial, false)?;
    let dir = out_dir(args.out, &config);
    ensure_dir(&dir)?;
    for (name, ranker) in [
        ("ranker_contextual.ckpt", &world.contextual_ranker),
        ("ranker_interaction.ckpt", &world.interaction_ranker),
    ] {
        let path = dir.join(name);
        ranker.to_checkpoint().save(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = load_config(&args.common)?;
    if !args.variant.is_empty() {
        config.experiment.variants = args.variant;
    }
    let dir = out_dir(args.out, &config);
    log::info!(
        "running {} trials of {:?} with base seed {}",
        config.experiment.num_trials,
        config.experiment.variants,
        config.experiment.base_seed
    );
    let series = run_experiment(&config)?;
    ensure_dir(&dir)?;
    for s in &series {
        let path = dir.join(format!("{}.csv", s.variant));
        s.save_csv(&path)?;
        println!("{}", path.display());
    }
    let summary = aggregate(&series)?;
    print_table(&summary);
    if !args.no_summary {
        let path = dir.join("summary.json");
        write_summary(&path, &config, &summary)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn write_summary(path: &Path, config: &ExperimentConfig, summary: &[VariantSummary]) -> Result<()> {
    let doc = Summary {
        base_seed: config.experiment.base_seed,
        num_trials: config.experiment.num_trials,
        timesteps: config.total_timesteps(),
        variants: summary,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_table(summary: &[VariantSummary]) {
    println!("{:<18} {:>6} {:>10} {:>10}", "variant", "trials", "ctr", "ci95");
    for s in summary {
        let ci = match s.cumulative_ctr.se {
            Some(_) => format!("±{:.4}", s.cumulative_ctr.half_width()),
            None => "n/a".to_string(),
        };
        println!(
            "{:<18} {:>6} {:>10.4} {:>10}",
            s.variant.name(),
            s.trials,
            s.cumulative_ctr.mean,
            ci
        );
    }
}

fn aggregate_csvs(args: AggregateArgs) -> Result<()> {
    let mut by_variant: BTreeMap<MethodVariant, Vec<CtrSeries>> = BTreeMap::new();
    for path in &args.inputs {
        let variant = match args.variant {
            Some(v) => v,
            None => path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .with_context(|| {
                    format!("cannot infer the variant of {}; pass --variant", path.display())
                })?,
        };
        let series = CtrSeries::load_csv(path, variant, args.window)?;
        by_variant.entry(variant).or_default().push(series);
    }
    let mut merged = Vec::new();
    for (variant, parts) in by_variant {
        let mut trials = Vec::new();
        for p in parts {
            trials.extend(p.trials);
        }
        merged.push(CtrSeries { variant, window: args.window, trials });
    }
    let summary = aggregate(&merged)?;
    print_table(&summary);
    if let Some(path) = args.out {
        let mut text = serde_json::to_string_pretty(&summary)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn snapshot(args: SnapshotArgs) -> Result<()> {
    let config = load_config(&args.common)?;
    check_trial(&config, args.trial)?;
    if !args.variant.is_bayesian() {
        bail!("{} keeps no posterior store", args.variant);
    }
    let world = build_world(&config, args.trial, true)?;
    let (series, store) = run_bayesian(&config, &world, args.variant)?;
    let path = match args.out {
        Some(p) => p,
        None => {
            let dir = out_dir(None, &config);
            ensure_dir(&dir)?;
            dir.join(format!("{}.posterior", args.variant))
        }
    };
    std::fs::write(&path, store.snapshot()).with_context(|| format!("writing {}", path.display()))?;
    log::info!(
        "{} arms at t={}, trial CTR {:.4}",
        store.len(),
        store.time(),
        series.cumulative_ctr()
    );
    println!("{}", path.display());
    Ok(())
}
