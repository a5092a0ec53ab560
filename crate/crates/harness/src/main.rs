use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use decaf_harness::bundle::{CONFIG_FILE, PLOT_FILE, RESULTS_FILE, SUMMARY_FILE};
use decaf_harness::report::{plot_csv, results_csv, summarize, summary_csv, ResultRow};
use decaf_harness::{collect_results, run_experiment, Bundle, ExperimentConfig, PresetName, SeedRun, Task};
use log::info;
use rayon::prelude::*;

/// Detect, adapt and compose causal factors across synthetic environments.
#[derive(Parser, Debug)]
#[command(name = "decaf", version)]
struct Cli {
    /// JSON experiment config; defaults to the bundle's snapshot, then to the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bundle directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetName>,
    /// Change-detection threshold.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Target sample budget(s), comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    target_samples: Option<Vec<usize>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Simulate source and target trajectories.
    Generate,
    /// Train source encoders and target classifiers.
    TrainSource,
    /// Detect changed variables for every source and budget.
    Detect,
    /// Run the adaptation experiment (0shot / ft / decaf / scratch).
    Adapt,
    /// Run the composition experiment.
    Compose,
    /// Score every baseline and write the results CSV.
    Evaluate,
    /// Summarize the results of a bundle.
    Report,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let snapshot = cli.out.join(CONFIG_FILE);
    let mut cfg = if let Some(path) = &cli.config {
        ExperimentConfig::load(path)?
    } else if cli.preset.is_none() && snapshot.exists() {
        ExperimentConfig::load(&snapshot)?
    } else {
        let task = if cli.command == Command::Compose { Task::Compose } else { Task::Adapt };
        ExperimentConfig::for_preset(cli.preset.unwrap_or(PresetName::PongLike), task)
    };
    if let Some(p) = cli.preset {
        if cli.config.is_some() {
            cfg.preset = decaf_harness::config::PresetRef::Named(p);
        }
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if cli.tau.is_some() {
        cfg.tau = cli.tau;
    }
    if cli.target_samples.is_some() {
        cfg.target_samples = cli.target_samples.clone();
    }
    match (cli.command, cfg.task) {
        (Command::Adapt, Task::Compose) => bail!("`adapt` given a compose config"),
        (Command::Compose, Task::Adapt) => bail!("`compose` given an adapt config"),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Snapshot to record: a single `--seed` run joins the seeds of a matching snapshot.
fn recorded_config(cli: &Cli, cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut recorded = cfg.clone();
    if cli.seed.is_none() {
        return recorded;
    }
    if let Ok(previous) = ExperimentConfig::load(&cli.out.join(CONFIG_FILE)) {
        let same = ExperimentConfig {
            seeds: cfg.seeds.clone(),
            ..previous.clone()
        } == *cfg;
        if same {
            recorded.seeds = previous.seeds;
            recorded.seeds.extend(&cfg.seeds);
            recorded.seeds.sort_unstable();
            recorded.seeds.dedup();
        }
    }
    recorded
}

/// Rows of every recorded seed that already has results.
fn available_results(cfg: &ExperimentConfig, bundle: &Bundle) -> Result<Vec<ResultRow>> {
    let mut present = cfg.clone();
    present.seeds.retain(|&s| bundle.path(s, RESULTS_FILE).exists());
    collect_results(&present, bundle)
}

fn for_each_seed<T: Send>(cfg: &ExperimentConfig, bundle: &Bundle, f: impl Fn(&SeedRun) -> Result<T> + Sync) -> Result<Vec<T>> {
    cfg.seeds
        .par_iter()
        .map(|&seed| f(&SeedRun::new(cfg, bundle, seed)))
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.command == Command::Report {
        let (bundle, mut cfg) = Bundle::open(&cli.out)?;
        if let Some(s) = cli.seed {
            cfg.seeds = vec![s];
        }
        let rows = collect_results(&cfg, &bundle)?;
        let summary = summarize(&rows);
        let na: Vec<String> = cfg
            .baselines
            .iter()
            .filter(|b| !cfg.applicable(**b))
            .map(|b| b.to_string())
            .collect();
        let text = summary_csv(&summary, &na);
        write(&cli.out.join(SUMMARY_FILE), &text)?;
        write(&cli.out.join(PLOT_FILE), &plot_csv(&summary))?;
        print!("{text}");
        return Ok(());
    }
    let cfg = resolve_config(cli)?;
    let recorded = recorded_config(cli, &cfg);
    let bundle = Bundle::create(&cli.out, &recorded)?;
    match cli.command {
        Command::Generate => {
            let lens = for_each_seed(&cfg, &bundle, |r| {
                Ok(r.generate()?.iter().map(|t| t.len()).collect::<Vec<_>>())
            })?;
            for (seed, l) in cfg.seeds.iter().zip(lens) {
                println!("seed={seed} steps={l:?}");
            }
        }
        Command::TrainSource => {
            for_each_seed(&cfg, &bundle, |r| r.train_sources().map(|_| ()))?;
        }
        Command::Detect => {
            let reports = for_each_seed(&cfg, &bundle, |r| {
                let envs = r.environments()?;
                Ok((envs, r.detect()?))
            })?;
            let mut csv = String::from("seed,source,budget,variable,max_delta,detected\n");
            for (&seed, (envs, per_source)) in cfg.seeds.iter().zip(&reports) {
                for (l, per_budget) in per_source.iter().enumerate() {
                    for (budget, rep) in cfg.budgets().iter().zip(per_budget) {
                        for (v, d) in rep.max_delta.iter().enumerate() {
                            let delta = d.map_or(String::new(), |d| format!("{d:.6}"));
                            writeln!(csv, "{seed},{},{budget},{v},{delta},{}", envs[l].name, rep.is_detected(v))?;
                        }
                    }
                }
            }
            write(&cli.out.join("detect.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Adapt | Command::Compose | Command::Evaluate => {
            let mut rows = run_experiment(&cfg, &bundle)?;
            if recorded.seeds != cfg.seeds {
                rows = available_results(&recorded, &bundle)?;
                bundle.write_text(&cli.out.join(RESULTS_FILE), &results_csv(&rows))?;
            }
            info!("rows={} results={}", rows.len(), cli.out.join(RESULTS_FILE).display());
        }
        Command::Report => unreachable!(),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
