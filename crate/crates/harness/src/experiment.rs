//! Per-seed pipeline: generate → train source → detect → adapt or compose → evaluate.
//!
//! Each stage reads its inputs through the bundle cache, so the CLI
//! subcommands can run stages one at a time or all at once.

use std::time::Instant;

use anyhow::{ensure, Context, Result};
use decaf_core::classifier::{compute_rates, detect_changes, train_classifier, ChangeReport, RateTensor, TargetClassifier};
use decaf_core::composition::{plan_stitch, stitch, SourceSummary, StitchPlan};
use decaf_core::env::{realize_environment, EnvironmentSpec};
use decaf_core::flow::{substitute, train_adaptation, AdaptationResult};
use decaf_core::metrics::{match_and_score, MetricKind};
use decaf_core::process::Trajectory;
use decaf_core::representation::{encode, Encoder, EncoderKind, LatentSequence};
use decaf_core::Matrix;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, RESULTS_FILE};
use crate::config::{Baseline, ExperimentConfig, Task};
use crate::presets::Preset;
use crate::report::{parse_results, results_csv, ResultRow};
use crate::seeds::{derive, Stream};

/// Everything a stage of one seed needs.
pub struct SeedRun<'a> {
    pub config: &'a ExperimentConfig,
    pub bundle: &'a Bundle,
    pub seed: u64,
    preset: Preset,
    run_id: String,
}

/// Trained source model and its held-out error rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceModel {
    pub encoder: Encoder<f64>,
    pub classifier: TargetClassifier<f64>,
    pub rates: RateTensor,
}

/// One scored representation of the target data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scored {
    pub label: String,
    pub budget: usize,
    pub latents: LatentSequence<f64>,
}

/// FNV-1a digest of the JSON form of `parts`.
fn key<T: Serialize>(parts: &T) -> Result<String> {
    let text = serde_json::to_string(parts)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

impl<'a> SeedRun<'a> {
    pub fn new(config: &'a ExperimentConfig, bundle: &'a Bundle, seed: u64) -> Self {
        let preset = config.preset();
        let task = match config.task {
            Task::Adapt => "adapt",
            Task::Compose => "compose",
        };
        SeedRun {
            config,
            bundle,
            seed,
            run_id: format!("{}/{task}/seed-{seed}", preset.name),
            preset,
        }
    }

    fn event(&self, stage: &str, started: Instant, detail: &str) -> Result<()> {
        let ms = started.elapsed().as_millis();
        info!("run={} stage={stage} elapsed_ms={ms} {detail}", self.run_id);
        self.bundle
            .log_event(self.seed, &format!("run={} stage={stage} elapsed_ms={ms} {detail}", self.run_id))
    }

    /// Source environments followed by the target.
    pub fn environments(&self) -> Result<Vec<EnvironmentSpec<f64>>> {
        match self.config.task {
            Task::Adapt => {
                let (s, t) = self.preset.adaptation_specs(self.seed, self.config.identity_control)?;
                Ok(vec![s, t])
            }
            Task::Compose => {
                let comp = self.preset.composition_specs(self.seed)?;
                let mut envs = comp.sources;
                envs.push(comp.target);
                Ok(envs)
            }
        }
    }

    pub fn num_sources(&self) -> usize {
        match self.config.task {
            Task::Adapt => 1,
            Task::Compose => 2,
        }
    }

    fn data_key(&self) -> Result<String> {
        key(&(
            &self.preset,
            self.config.task,
            self.config.identity_control,
            self.config.source_samples,
            self.config.max_budget(),
            self.seed,
        ))
    }

    /// Stage `generate`: source trajectories then the target trajectory.
    pub fn generate(&self) -> Result<Vec<Trajectory<f64>>> {
        let started = Instant::now();
        let envs = self.environments()?;
        let key = self.data_key()?;
        let n = envs.len();
        let trajs = envs
            .iter()
            .enumerate()
            .map(|(l, env)| {
                let (steps, stream) = if l + 1 == n {
                    (self.config.max_budget(), Stream::TargetData)
                } else {
                    (self.config.source_samples, Stream::SourceData)
                };
                self.bundle.cached_trajectory(self.seed, &env.name, &key, || {
                    realize_environment(env, steps, derive(self.seed, stream, l as u64))
                        .with_context(|| format!("simulating {}", env.name))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.event("generate", started, &format!("environments={n}"))?;
        Ok(trajs)
    }

    fn source_key(&self) -> Result<String> {
        key(&(
            self.data_key()?,
            self.config.encoder,
            &self.config.linear,
            &self.config.classifier,
            self.config.source_rate_window,
        ))
    }

    /// Stage `train-source`: encoder, target classifier and held-out rates per source.
    pub fn train_sources(&self) -> Result<Vec<SourceModel>> {
        let envs = self.environments()?;
        let trajs = self.generate()?;
        let key = self.source_key()?;
        (0..self.num_sources())
            .map(|l| {
                let started = Instant::now();
                let env = &envs[l];
                let model = self
                    .bundle
                    .cached_json(self.seed, &format!("source-{}", env.name), &key, || {
                        self.fit_source(env, &trajs[l], l)
                    })?;
                self.event("train-source", started, &format!("source={}", env.name))?;
                Ok(model)
            })
            .collect()
    }

    fn fit_source(&self, env: &EnvironmentSpec<f64>, traj: &Trajectory<f64>, l: usize) -> Result<SourceModel> {
        let split = traj.len() - self.config.source_rate_window;
        let train = traj.window(0, split);
        let held_out = traj.window(split, traj.len());
        let encoder = match self.config.encoder {
            EncoderKind::Oracle => Encoder::oracle(env),
            EncoderKind::LearnedLinear => {
                let mut cfg = self.config.linear.clone();
                cfg.train.seed = derive(self.seed, Stream::Encoder, l as u64);
                Encoder::train_linear(&train, &env.name, &cfg)?.0
            }
        };
        let mut ccfg = self.config.classifier.clone();
        ccfg.seed = derive(self.seed, Stream::Classifier, l as u64);
        let z_train = encode(&encoder, &train, &env.name)?;
        let (classifier, stats) = train_classifier(&z_train, &train.targets, &ccfg)?;
        log::debug!(
            "run={} source={} classifier_samples={} loss={:?}",
            self.run_id,
            env.name,
            stats.train_samples,
            stats.final_loss.iter().sum::<f64>() / stats.final_loss.len().max(1) as f64
        );
        let z_held = encode(&encoder, &held_out, &env.name)?;
        let rates = compute_rates(&classifier, &z_held, &held_out.targets)?;
        Ok(SourceModel {
            encoder,
            classifier,
            rates,
        })
    }

    fn target_window(&self, trajs: &[Trajectory<f64>], budget: usize) -> Trajectory<f64> {
        trajs.last().expect("target trajectory").window(0, budget)
    }

    /// Stage `detect`: change report of every source against each target budget.
    pub fn detect(&self) -> Result<Vec<Vec<ChangeReport>>> {
        let started = Instant::now();
        let trajs = self.generate()?;
        let sources = self.train_sources()?;
        let envs = self.environments()?;
        let tau = self.config.tau();
        let key = key(&(self.source_key()?, tau, self.config.criterion))?;
        let mut out = Vec::new();
        for (l, src) in sources.iter().enumerate() {
            let mut per_budget = Vec::new();
            for budget in self.config.budgets() {
                let name = format!("detect-{}-{budget}", envs[l].name);
                let report = self.bundle.cached_json(self.seed, &name, &key, || {
                    let target = self.target_window(&trajs, budget);
                    let z = encode(&src.encoder, &target, "target")?;
                    let rates = compute_rates(&src.classifier, &z, &target.targets)?;
                    Ok(detect_changes(&src.rates, &rates, tau, self.config.criterion)?)
                })?;
                info!(
                    "run={} source={} budget={budget} detected={:?}",
                    self.run_id, envs[l].name, report.detected
                );
                per_budget.push(report);
            }
            out.push(per_budget);
        }
        self.event("detect", started, "")?;
        Ok(out)
    }

    fn scored_key(&self) -> Result<String> {
        key(&(
            self.source_key()?,
            self.config.tau(),
            self.config.criterion,
            self.config.adaptation(),
            self.config.adaptation_steps,
            &self.config.fine_tune,
            &self.config.linear,
        ))
    }

    fn fine_tuned(&self, src: &SourceModel, target: &Trajectory<f64>, l: usize) -> Result<LatentSequence<f64>> {
        let mut enc = src.encoder.clone();
        let mut train = self.config.fine_tune.clone();
        train.seed = derive(self.seed, Stream::FineTune, l as u64);
        enc.continue_training(target, &train)?;
        Ok(encode(&enc, target, "target")?)
    }

    fn scratch(&self, target: &Trajectory<f64>) -> Result<LatentSequence<f64>> {
        let mut cfg = self.config.linear.clone();
        cfg.train = self.config.fine_tune.clone();
        cfg.train.seed = derive(self.seed, Stream::Scratch, 0);
        let (enc, _) = Encoder::train_linear(target, "target", &cfg)?;
        Ok(encode(&enc, target, "target")?)
    }

    /// Stage `adapt`: target representations of every baseline and budget.
    pub fn adapt(&self) -> Result<Vec<Scored>> {
        ensure!(self.config.task == Task::Adapt, "adapt needs an adapt config");
        let trajs = self.generate()?;
        let sources = self.train_sources()?;
        let reports = self.detect()?;
        let src = &sources[0];
        let key = self.scored_key()?;
        let mut out = Vec::new();
        for (b, budget) in self.config.budgets().into_iter().enumerate() {
            let target = self.target_window(&trajs, budget);
            let zero_shot = encode(&src.encoder, &target, "target")?;
            for &baseline in &self.config.baselines {
                if !self.config.applicable(baseline) {
                    continue;
                }
                let started = Instant::now();
                let label = baseline.as_str();
                let name = format!("latents-{budget}-{label}");
                let latents = self.bundle.cached_json(self.seed, &name, &key, || match baseline {
                    Baseline::ZeroShot => Ok(zero_shot.clone()),
                    Baseline::Decaf => {
                        let mut cfg = self.config.adaptation_for(budget);
                        cfg.train.seed = derive(self.seed, Stream::Adaptation, budget as u64);
                        let detected = &reports[0][b].detected;
                        let result = train_adaptation(&zero_shot, &target.targets, detected, &cfg)?;
                        self.save_adaptation(budget, &result)?;
                        Ok(substitute(&zero_shot, &result)?)
                    }
                    Baseline::FineTune => self.fine_tuned(src, &target, 0),
                    Baseline::Scratch => self.scratch(&target),
                })?;
                self.event("adapt", started, &format!("baseline={label} budget={budget}"))?;
                out.push(Scored {
                    label: label.to_string(),
                    budget,
                    latents,
                });
            }
        }
        Ok(out)
    }

    fn save_adaptation(&self, budget: usize, result: &AdaptationResult<f64>) -> Result<()> {
        self.bundle
            .write_json(self.seed, &format!("adaptation-{budget}"), &self.scored_key()?, result)
    }

    /// Stage `compose`: per-source zero-shot (and fine-tuned) representations plus the stitched one.
    pub fn compose(&self) -> Result<Vec<Scored>> {
        ensure!(self.config.task == Task::Compose, "compose needs a compose config");
        let trajs = self.generate()?;
        let sources = self.train_sources()?;
        let reports = self.detect()?;
        let envs = self.environments()?;
        let key = self.scored_key()?;
        let k = self.preset.num_variables();
        let mut out = Vec::new();
        for (b, budget) in self.config.budgets().into_iter().enumerate() {
            let started = Instant::now();
            let target = self.target_window(&trajs, budget);
            let mut per_source = Vec::new();
            let mut summaries = Vec::new();
            for (l, src) in sources.iter().enumerate() {
                let name = &envs[l].name;
                let z = encode(&src.encoder, &target, "target")?;
                if self.config.baselines.contains(&Baseline::ZeroShot) {
                    out.push(Scored {
                        label: format!("0shot-{name}"),
                        budget,
                        latents: z.clone(),
                    });
                }
                if self.config.baselines.contains(&Baseline::FineTune) && self.config.applicable(Baseline::FineTune) {
                    let latents = self.bundle.cached_json(self.seed, &format!("latents-{budget}-ft-{name}"), &key, || {
                        self.fine_tuned(src, &target, l)
                    })?;
                    out.push(Scored {
                        label: format!("ft-{name}"),
                        budget,
                        latents,
                    });
                }
                summaries.push(SourceSummary {
                    name: name.clone(),
                    assignment: src.encoder.assignment.clone(),
                    report: reports[l][b].clone(),
                });
                per_source.push(z);
            }
            if self.config.baselines.contains(&Baseline::Decaf) {
                let all: Vec<usize> = (0..k).collect();
                let plan: StitchPlan = plan_stitch(&summaries, &all)?;
                self.bundle.write_json(self.seed, &format!("stitch-plan-{budget}"), &key, &plan)?;
                out.push(Scored {
                    label: Baseline::Decaf.as_str().to_string(),
                    budget,
                    latents: stitch(&plan, &per_source)?,
                });
            }
            if self.config.baselines.contains(&Baseline::Scratch) {
                let latents = self
                    .bundle
                    .cached_json(self.seed, &format!("latents-{budget}-scratch"), &key, || self.scratch(&target))?;
                out.push(Scored {
                    label: Baseline::Scratch.as_str().to_string(),
                    budget,
                    latents,
                });
            }
            self.event("compose", started, &format!("budget={budget}"))?;
        }
        Ok(out)
    }

    /// Stage `evaluate`: scores every representation and writes the seed's CSV.
    pub fn evaluate(&self) -> Result<Vec<ResultRow>> {
        let scored = match self.config.task {
            Task::Adapt => self.adapt()?,
            Task::Compose => self.compose()?,
        };
        let started = Instant::now();
        let trajs = self.generate()?;
        let changed: Vec<usize> = match self.config.task {
            Task::Adapt if !self.config.identity_control => self.preset.changed.clone(),
            _ => Vec::new(),
        };
        let k = self.preset.num_variables();
        let mut scopes = vec![("all", (0..k).collect::<Vec<_>>())];
        if !changed.is_empty() {
            scopes.push(("changed", changed));
        }
        let mut rows = Vec::new();
        for s in &scored {
            let target = self.target_window(&trajs, s.budget);
            for (scope, vars) in &scopes {
                for &metric in &self.config.metrics {
                    let summary = score(&s.latents, &target, vars, metric)?;
                    rows.push(ResultRow::new(self.seed, s.budget, &s.label, scope, &summary));
                }
            }
        }
        self.bundle
            .write_text(&self.bundle.path(self.seed, RESULTS_FILE), &results_csv(&rows))?;
        self.event("evaluate", started, &format!("rows={}", rows.len()))?;
        Ok(rows)
    }
}

/// Scores the assigned latent blocks against the first dimension of each truth variable in `vars`.
pub fn score(
    latents: &LatentSequence<f64>,
    truth: &Trajectory<f64>,
    vars: &[usize],
    metric: MetricKind,
) -> Result<decaf_core::metrics::ScoreSummary> {
    let blocks: Vec<Matrix<f64>> = latents.blocks().into_iter().flatten().collect();
    let columns: Vec<Vec<f64>> = vars.iter().map(|&v| truth.states.column(truth.offset(v))).collect();
    Ok(match_and_score(&blocks, &columns, metric)?.1)
}

/// Runs every seed (in parallel) and writes the combined results CSV.
pub fn run_experiment(config: &ExperimentConfig, bundle: &Bundle) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let per_seed = config
        .seeds
        .par_iter()
        .map(|&seed| SeedRun::new(config, bundle, seed).evaluate())
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<ResultRow> = per_seed.into_iter().flatten().collect();
    bundle.write_text(&bundle.root().join(RESULTS_FILE), &results_csv(&rows))?;
    Ok(rows)
}

/// Results of every configured seed, read back from the bundle.
pub fn collect_results(config: &ExperimentConfig, bundle: &Bundle) -> Result<Vec<ResultRow>> {
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let path = bundle.path(seed, RESULTS_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => rows.extend(parse_results(&text).with_context(|| format!("parsing {}", path.display()))?),
            Err(_) => missing.push(path.display().to_string()),
        }
    }
    ensure!(missing.is_empty(), "incomplete bundle, missing artifacts: {}", missing.join(", "));
    Ok(rows)
}
