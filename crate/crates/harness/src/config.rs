//! Experiment configuration, read from JSON.

use std::fmt;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use decaf_core::classifier::{ClassifierConfig, DetectionCriterion};
use decaf_core::flow::{AdaptationConfig, TrainConfig};
use decaf_core::metrics::MetricKind;
use decaf_core::representation::{EncoderKind, LinearEncoderConfig};
use serde::{Deserialize, Serialize};

use crate::presets::{Preset, PresetName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Adapt,
    Compose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Baseline {
    #[serde(rename = "0shot")]
    ZeroShot,
    #[serde(rename = "ft")]
    FineTune,
    #[serde(rename = "decaf")]
    Decaf,
    #[serde(rename = "scratch")]
    Scratch,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::ZeroShot => "0shot",
            Baseline::FineTune => "ft",
            Baseline::Decaf => "decaf",
            Baseline::Scratch => "scratch",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A built-in preset by name or a full custom definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PresetRef {
    Named(PresetName),
    Custom(Box<Preset>),
}

impl PresetRef {
    pub fn resolve(&self) -> Preset {
        match self {
            PresetRef::Named(n) => Preset::builtin(*n),
            PresetRef::Custom(p) => (**p).clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: PresetRef,
    pub task: Task,
    pub encoder: EncoderKind,
    pub baselines: Vec<Baseline>,
    pub source_samples: usize,
    /// Trailing source steps held out for the source error rates.
    pub source_rate_window: usize,
    /// Target budgets; the preset's budget when absent.
    pub target_samples: Option<Vec<usize>>,
    pub seeds: Vec<u64>,
    /// Detection threshold; the preset's when absent.
    pub tau: Option<f64>,
    pub criterion: DetectionCriterion,
    pub metrics: Vec<MetricKind>,
    /// Use the source environment as target.
    pub identity_control: bool,
    pub classifier: ClassifierConfig,
    /// Flow settings; depth and regularizer weights default to the preset's.
    pub adaptation: Option<AdaptationConfig>,
    /// When set, adaptation epochs are chosen per budget to give this many optimizer steps.
    pub adaptation_steps: Option<usize>,
    pub linear: LinearEncoderConfig,
    pub fine_tune: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut fine_tune = LinearEncoderConfig::default().train;
        fine_tune.epochs = 200;
        ExperimentConfig {
            preset: PresetRef::Named(PresetName::PongLike),
            task: Task::Adapt,
            encoder: EncoderKind::Oracle,
            baselines: vec![Baseline::ZeroShot, Baseline::FineTune, Baseline::Decaf, Baseline::Scratch],
            source_samples: 50_000,
            source_rate_window: 5_000,
            target_samples: None,
            seeds: vec![0],
            tau: None,
            criterion: DetectionCriterion::FprOnly,
            metrics: vec![MetricKind::Spearman, MetricKind::R2],
            identity_control: false,
            classifier: ClassifierConfig::default(),
            adaptation: None,
            adaptation_steps: Some(500),
            linear: LinearEncoderConfig::default(),
            fine_tune,
        }
    }
}

impl ExperimentConfig {
    pub fn for_preset(name: PresetName, task: Task) -> Self {
        ExperimentConfig {
            preset: PresetRef::Named(name),
            task,
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(&self) -> Preset {
        self.preset.resolve()
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or_else(|| self.preset().tau)
    }

    pub fn budgets(&self) -> Vec<usize> {
        self.target_samples
            .clone()
            .unwrap_or_else(|| vec![self.preset().target_samples])
    }

    pub fn max_budget(&self) -> usize {
        self.budgets().into_iter().max().unwrap_or(0)
    }

    pub fn adaptation(&self) -> AdaptationConfig {
        self.adaptation.clone().unwrap_or_else(|| {
            let p = self.preset();
            let mut a = AdaptationConfig::default();
            a.flow_depth = p.flow_depth;
            a.train.beta_alo = p.beta_alo;
            a.train.beta_reg = p.beta_reg;
            a
        })
    }

    /// Adaptation settings for `samples` target steps.
    pub fn adaptation_for(&self, samples: usize) -> AdaptationConfig {
        let mut a = self.adaptation();
        if let Some(steps) = self.adaptation_steps {
            let per_epoch = samples.saturating_sub(1).div_ceil(a.train.batch_size.max(1)).max(1);
            a.train.epochs = steps.div_ceil(per_epoch);
        }
        a
    }

    /// Whether `b` produces rows under this configuration.
    pub fn applicable(&self, b: Baseline) -> bool {
        !(b == Baseline::FineTune && self.encoder == EncoderKind::Oracle)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.seeds.is_empty(), "seed list is empty");
        ensure!(!self.baselines.is_empty(), "no baselines selected");
        ensure!(!self.metrics.is_empty(), "no metrics selected");
        let budgets = self.budgets();
        ensure!(!budgets.is_empty(), "no target budgets");
        ensure!(budgets.iter().all(|&b| b >= 10), "target budgets must be at least 10 samples");
        ensure!(
            self.source_rate_window >= 10 && self.source_rate_window + 10 <= self.source_samples,
            "source rate window {} does not fit in {} source samples",
            self.source_rate_window,
            self.source_samples
        );
        let tau = self.tau();
        ensure!((0.0..1.0).contains(&tau), "tau {tau} outside [0, 1)");
        self.preset().validate()?;
        Ok(())
    }
}
