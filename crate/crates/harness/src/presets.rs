//! Named synthetic environments and the per-seed construction of their specs.

use anyhow::{bail, ensure, Context, Result};
use decaf_core::env::{ChangeTransform, CompositionSpec, EnvironmentSpec, VariablePartition};
use decaf_core::process::{
    CausalGraph, CausalProcess, InterventionPolicy, MechanismConfig, MechanismSet, ObservationModel,
};
use decaf_core::transform::{AffineCouplingFlow, InvertibleMap};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seeds::{rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PresetName {
    VoronoiLike,
    PongLike,
    C3dLike,
}

impl PresetName {
    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::VoronoiLike => "voronoi-like",
            PresetName::PongLike => "pong-like",
            PresetName::C3dLike => "c3d-like",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GraphSpec {
    /// Random lagged DAG with self edges.
    Random { p_edge: f64 },
    Fixed { parents: Vec<Vec<usize>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MixingSpec {
    Identity,
    RandomAffine { scale: (f64, f64) },
    Coupling { layers: usize, hidden: usize, strength: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChangeSpec {
    Identity,
    Rotation { degrees: f64 },
    RandomAffine { scale: (f64, f64), offset_std: f64 },
    Polar { origin: [f64; 2] },
    Coupling { layers: usize, strength: f64 },
}

/// Everything needed to build the environments of one benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub variables: Vec<String>,
    pub graph: GraphSpec,
    /// Per-variable intervention range; its midpoint is the mechanism's fixed point.
    pub ranges: Vec<(f64, f64)>,
    pub intervention_probability: f64,
    pub mechanism: MechanismConfig,
    pub mixing: MixingSpec,
    /// Variables whose coordinates change in the target.
    pub changed: Vec<usize>,
    pub change: ChangeSpec,
    /// Variables sharing one target bit in the coarsened composition source.
    pub coarse_group: Vec<usize>,
    pub tau: f64,
    pub target_samples: usize,
    pub flow_depth: usize,
    pub beta_alo: f64,
    pub beta_reg: f64,
}

impl Preset {
    pub fn builtin(name: PresetName) -> Self {
        let mechanism = MechanismConfig::default();
        let mixing = MixingSpec::Coupling {
            layers: 4,
            hidden: 16,
            strength: 0.5,
        };
        match name {
            PresetName::VoronoiLike => Preset {
                name: name.as_str().into(),
                variables: (0..6).map(|i| format!("tile{i}")).collect(),
                graph: GraphSpec::Random { p_edge: 0.4 },
                ranges: vec![(-2.0, 2.0); 6],
                intervention_probability: 0.15,
                mechanism,
                mixing,
                changed: vec![0, 1, 2],
                change: ChangeSpec::RandomAffine {
                    scale: (0.5, 1.5),
                    offset_std: 0.5,
                },
                coarse_group: vec![4, 5],
                tau: 0.15,
                target_samples: 750,
                flow_depth: 2,
                beta_alo: 4.0,
                beta_reg: 4.0,
            },
            PresetName::PongLike => Preset {
                name: name.as_str().into(),
                variables: ["ball-x", "ball-y", "paddle-l", "paddle-r"].map(String::from).to_vec(),
                graph: GraphSpec::Fixed {
                    parents: vec![vec![0, 1], vec![0, 1], vec![1, 2], vec![1, 3]],
                },
                ranges: vec![(0.5, 2.5), (-1.5, 1.5), (-1.5, 1.5), (-1.5, 1.5)],
                intervention_probability: 0.15,
                mechanism,
                mixing,
                changed: vec![0, 1],
                change: ChangeSpec::Polar { origin: [0.0, -1.5] },
                coarse_group: vec![2, 3],
                tau: 0.2,
                target_samples: 5000,
                flow_depth: 4,
                beta_alo: 2.0,
                beta_reg: 2.0,
            },
            PresetName::C3dLike => Preset {
                name: name.as_str().into(),
                variables: ["pos-x", "pos-y", "pos-z", "rot-alpha", "hue-obj", "hue-spot", "hue-bg"]
                    .map(String::from)
                    .to_vec(),
                graph: GraphSpec::Fixed {
                    parents: vec![
                        vec![0, 3],
                        vec![1, 3],
                        vec![0, 1, 2],
                        vec![3],
                        vec![4, 6],
                        vec![2, 5],
                        vec![6],
                    ],
                },
                ranges: vec![(-2.0, 2.0); 7],
                intervention_probability: 0.15,
                mechanism,
                mixing,
                changed: vec![0, 1],
                change: ChangeSpec::Rotation { degrees: 30.0 },
                coarse_group: vec![4, 5, 6],
                tau: 0.1,
                target_samples: 1000,
                flow_depth: 4,
                beta_alo: 2.0,
                beta_reg: 2.0,
            },
        }
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_variables();
        ensure!(k > 0, "preset {} has no variables", self.name);
        ensure!(self.ranges.len() == k, "preset {}: {} ranges for {k} variables", self.name, self.ranges.len());
        if let GraphSpec::Fixed { parents } = &self.graph {
            ensure!(parents.len() == k, "preset {}: {} parent sets for {k} variables", self.name, parents.len());
        }
        let in_range = |v: &usize| *v < k;
        ensure!(self.changed.iter().all(in_range), "changed variable out of range");
        ensure!(self.coarse_group.iter().all(in_range), "coarse variable out of range");
        ensure!(
            self.coarse_group.is_empty() || self.coarse_group.len() >= 2,
            "a coarse group needs at least two variables"
        );
        ensure!(
            !self.coarse_group.iter().any(|v| self.changed.contains(v)),
            "coarse group and changed set overlap"
        );
        ensure!((0.0..1.0).contains(&self.tau), "tau {} outside [0, 1)", self.tau);
        if let ChangeSpec::Polar { .. } = self.change {
            ensure!(self.changed.len() == 2, "polar change needs exactly two 1-d variables");
        }
        Ok(())
    }

    /// Base process shared by every environment of `seed`.
    pub fn base_process(&self, seed: u64) -> Result<CausalProcess<f64>> {
        self.validate()?;
        let k = self.num_variables();
        let dims = vec![1; k];
        let mut r = rng(seed, Stream::Process);
        let graph = match &self.graph {
            GraphSpec::Random { p_edge } => CausalGraph::random(dims, *p_edge, &mut r)?,
            GraphSpec::Fixed { parents } => {
                let parents = parents
                    .iter()
                    .enumerate()
                    .map(|(i, ps)| {
                        let mut ps = ps.clone();
                        ps.push(i);
                        ps
                    })
                    .collect();
                CausalGraph::new(dims, parents)?
            }
        };
        let centers: Vec<Vec<f64>> = self.ranges.iter().map(|(lo, hi)| vec![0.5 * (lo + hi)]).collect();
        let mechanisms = MechanismSet::random(&graph, &centers, &self.mechanism, &mut r)?;
        let policy = InterventionPolicy::hard(self.intervention_probability, self.ranges.clone());
        let mixing = self.mixing(&mut rng(seed, Stream::Mixing))?;
        let process = CausalProcess::new(graph, mechanisms, policy, ObservationModel::noiseless(mixing))?;
        Ok(process)
    }

    fn mixing(&self, r: &mut ChaCha8Rng) -> Result<InvertibleMap<f64>> {
        let d = self.num_variables();
        Ok(match &self.mixing {
            MixingSpec::Identity => InvertibleMap::identity(d),
            MixingSpec::RandomAffine { scale } => InvertibleMap::random_affine(d, scale.0, scale.1, 0.0, r)?,
            MixingSpec::Coupling {
                layers,
                hidden,
                strength,
            } => InvertibleMap::Coupling(AffineCouplingFlow::random(d, *layers, *hidden, *strength, r)?),
        })
    }

    pub fn change_transform(&self, seed: u64) -> Result<ChangeTransform<f64>> {
        let d = self.changed.len();
        let mut r = rng(seed, Stream::Change);
        Ok(match &self.change {
            ChangeSpec::Identity => ChangeTransform::identity(d),
            ChangeSpec::Rotation { degrees } => ChangeTransform::rotation(d, *degrees)?,
            ChangeSpec::RandomAffine { scale, offset_std } => {
                ChangeTransform::random_affine(d, *scale, *offset_std, &mut r)?
            }
            ChangeSpec::Polar { origin } => {
                if d != 2 {
                    bail!("polar change needs a 2-d block, got {d}");
                }
                ChangeTransform::polar(*origin)
            }
            ChangeSpec::Coupling { layers, strength } => ChangeTransform::coupling(d, *layers, *strength, &mut r)?,
        })
    }

    fn changed_env(&self, name: &str, process: CausalProcess<f64>, seed: u64) -> Result<EnvironmentSpec<f64>> {
        let mut env = EnvironmentSpec::base(name, process);
        env.partition = VariablePartition::new(self.num_variables(), &self.changed)?;
        env.transform = self.change_transform(seed)?;
        env.validate()?;
        Ok(env)
    }

    /// `(source, target)`; with `identity` the target equals the source.
    pub fn adaptation_specs(&self, seed: u64, identity: bool) -> Result<(EnvironmentSpec<f64>, EnvironmentSpec<f64>)> {
        let process = self.base_process(seed)?;
        let source = EnvironmentSpec::base("source", process.clone());
        let target = if identity {
            EnvironmentSpec::base("target", process)
        } else {
            self.changed_env("target", process, seed)?
        };
        Ok((source, target))
    }

    /// Two sources and a base target: one source coarsens `coarse_group`,
    /// the other changes `changed`.
    pub fn composition_specs(&self, seed: u64) -> Result<CompositionSpec<f64>> {
        ensure!(
            !self.coarse_group.is_empty() && !self.changed.is_empty(),
            "preset {} needs both a coarse group and a changed set to compose",
            self.name
        );
        let k = self.num_variables();
        let process = self.base_process(seed)?;
        let mut coarse = EnvironmentSpec::base("coarse", process.clone());
        coarse.coarsening = vec![self.coarse_group.clone()];
        coarse.no_overlap = true;
        coarse.validate()?;
        let changed = self.changed_env("changed", process.clone(), seed)?;
        let target = EnvironmentSpec::base("target", process);
        let shared = vec![
            (0..k).filter(|v| !self.coarse_group.contains(v)).collect(),
            (0..k).filter(|v| !self.changed.contains(v)).collect(),
        ];
        CompositionSpec::new(vec![coarse, changed], target, shared).context("composition spec")
    }
}
