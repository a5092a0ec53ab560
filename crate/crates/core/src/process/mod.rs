//! Ground-truth latent causal process: a first-order Markov dynamic Bayesian
//! network with per-step interventions and an invertible observation function.
//!
//! Edges only go from step `t` to step `t + 1`. Mechanisms map the concatenated
//! parent values at `t` to the mean of a variable at `t + 1`; Gaussian noise is
//! added per variable and per step. Intervened variables are either resampled
//! uniformly from their range or shifted by a fixed offset.

mod trajectory;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, DenseNet};
use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;
use crate::transform::InvertibleMap;
use crate::Scalar;

pub use trajectory::{TargetMatrix, Trajectory};

/// Time-lagged causal graph over `K` possibly multidimensional variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalGraph {
    dims: Vec<usize>,
    parents: Vec<Vec<usize>>,
}

impl CausalGraph {
    /// `parents[i]` lists the variables at `t` feeding variable `i` at `t + 1` (0-based).
    pub fn new(dims: Vec<usize>, parents: Vec<Vec<usize>>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "every causal variable needs a positive dimension".into(),
            ));
        }
        ensure_dim("parent sets", dims.len(), parents.len())?;
        let k = dims.len();
        let mut parents = parents;
        for (i, ps) in parents.iter_mut().enumerate() {
            ps.sort_unstable();
            ps.dedup();
            if let Some(&p) = ps.iter().find(|&&p| p >= k) {
                return Err(Error::InvalidArgument(format!(
                    "variable {i} has parent {p} outside 0..{k}"
                )));
            }
        }
        Ok(CausalGraph { dims, parents })
    }

    /// Random lagged DAG over variables ordered `0..K`: edge `j → i` for `j < i`
    /// with probability `p_edge`, plus every self edge.
    pub fn random<R: Rng + ?Sized>(dims: Vec<usize>, p_edge: f64, rng: &mut R) -> Result<Self> {
        let k = dims.len();
        let parents = (0..k)
            .map(|i| {
                let mut ps: Vec<usize> = (0..i).filter(|_| rng.random_bool(p_edge)).collect();
                ps.push(i);
                ps
            })
            .collect();
        Self::new(dims, parents)
    }

    pub fn num_variables(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn offset(&self, i: usize) -> usize {
        self.dims[..i].iter().sum()
    }

    pub fn parent_dim(&self, i: usize) -> usize {
        self.parents[i].iter().map(|&p| self.dims[p]).sum()
    }

    /// Concatenated parent values of variable `i` taken from a full state vector.
    pub fn gather_parents<F: Scalar>(&self, i: usize, state: &[F]) -> Vec<F> {
        let mut out = Vec::with_capacity(self.parent_dim(i));
        for &p in &self.parents[i] {
            let o = self.offset(p);
            out.extend_from_slice(&state[o..o + self.dims[p]]);
        }
        out
    }
}

/// Largest slope of `swish`.
const SWISH_SLOPE: f64 = 1.0998;

/// Knobs for randomly drawn mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    /// Random hidden units per mechanism (in addition to the persistence units).
    pub hidden: usize,
    /// Range of the self-persistence coefficient.
    pub persistence: (f64, f64),
    /// Lipschitz bound of the random nonlinear part as a fraction of `1 − ρ`.
    pub coupling_gain: f64,
    pub noise_scale: f64,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        MechanismConfig {
            hidden: 8,
            persistence: (0.6, 0.85),
            coupling_gain: 0.8,
            noise_scale: 0.05,
        }
    }
}

/// One dense network per variable plus per-variable noise scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismSet<F> {
    nets: Vec<DenseNet<F>>,
    noise_scales: Vec<F>,
}

impl<F: Scalar> MechanismSet<F> {
    pub fn new(graph: &CausalGraph, nets: Vec<DenseNet<F>>, noise_scales: Vec<F>) -> Result<Self> {
        let k = graph.num_variables();
        ensure_dim("mechanism count", k, nets.len())?;
        ensure_dim("noise scale count", k, noise_scales.len())?;
        for (i, net) in nets.iter().enumerate() {
            ensure_dim(&format!("mechanism {i} input"), graph.parent_dim(i), net.input_dim())?;
            ensure_dim(&format!("mechanism {i} output"), graph.dims()[i], net.output_dim())?;
        }
        if noise_scales.iter().any(|s| *s < F::zero()) {
            return Err(Error::InvalidArgument("noise scales must be non-negative".into()));
        }
        Ok(MechanismSet { nets, noise_scales })
    }

    /// Random two-layer swish mechanisms.
    ///
    /// Each variable with a self edge keeps `ρ·(c − center)` of its own value
    /// through pairs of hidden units (`swish(x) − swish(−x) = x`), and receives a
    /// random nonlinear contribution from all of its parents. Biases put the
    /// fixed point at `centers` when every parent sits at its center.
    pub fn random<R: Rng + ?Sized>(
        graph: &CausalGraph,
        centers: &[Vec<F>],
        config: &MechanismConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let k = graph.num_variables();
        ensure_dim("mechanism centers", k, centers.len())?;
        let mut nets = Vec::with_capacity(k);
        for i in 0..k {
            let m = graph.dims()[i];
            let fan_in = graph.parent_dim(i);
            let self_pos = graph.parents(i).iter().position(|&p| p == i);
            let pairs = if self_pos.is_some() { 2 * m } else { 0 };
            let hidden = pairs + config.hidden;
            let mut net = DenseNet::zeros(&[fan_in, hidden, m], Activation::Swish)?;
            let rho = F::lit(rng.random_range(config.persistence.0..=config.persistence.1));
            let self_offset = self_pos.map(|pos| {
                graph.parents(i)[..pos]
                    .iter()
                    .map(|&p| graph.dims()[p])
                    .sum::<usize>()
            });
            {
                let w0 = net.weight_mut(0);
                if let Some(off) = self_offset {
                    for d in 0..m {
                        w0[(off + d) * hidden + 2 * d] = F::one();
                        w0[(off + d) * hidden + 2 * d + 1] = -F::one();
                    }
                }
                let std = 1.0 / (fan_in as f64).sqrt();
                for r in 0..fan_in {
                    for h in pairs..hidden {
                        let z: f64 = StandardNormal.sample(rng);
                        w0[r * hidden + h] = F::lit(z * std);
                    }
                }
            }
            {
                let b0 = net.bias_mut(0);
                for h in pairs..hidden {
                    let z: f64 = StandardNormal.sample(rng);
                    b0[h] = F::lit(0.5 * z);
                }
            }
            {
                let w1 = net.weight_mut(1);
                for d in 0..m {
                    if self_offset.is_some() {
                        w1[(2 * d) * m + d] = rho;
                        w1[(2 * d + 1) * m + d] = -rho;
                    }
                }
                for h in pairs..hidden {
                    for d in 0..m {
                        let z: f64 = StandardNormal.sample(rng);
                        w1[h * m + d] = F::lit(z);
                    }
                }
            }
            // Rescale the random part so each output's Lipschitz bound is
            // `coupling_gain · (1 − ρ)`, keeping the map contractive.
            let unit_l1: Vec<f64> = {
                let w0 = net.params().block_slice(0);
                (0..hidden)
                    .map(|h| (0..fan_in).map(|r| w0[r * hidden + h].as_f64().abs()).sum())
                    .collect()
            };
            {
                let w1 = net.weight_mut(1);
                for d in 0..m {
                    let bound: f64 = (pairs..hidden)
                        .map(|h| SWISH_SLOPE * unit_l1[h] * w1[h * m + d].as_f64().abs())
                        .sum();
                    if bound > 0.0 {
                        let s = F::lit(config.coupling_gain * (1.0 - rho.as_f64()) / bound);
                        for h in pairs..hidden {
                            w1[h * m + d] = w1[h * m + d] * s;
                        }
                    }
                }
            }
            // Place the fixed point at the center.
            let parent_center: Vec<F> = graph
                .parents(i)
                .iter()
                .flat_map(|&p| centers[p].iter().copied())
                .collect();
            let at_center = net.forward(&parent_center)?;
            let b1 = net.bias_mut(1);
            for d in 0..m {
                b1[d] = centers[i][d] - at_center[d];
            }
            nets.push(net);
        }
        let noise = vec![F::lit(config.noise_scale); k];
        Self::new(graph, nets, noise)
    }

    pub fn net(&self, i: usize) -> &DenseNet<F> {
        &self.nets[i]
    }

    pub fn noise_scale(&self, i: usize) -> F {
        self.noise_scales[i]
    }

    /// Mean of variable `i` at `t + 1` given the full state at `t`.
    pub fn mean(&self, graph: &CausalGraph, i: usize, state: &[F]) -> Vec<F> {
        self.nets[i]
            .forward(&graph.gather_parents(i, state))
            .expect("mechanism layout checked at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionKind {
    /// Replace the value with a uniform draw from the variable's range.
    HardResample,
    /// Add a fixed offset to the mechanism output.
    Shift,
}

/// Which variables are intervened at each step, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPolicy<F> {
    pub probabilities: Vec<f64>,
    /// Variables in one group always share their target bit.
    pub groups: Vec<Vec<usize>>,
    pub kind: InterventionKind,
    /// Per-variable uniform range (per dimension) for hard interventions.
    pub ranges: Vec<(F, F)>,
    /// Per-variable offset for shift interventions.
    pub shifts: Vec<F>,
}

impl<F: Scalar> InterventionPolicy<F> {
    pub fn hard(probability: f64, ranges: Vec<(F, F)>) -> Self {
        let k = ranges.len();
        InterventionPolicy {
            probabilities: vec![probability; k],
            groups: Vec::new(),
            kind: InterventionKind::HardResample,
            ranges,
            shifts: vec![F::zero(); k],
        }
    }

    pub fn num_variables(&self) -> usize {
        self.probabilities.len()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        ensure_dim("intervention probabilities", k, self.probabilities.len())?;
        ensure_dim("intervention ranges", k, self.ranges.len())?;
        ensure_dim("intervention shifts", k, self.shifts.len())?;
        if self.probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(
                "intervention probabilities must lie in [0, 1]".into(),
            ));
        }
        if self.ranges.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::InvalidArgument("empty intervention range".into()));
        }
        for g in &self.groups {
            if g.iter().any(|&v| v >= k) {
                return Err(Error::InvalidArgument(format!("group {g:?} out of range")));
            }
        }
        Ok(())
    }

    /// Group label per variable after merging `groups` with `extra` (union of overlapping groups).
    pub fn group_labels(&self, extra: &[Vec<usize>]) -> Vec<usize> {
        let k = self.num_variables();
        let mut parent: Vec<usize> = (0..k).collect();
        fn find(parent: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while parent[r] != r {
                r = parent[r];
            }
            let mut y = x;
            while parent[y] != r {
                let next = parent[y];
                parent[y] = r;
                y = next;
            }
            r
        }
        for g in self.groups.iter().chain(extra) {
            for w in g.windows(2) {
                let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        (0..k).map(|v| find(&mut parent, v)).collect()
    }

    /// One Bernoulli draw per group (using the probability of its lowest member).
    pub fn sample_targets<R: Rng + ?Sized>(&self, labels: &[usize], rng: &mut R) -> Vec<bool> {
        let k = self.num_variables();
        let mut bits = vec![false; k];
        for v in 0..k {
            let root = labels[v];
            if root == v {
                bits[v] = rng.random_bool(self.probabilities[v]);
            } else {
                bits[v] = bits[root];
            }
        }
        bits
    }

    pub(crate) fn draw_value<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> F {
        let (lo, hi) = self.ranges[i];
        lo + (hi - lo) * F::lit(rng.random::<f64>())
    }
}

/// Invertible observation function with optional additive Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel<F> {
    pub mixing: InvertibleMap<F>,
    /// Standard deviation of the observation noise; zero by default.
    pub noise_std: F,
}

impl<F: Scalar> ObservationModel<F> {
    pub fn noiseless(mixing: InvertibleMap<F>) -> Self {
        ObservationModel {
            mixing,
            noise_std: F::zero(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mixing.dim()
    }

    pub fn observe<R: Rng + ?Sized>(&self, c: &[F], rng: &mut R) -> Result<Vec<F>> {
        let mut x = self.mixing.apply(c)?;
        if self.noise_std > F::zero() {
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = *v + self.noise_std * F::lit(z);
            }
        }
        Ok(x)
    }
}

/// Recovers the causal state from a noiseless observation.
pub fn invert_observation<F: Scalar>(obs: &ObservationModel<F>, x: &[F]) -> Result<Vec<F>> {
    obs.mixing.invert(x)
}

/// Everything needed to sample trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalProcess<F> {
    pub graph: CausalGraph,
    pub mechanisms: MechanismSet<F>,
    pub policy: InterventionPolicy<F>,
    pub observation: ObservationModel<F>,
    /// First state; drawn uniformly from the intervention ranges when absent.
    pub initial_state: Option<Vec<F>>,
}

impl<F: Scalar> CausalProcess<F> {
    pub fn new(
        graph: CausalGraph,
        mechanisms: MechanismSet<F>,
        policy: InterventionPolicy<F>,
        observation: ObservationModel<F>,
    ) -> Result<Self> {
        let k = graph.num_variables();
        ensure_dim("mechanism count", k, mechanisms.nets.len())?;
        policy.validate(k)?;
        ensure_dim("observation dim", graph.total_dim(), observation.dim())?;
        Ok(CausalProcess {
            graph,
            mechanisms,
            policy,
            observation,
            initial_state: None,
        })
    }

    pub fn with_initial_state(mut self, state: Vec<F>) -> Result<Self> {
        ensure_dim("initial state", self.graph.total_dim(), state.len())?;
        self.initial_state = Some(state);
        Ok(self)
    }

    pub fn num_variables(&self) -> usize {
        self.graph.num_variables()
    }

    pub fn total_dim(&self) -> usize {
        self.graph.total_dim()
    }

    /// Edges whose lagged partial correlation is below `threshold` on `steps` samples.
    ///
    /// Weak edges are logged as warnings; they do not invalidate the process.
    pub fn faithfulness_warnings(&self, steps: usize, threshold: f64, seed: u64) -> Vec<(usize, usize)> {
        let traj = match simulate(self, None, &[], steps, seed) {
            Ok(t) => t,
            Err(_) => return Vec::new(),
        };
        let mut weak = Vec::new();
        let first = |i: usize| -> Vec<f64> {
            let o = self.graph.offset(i);
            traj.states.column(o).into_iter().map(|v| v.as_f64()).collect()
        };
        for j in 0..self.num_variables() {
            let target: Vec<f64> = first(j)[1..].to_vec();
            let parents = self.graph.parents(j);
            for &i in parents {
                if i == j {
                    continue;
                }
                let x: Vec<f64> = first(i)[..steps - 1].to_vec();
                let controls: Vec<Vec<f64>> = parents
                    .iter()
                    .filter(|&&p| p != i)
                    .map(|&p| first(p)[..steps - 1].to_vec())
                    .collect();
                let pc = partial_correlation(&x, &target, &controls);
                if !(pc.abs() >= threshold) {
                    warn!("edge {i} -> {j} looks unfaithful: partial correlation {pc:.4}");
                    weak.push((i, j));
                }
            }
        }
        weak
    }
}

fn residualize(y: &[f64], controls: &[Vec<f64>]) -> Vec<f64> {
    let n = y.len();
    let p = controls.len() + 1;
    let mut design = Matrix::<f64>::zeros(n, p);
    for t in 0..n {
        design[(t, 0)] = 1.0;
        for (c, col) in controls.iter().enumerate() {
            design[(t, c + 1)] = col[t];
        }
    }
    let gram = design.matmul_tn(&design);
    let rhs = design.matmul_tn(&Matrix::column_vector(y));
    match gram.inverse() {
        Some(inv) => {
            let beta = inv.matmul(&rhs);
            let fit = design.matmul(&beta);
            y.iter().enumerate().map(|(t, v)| v - fit[(t, 0)]).collect()
        }
        None => y.to_vec(),
    }
}

fn partial_correlation(x: &[f64], y: &[f64], controls: &[Vec<f64>]) -> f64 {
    let rx = residualize(x, controls);
    let ry = residualize(y, controls);
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let sxx: f64 = rx.iter().map(|a| a * a).sum();
    let syy: f64 = ry.iter().map(|a| a * a).sum();
    sxy / (sxx * syy).sqrt()
}

/// A block of variables observed through an invertible change of coordinates.
pub(crate) struct ChangeFrame<'a, F> {
    pub changed: &'a [usize],
    pub transform: &'a InvertibleMap<F>,
}

/// Samples `steps` states of `process`.
///
/// With a change frame, the changed variables are reported and intervened in
/// the transformed coordinates; hard interventions there draw a point uniformly
/// from the base ranges of the block and keep the intervened coordinate of its
/// image. Mechanisms always act in base coordinates and observations are always
/// taken of the base state.
pub(crate) fn simulate<F: Scalar>(
    process: &CausalProcess<F>,
    frame: Option<ChangeFrame<'_, F>>,
    extra_groups: &[Vec<usize>],
    steps: usize,
    seed: u64,
) -> Result<Trajectory<F>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "trajectory length must be at least 2, got {steps}"
        )));
    }
    let graph = &process.graph;
    let policy = &process.policy;
    let k = graph.num_variables();
    let d = graph.total_dim();
    let labels = policy.group_labels(extra_groups);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Changed block layout: base columns of the block and, per changed variable,
    // its position inside the block.
    let (block_cols, block_pos) = match &frame {
        Some(f) => {
            let mut cols = Vec::new();
            let mut pos = vec![None; k];
            for &v in f.changed {
                pos[v] = Some(cols.len());
                let o = graph.offset(v);
                cols.extend(o..o + graph.dims()[v]);
            }
            ensure_dim("change transform", cols.len(), f.transform.dim())?;
            (cols, pos)
        }
        None => (Vec::new(), vec![None; k]),
    };

    let to_env = |base: &[F]| -> Result<Vec<F>> {
        let mut env = base.to_vec();
        if let Some(f) = &frame {
            let block: Vec<F> = block_cols.iter().map(|&c| base[c]).collect();
            let mapped = f.transform.apply(&block)?;
            for (&c, v) in block_cols.iter().zip(mapped) {
                env[c] = v;
            }
        }
        Ok(env)
    };

    let mut base = match &process.initial_state {
        Some(s) => s.clone(),
        None => {
            let mut s = vec![F::zero(); d];
            for i in 0..k {
                let o = graph.offset(i);
                for dd in 0..graph.dims()[i] {
                    s[o + dd] = policy.draw_value(i, &mut rng);
                }
            }
            s
        }
    };

    let mut states = Vec::with_capacity(steps * d);
    let mut observations = Vec::with_capacity(steps * d);
    let mut targets = TargetMatrix::zeros(steps, k);
    states.extend(to_env(&base)?);
    observations.extend(process.observation.observe(&base, &mut rng)?);

    for t in 1..steps {
        let bits = policy.sample_targets(&labels, &mut rng);
        let mut next = vec![F::zero(); d];
        for i in 0..k {
            let o = graph.offset(i);
            let mean = process.mechanisms.mean(graph, i, &base);
            let sigma = process.mechanisms.noise_scale(i);
            for (dd, m) in mean.into_iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                next[o + dd] = m + sigma * F::lit(z);
            }
        }

        // Changed block: intervene in transformed coordinates.
        if let Some(f) = &frame {
            if f.changed.iter().any(|&v| bits[v]) {
                let block: Vec<F> = block_cols.iter().map(|&c| next[c]).collect();
                let mut env_block = f.transform.apply(&block)?;
                let mut block_offset = 0;
                for &v in f.changed {
                    let m = graph.dims()[v];
                    if bits[v] {
                        match policy.kind {
                            InterventionKind::HardResample => {
                                let draw: Vec<F> = f
                                    .changed
                                    .iter()
                                    .flat_map(|&u| {
                                        (0..graph.dims()[u]).map(move |_| u).collect::<Vec<_>>()
                                    })
                                    .map(|u| policy.draw_value(u, &mut rng))
                                    .collect();
                                let image = f.transform.apply(&draw)?;
                                env_block[block_offset..block_offset + m]
                                    .copy_from_slice(&image[block_offset..block_offset + m]);
                            }
                            InterventionKind::Shift => {
                                for v2 in &mut env_block[block_offset..block_offset + m] {
                                    *v2 = *v2 + policy.shifts[v];
                                }
                            }
                        }
                    }
                    block_offset += m;
                }
                let back = f.transform.invert(&env_block)?;
                for (&c, v) in block_cols.iter().zip(back) {
                    next[c] = v;
                }
            }
        }

        for i in 0..k {
            if !bits[i] || block_pos[i].is_some() {
                continue;
            }
            let o = graph.offset(i);
            for dd in 0..graph.dims()[i] {
                next[o + dd] = match policy.kind {
                    InterventionKind::HardResample => policy.draw_value(i, &mut rng),
                    InterventionKind::Shift => next[o + dd] + policy.shifts[i],
                };
            }
        }

        base = next;
        states.extend(to_env(&base)?);
        observations.extend(process.observation.observe(&base, &mut rng)?);
        targets.row_mut(t).copy_from_slice(&bits);
    }

    Trajectory::new(
        graph.dims().to_vec(),
        Matrix::from_vec(steps, d, states)?,
        Matrix::from_vec(steps, d, observations)?,
        targets,
        seed,
    )
}

/// Samples a trajectory of length `steps` from the process in its own coordinates.
pub fn sample_trajectory<F: Scalar>(
    process: &CausalProcess<F>,
    steps: usize,
    seed: u64,
) -> Result<Trajectory<F>> {
    simulate(process, None, &[], steps, seed)
}

#[cfg(test)]
mod tests;
