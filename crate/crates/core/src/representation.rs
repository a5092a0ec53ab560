//! Latent representations, the assignment `ψ` from latent dims to causal
//! variables, and the oracle and learned-linear encoders.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ChangeTransform, EnvironmentSpec};
use crate::error::{ensure_dim, Error, Result};
use crate::flow::{Flow, LinearFlow, TrainConfig, TrainStats, TransitionModel};
use crate::matrix::Matrix;
use crate::metrics::spearman;
use crate::process::{invert_observation, ObservationModel, Trajectory};
use crate::Scalar;

/// Map from latent dims to causal variables (`None` is the unassigned slot).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    map: Vec<Option<usize>>,
    num_vars: usize,
}

impl Assignment {
    pub fn new(map: Vec<Option<usize>>, num_vars: usize) -> Result<Self> {
        if let Some(v) = map.iter().flatten().find(|&&v| v >= num_vars) {
            return Err(Error::InvalidArgument(format!(
                "assignment names variable {v} outside 0..{num_vars}"
            )));
        }
        Ok(Assignment { map, num_vars })
    }

    /// Consecutive blocks of `dims[i]` latents per variable.
    pub fn identity_blocks(dims: &[usize]) -> Self {
        let map = dims
            .iter()
            .enumerate()
            .flat_map(|(i, &m)| std::iter::repeat_n(Some(i), m))
            .collect();
        Assignment {
            map,
            num_vars: dims.len(),
        }
    }

    pub fn num_latents(&self) -> usize {
        self.map.len()
    }

    pub fn num_variables(&self) -> usize {
        self.num_vars
    }

    pub fn get(&self, d: usize) -> Option<usize> {
        self.map[d]
    }

    pub fn set(&mut self, d: usize, v: Option<usize>) -> Result<()> {
        if let Some(v) = v {
            if v >= self.num_vars {
                return Err(Error::InvalidArgument(format!("variable {v} outside 0..{}", self.num_vars)));
            }
        }
        self.map[d] = v;
        Ok(())
    }

    pub fn as_slice(&self) -> &[Option<usize>] {
        &self.map
    }

    /// Dims assigned to variable `i`, ascending; empty assignments are an error.
    pub fn dims_of(&self, i: usize) -> Result<Vec<usize>> {
        let dims: Vec<usize> = (0..self.map.len()).filter(|&d| self.map[d] == Some(i)).collect();
        if dims.is_empty() {
            Err(Error::EmptyAssignment(i))
        } else {
            Ok(dims)
        }
    }

    pub fn unassigned(&self) -> Vec<usize> {
        (0..self.map.len()).filter(|&d| self.map[d].is_none()).collect()
    }

    /// Whether the `M ≥ K + 1` condition for an unassigned slot holds.
    pub fn has_room_for_unassigned(&self) -> bool {
        self.map.len() > self.num_vars
    }

    /// Variables without any latent dim.
    pub fn missing_variables(&self) -> Vec<usize> {
        (0..self.num_vars).filter(|&i| !self.map.contains(&Some(i))).collect()
    }
}

/// Latent values per step with their assignment and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSequence<F> {
    pub values: Matrix<F>,
    pub assignment: Assignment,
    pub environment: String,
    pub encoder: String,
}

impl<F: Scalar> LatentSequence<F> {
    pub fn new(values: Matrix<F>, assignment: Assignment, environment: impl Into<String>, encoder: impl Into<String>) -> Result<Self> {
        ensure_dim("latent dims", assignment.num_latents(), values.cols())?;
        Ok(LatentSequence {
            values,
            assignment,
            environment: environment.into(),
            encoder: encoder.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// One `T × |ψ_i|` block per variable; variables without dims yield `None`.
    pub fn blocks(&self) -> Vec<Option<Matrix<F>>> {
        (0..self.assignment.num_variables())
            .map(|i| self.assignment.dims_of(i).ok().map(|d| self.values.select_cols(&d)))
            .collect()
    }
}

/// Columns `ψ⁻¹(i)` of the latents, in ascending dim order.
pub fn slice_latents<F: Scalar>(seq: &LatentSequence<F>, i: usize) -> Result<Matrix<F>> {
    if i >= seq.assignment.num_variables() {
        return Err(Error::InvalidArgument(format!("variable {i} out of range")));
    }
    Ok(seq.values.select_cols(&seq.assignment.dims_of(i)?))
}

/// Assigns each latent dim to the variable with highest `|Spearman|`
/// against that variable's first ground-truth dim.
///
/// Ties go to the lowest variable; dims whose best score is below `0.1`, and
/// constant dims, stay unassigned.
pub fn fit_assignment<F: Scalar>(latents: &Matrix<F>, truth: &Matrix<F>, dims: &[usize]) -> Result<Assignment> {
    const THRESHOLD: f64 = 0.1;
    ensure_dim("truth rows", latents.rows(), truth.rows())?;
    ensure_dim("truth dims", dims.iter().sum(), truth.cols())?;
    if latents.rows() < 30 {
        return Err(Error::InvalidArgument(format!(
            "fit_assignment needs at least 30 steps, got {}",
            latents.rows()
        )));
    }
    let firsts: Vec<Vec<F>> = (0..dims.len())
        .map(|i| truth.column(dims[..i].iter().sum()))
        .collect();
    let mut map = Vec::with_capacity(latents.cols());
    for d in 0..latents.cols() {
        let col = latents.column(d);
        let mut best: Option<(usize, f64)> = None;
        let mut constant = false;
        for (i, t) in firsts.iter().enumerate() {
            match spearman(&col, t) {
                Ok(rho) => {
                    if best.is_none_or(|(_, b)| rho.abs() > b) {
                        best = Some((i, rho.abs()));
                    }
                }
                Err(Error::UndefinedRank) => {
                    let latent_constant = col.iter().all(|v| *v == col[0]);
                    if latent_constant {
                        constant = true;
                        break;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        if constant {
            warn!("latent dim {d} is constant; left unassigned");
            map.push(None);
            continue;
        }
        map.push(best.filter(|&(_, s)| s >= THRESHOLD).map(|(i, _)| i));
    }
    Assignment::new(map, dims.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Oracle,
    LearnedLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum EncoderBody<F> {
    Oracle {
        observation: ObservationModel<F>,
        changed_columns: Vec<usize>,
        change: ChangeTransform<F>,
    },
    LearnedLinear {
        model: TransitionModel<F>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEncoderConfig {
    pub prior_hidden: usize,
    pub classifier_hidden: usize,
    pub sigma_floor: f64,
    pub train: TrainConfig,
}

impl Default for LinearEncoderConfig {
    fn default() -> Self {
        LinearEncoderConfig {
            prior_hidden: 64,
            classifier_hidden: 32,
            sigma_floor: 1e-3,
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 512,
                epochs: 20,
                warmup_steps: 100,
                weight_decay: 5e-3,
                classifier_weight: 2.0,
                beta_alo: 2.0,
                beta_reg: 0.0,
                seed: 0,
                track_curve: false,
            },
        }
    }
}

/// Maps observations to latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder<F> {
    pub kind: EncoderKind,
    /// Environment the encoder was built for.
    pub environment: String,
    pub assignment: Assignment,
    body: EncoderBody<F>,
}

impl<F: Scalar> Encoder<F> {
    /// Exact inverse of the observation followed by the environment's change.
    pub fn oracle(spec: &EnvironmentSpec<F>) -> Self {
        Encoder {
            kind: EncoderKind::Oracle,
            environment: spec.name.clone(),
            assignment: Assignment::identity_blocks(spec.dims()),
            body: EncoderBody::Oracle {
                observation: spec.process.observation.clone(),
                changed_columns: spec.changed_columns(),
                change: spec.transform.clone(),
            },
        }
    }

    /// Fits `z = x·A + b` by maximum likelihood under a transition prior over
    /// all variables, then matches dims to ground truth.
    pub fn train_linear(traj: &Trajectory<F>, environment: &str, config: &LinearEncoderConfig) -> Result<(Self, TrainStats)> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut flow = Flow::Linear(LinearFlow::identity(traj.observations.cols()));
        flow.init_from_data(&traj.observations);
        let model = TransitionModel::new(
            flow,
            traj.num_variables(),
            config.prior_hidden,
            config.classifier_hidden,
            config.sigma_floor,
            &mut rng,
        )?;
        let mut enc = Encoder {
            kind: EncoderKind::LearnedLinear,
            environment: environment.to_string(),
            assignment: Assignment::identity_blocks(&traj.dims),
            body: EncoderBody::LearnedLinear { model },
        };
        let stats = enc.continue_training(traj, &config.train)?;
        Ok((enc, stats))
    }

    /// Further trains a learned encoder on `traj` and refits `ψ` on its ground truth.
    pub fn continue_training(&mut self, traj: &Trajectory<F>, train: &TrainConfig) -> Result<TrainStats> {
        let EncoderBody::LearnedLinear { model } = &mut self.body else {
            return Err(Error::InvalidArgument("the oracle encoder has no parameters to train".into()));
        };
        let stats = model.fit(&traj.observations, &traj.targets, train)?;
        let (z, _) = model.flow.forward(&traj.observations)?;
        self.assignment = fit_assignment(&z, &traj.states, &traj.dims)?;
        Ok(stats)
    }

    pub fn input_dim(&self) -> usize {
        match &self.body {
            EncoderBody::Oracle { observation, .. } => observation.dim(),
            EncoderBody::LearnedLinear { model } => model.flow.dim(),
        }
    }

    pub fn transition_model(&self) -> Option<&TransitionModel<F>> {
        match &self.body {
            EncoderBody::LearnedLinear { model } => Some(model),
            EncoderBody::Oracle { .. } => None,
        }
    }

    pub fn encode_matrix(&self, x: &Matrix<F>) -> Result<Matrix<F>> {
        ensure_dim("encoder input", self.input_dim(), x.cols())?;
        match &self.body {
            EncoderBody::Oracle {
                observation,
                changed_columns,
                change,
            } => {
                let mut out = Vec::with_capacity(x.len());
                for t in 0..x.rows() {
                    let mut c = invert_observation(observation, x.row(t))?;
                    if !change.is_identity() && !changed_columns.is_empty() {
                        let block: Vec<F> = changed_columns.iter().map(|&j| c[j]).collect();
                        for (&j, v) in changed_columns.iter().zip(change.map.apply(&block)?) {
                            c[j] = v;
                        }
                    }
                    out.extend(c);
                }
                Matrix::from_vec(x.rows(), x.cols(), out)
            }
            EncoderBody::LearnedLinear { model } => Ok(model.flow.forward(x)?.0),
        }
    }
}

/// Encodes every observation of `traj`.
pub fn encode<F: Scalar>(enc: &Encoder<F>, traj: &Trajectory<F>, environment: &str) -> Result<LatentSequence<F>> {
    let values = enc.encode_matrix(&traj.observations)?;
    let name = match enc.kind {
        EncoderKind::Oracle => format!("oracle@{}", enc.environment),
        EncoderKind::LearnedLinear => format!("linear@{}", enc.environment),
    };
    LatentSequence::new(values, enc.assignment.clone(), environment, name)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::process::{sample_trajectory, CausalGraph, CausalProcess, InterventionPolicy, MechanismConfig, MechanismSet};
    use crate::transform::InvertibleMap;

    fn process(dims: Vec<usize>, mixing: InvertibleMap<f64>, seed: u64) -> CausalProcess<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = CausalGraph::random(dims, 0.4, &mut rng).unwrap();
        let centers: Vec<Vec<f64>> = graph.dims().iter().map(|&m| vec![0.0; m]).collect();
        let mech = MechanismSet::random(&graph, &centers, &MechanismConfig::default(), &mut rng).unwrap();
        let k = graph.num_variables();
        let policy = InterventionPolicy::hard(0.1, vec![(-2.0, 2.0); k]);
        CausalProcess::new(graph, mech, policy, ObservationModel::noiseless(mixing)).unwrap()
    }

    #[test]
    fn oracle_identity_mixing_copies_observations() {
        let p = process(vec![1, 2], InvertibleMap::identity(3), 1);
        let spec = EnvironmentSpec::base("src", p.clone());
        let traj = sample_trajectory(&p, 100, 2).unwrap();
        let z = encode(&Encoder::oracle(&spec), &traj, "src").unwrap();
        assert_eq!(z.values, traj.observations);
    }

    #[test]
    fn oracle_rotation_mixing_recovers_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rot = InvertibleMap::random_rotation(4, &mut rng).unwrap();
        let p = process(vec![1, 1, 2], rot, 3);
        let spec = EnvironmentSpec::base("src", p.clone());
        let traj = sample_trajectory(&p, 1000, 2).unwrap();
        let z = encode(&Encoder::oracle(&spec), &traj, "src").unwrap();
        assert!(z.values.max_abs_diff(&traj.states) <= 1e-9);
    }

    #[test]
    fn slicing_by_assignment() {
        let values = Matrix::from_rows(&[[0.0, 1.0, 2.0, 3.0, 4.0]]).unwrap();
        let seq = LatentSequence::new(values, Assignment::identity_blocks(&[2, 1, 2]), "e", "x").unwrap();
        assert_eq!(slice_latents(&seq, 2).unwrap().as_slice(), &[3.0, 4.0]);
        let sparse = Assignment::new(vec![Some(0), None, Some(0), None, None], 2).unwrap();
        let seq = LatentSequence::new(seq.values.clone(), sparse, "e", "x").unwrap();
        assert!(matches!(slice_latents(&seq, 1), Err(Error::EmptyAssignment(1))));
    }

    #[test]
    fn permuted_truth_recovers_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = Matrix::from_vec(200, 4, (0..800).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let perm = [2, 0, 3, 1];
        let latents = truth.select_cols(&perm);
        let a = fit_assignment(&latents, &truth, &[1, 1, 1, 1]).unwrap();
        for (d, &p) in perm.iter().enumerate() {
            assert_eq!(a.get(d), Some(p));
        }
    }

    #[test]
    fn noise_latents_stay_unassigned() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = Matrix::from_vec(1000, 3, (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let noise = Matrix::from_vec(1000, 4, (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = fit_assignment(&noise, &truth, &[1, 1, 1]).unwrap();
        assert_eq!(a.unassigned(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn copy_of_one_variable() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let truth = Matrix::from_vec(100, 4, (0..400).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = fit_assignment(&truth.select_cols(&[2]), &truth, &[1, 1, 1, 1]).unwrap();
        assert_eq!(a.get(0), Some(2));
        let constant = Matrix::filled(100, 1, 3.0);
        assert_eq!(fit_assignment(&constant, &truth, &[1, 1, 1, 1]).unwrap().get(0), None);
        assert!(fit_assignment(&truth.row_range(0, 10), &truth.row_range(0, 10), &[1, 1, 1, 1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn slices_partition_latent_dims(map in proptest::collection::vec(proptest::option::of(0usize..4), 1..12)) {
            let a = Assignment::new(map.clone(), 4).unwrap();
            let mut seen = a.unassigned();
            for i in 0..4 {
                if let Ok(d) = a.dims_of(i) {
                    let brute: Vec<usize> = (0..map.len()).filter(|&j| map[j] == Some(i)).collect();
                    prop_assert_eq!(&d, &brute);
                    seen.extend(d);
                }
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..map.len()).collect::<Vec<_>>());
        }

        #[test]
        fn assignment_invariant_to_monotone_maps(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = Matrix::from_vec(60, 3, (0..180).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let noisy = truth.map(|v| v + 0.0).zip_map(
                &Matrix::from_vec(60, 3, (0..180).map(|_| rng.random_range(-0.8..0.8)).collect()).unwrap(),
                |a, b| a + b,
            );
            let mapped = noisy.map(|v: f64| v.powi(3) + 2.0 * v);
            let a = fit_assignment(&noisy, &truth, &[1, 1, 1]).unwrap();
            let b = fit_assignment(&mapped, &truth, &[1, 1, 1]).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
