//! Source, target and composition environments derived from one base process
//! by an invertible transform of the changed variable block and by coarsening
//! of intervention targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;
use crate::process::{simulate, CausalProcess, ChangeFrame, Trajectory};
use crate::transform::{AffineCouplingFlow, InvertibleMap};
use crate::Scalar;

/// Changed and shared variables (0-based, ascending).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariablePartition {
    changed: Vec<usize>,
    shared: Vec<usize>,
}

impl VariablePartition {
    pub fn new(k: usize, changed: &[usize]) -> Result<Self> {
        let mut changed = changed.to_vec();
        changed.sort_unstable();
        let before = changed.len();
        changed.dedup();
        if changed.len() != before {
            return Err(Error::InvalidArgument("changed set has duplicates".into()));
        }
        if let Some(&v) = changed.iter().find(|&&v| v >= k) {
            return Err(Error::InvalidArgument(format!(
                "changed variable {v} outside 0..{k}"
            )));
        }
        let shared = (0..k).filter(|v| !changed.contains(v)).collect();
        Ok(VariablePartition { changed, shared })
    }

    pub fn unchanged(k: usize) -> Self {
        VariablePartition {
            changed: Vec::new(),
            shared: (0..k).collect(),
        }
    }

    pub fn changed(&self) -> &[usize] {
        &self.changed
    }

    pub fn shared(&self) -> &[usize] {
        &self.shared
    }

    pub fn num_variables(&self) -> usize {
        self.changed.len() + self.shared.len()
    }

    pub fn is_changed(&self, v: usize) -> bool {
        self.changed.contains(&v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChangeKind {
    Identity,
    Rotation,
    RandomAffine,
    AffineCouplingFlow,
    Polar,
}

/// Invertible transform of the changed block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeTransform<F> {
    pub kind: ChangeKind,
    pub map: InvertibleMap<F>,
}

impl<F: Scalar> ChangeTransform<F> {
    pub fn identity(dim: usize) -> Self {
        ChangeTransform {
            kind: ChangeKind::Identity,
            map: InvertibleMap::identity(dim),
        }
    }

    /// Rotation by `degrees` in the plane of the first two block coordinates.
    pub fn rotation(dim: usize, degrees: f64) -> Result<Self> {
        Ok(ChangeTransform {
            kind: ChangeKind::Rotation,
            map: InvertibleMap::plane_rotation(dim, degrees.to_radians())?,
        })
    }

    /// `Q·diag(s)` with random orthogonal `Q`, scales in `[lo, hi]`, and a Gaussian offset.
    pub fn random_affine<R: Rng + ?Sized>(
        dim: usize,
        scale: (f64, f64),
        offset_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ChangeTransform {
            kind: ChangeKind::RandomAffine,
            map: InvertibleMap::random_affine(dim, scale.0, scale.1, offset_std, rng)?,
        })
    }

    pub fn affine(matrix: Matrix<F>, offset: Vec<F>) -> Result<Self> {
        Ok(ChangeTransform {
            kind: ChangeKind::RandomAffine,
            map: InvertibleMap::affine(matrix, offset)?,
        })
    }

    pub fn coupling<R: Rng + ?Sized>(dim: usize, layers: usize, strength: f64, rng: &mut R) -> Result<Self> {
        Ok(ChangeTransform {
            kind: ChangeKind::AffineCouplingFlow,
            map: InvertibleMap::Coupling(AffineCouplingFlow::random(dim, layers, 16, strength, rng)?),
        })
    }

    /// Cartesian to polar `(r, θ)` around `origin`; only for 2-d blocks.
    pub fn polar(origin: [F; 2]) -> Self {
        ChangeTransform {
            kind: ChangeKind::Polar,
            map: InvertibleMap::polar(origin),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.map.dim()
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.map, InvertibleMap::Identity { .. })
    }
}

/// Applies the change transform to one changed-block vector.
pub fn apply_change<F: Scalar>(transform: &ChangeTransform<F>, c_ch: &[F]) -> Result<Vec<F>> {
    transform.map.apply(c_ch)
}

/// Inverse of [`apply_change`].
pub fn revert_change<F: Scalar>(transform: &ChangeTransform<F>, e_ch: &[F]) -> Result<Vec<F>> {
    transform.map.invert(e_ch)
}

/// One environment of the base process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec<F> {
    pub name: String,
    pub process: CausalProcess<F>,
    pub partition: VariablePartition,
    pub transform: ChangeTransform<F>,
    /// Disjoint variable groups whose targets are merged.
    pub coarsening: Vec<Vec<usize>>,
    /// Forbid coarsening groups that touch the changed set.
    pub no_overlap: bool,
}

impl<F: Scalar> EnvironmentSpec<F> {
    /// The base process seen unchanged.
    pub fn base(name: impl Into<String>, process: CausalProcess<F>) -> Self {
        let k = process.num_variables();
        EnvironmentSpec {
            name: name.into(),
            process,
            partition: VariablePartition::unchanged(k),
            transform: ChangeTransform::identity(0),
            coarsening: Vec::new(),
            no_overlap: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.process.num_variables();
        ensure_dim("partition size", k, self.partition.num_variables())?;
        ensure_dim("change transform", self.changed_dim(), self.transform.input_dim())?;
        let mut seen = vec![false; k];
        for g in &self.coarsening {
            if g.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "coarsening group {g:?} needs at least two variables"
                )));
            }
            for &v in g {
                if v >= k {
                    return Err(Error::InvalidArgument(format!("coarsening variable {v} outside 0..{k}")));
                }
                if seen[v] {
                    return Err(Error::InvalidArgument(format!(
                        "coarsening groups overlap at variable {v}"
                    )));
                }
                seen[v] = true;
                if self.no_overlap && self.partition.is_changed(v) {
                    return Err(Error::InvalidArgument(format!(
                        "coarsened variable {v} is also changed"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_variables(&self) -> usize {
        self.process.num_variables()
    }

    pub fn dims(&self) -> &[usize] {
        self.process.graph.dims()
    }

    pub fn total_dim(&self) -> usize {
        self.process.total_dim()
    }

    pub fn changed_dim(&self) -> usize {
        self.partition
            .changed()
            .iter()
            .map(|&v| self.dims()[v])
            .sum()
    }

    /// Columns of the changed block in a full state vector.
    pub fn changed_columns(&self) -> Vec<usize> {
        let graph = &self.process.graph;
        self.partition
            .changed()
            .iter()
            .flat_map(|&v| {
                let o = graph.offset(v);
                o..o + graph.dims()[v]
            })
            .collect()
    }

    /// Base state to environment state.
    pub fn to_env(&self, base: &[F]) -> Result<Vec<F>> {
        self.map_block(base, |b| self.transform.map.apply(b))
    }

    /// Environment state to base state.
    pub fn to_base(&self, env: &[F]) -> Result<Vec<F>> {
        self.map_block(env, |b| self.transform.map.invert(b))
    }

    /// Row-wise [`Self::to_env`].
    pub fn to_env_rows(&self, base: &Matrix<F>) -> Result<Matrix<F>> {
        self.map_rows(base, |r| self.to_env(r))
    }

    /// Row-wise [`Self::to_base`].
    pub fn to_base_rows(&self, env: &Matrix<F>) -> Result<Matrix<F>> {
        self.map_rows(env, |r| self.to_base(r))
    }

    fn map_block(&self, state: &[F], f: impl Fn(&[F]) -> Result<Vec<F>>) -> Result<Vec<F>> {
        ensure_dim("state", self.total_dim(), state.len())?;
        let mut out = state.to_vec();
        if self.transform.is_identity() {
            return Ok(out);
        }
        let cols = self.changed_columns();
        let block: Vec<F> = cols.iter().map(|&c| state[c]).collect();
        for (c, v) in cols.into_iter().zip(f(&block)?) {
            out[c] = v;
        }
        Ok(out)
    }

    fn map_rows(&self, m: &Matrix<F>, f: impl Fn(&[F]) -> Result<Vec<F>>) -> Result<Matrix<F>> {
        let mut out = Vec::with_capacity(m.len());
        for t in 0..m.rows() {
            out.extend(f(m.row(t))?);
        }
        Matrix::from_vec(m.rows(), m.cols(), out)
    }

    /// Effective target groups after coarsening, as label per variable.
    pub fn target_groups(&self) -> Vec<usize> {
        self.process.policy.group_labels(&self.coarsening)
    }
}

/// Samples `steps` states in the environment's own coordinates.
pub fn realize_environment<F: Scalar>(spec: &EnvironmentSpec<F>, steps: usize, seed: u64) -> Result<Trajectory<F>> {
    spec.validate()?;
    let frame = if spec.transform.is_identity() || spec.partition.changed().is_empty() {
        None
    } else {
        Some(ChangeFrame {
            changed: spec.partition.changed(),
            transform: &spec.transform.map,
        })
    };
    simulate(&spec.process, frame, &spec.coarsening, steps, seed)
}

/// `L` source environments and one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionSpec<F> {
    pub sources: Vec<EnvironmentSpec<F>>,
    pub target: EnvironmentSpec<F>,
    /// Variables each source shares with the target.
    pub shared_sets: Vec<Vec<usize>>,
}

impl<F: Scalar> CompositionSpec<F> {
    pub fn new(sources: Vec<EnvironmentSpec<F>>, target: EnvironmentSpec<F>, shared_sets: Vec<Vec<usize>>) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidArgument("composition needs at least one source".into()));
        }
        ensure_dim("shared sets", sources.len(), shared_sets.len())?;
        let k = target.num_variables();
        for (l, s) in sources.iter().enumerate() {
            s.validate()?;
            ensure_dim(&format!("source {l} variables"), k, s.num_variables())?;
            if let Some(&v) = shared_sets[l].iter().find(|&&v| v >= k) {
                return Err(Error::InvalidArgument(format!("shared variable {v} outside 0..{k}")));
            }
        }
        target.validate()?;
        Ok(CompositionSpec {
            sources,
            target,
            shared_sets,
        })
    }

    /// Target variables not covered by any source shared set nor the target's changed set.
    pub fn uncovered(&self) -> Vec<usize> {
        (0..self.target.num_variables())
            .filter(|v| {
                !self.target.partition.is_changed(*v) && !self.shared_sets.iter().any(|s| s.contains(v))
            })
            .collect()
    }

    pub fn has_full_coverage(&self) -> bool {
        self.uncovered().is_empty()
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{Activation, DenseNet};
    use crate::process::{
        sample_trajectory, CausalGraph, InterventionPolicy, MechanismConfig, MechanismSet,
        ObservationModel,
    };

    fn process(dims: Vec<usize>, seed: u64) -> CausalProcess<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = CausalGraph::random(dims, 0.4, &mut rng).unwrap();
        let centers: Vec<Vec<f64>> = graph.dims().iter().map(|&m| vec![0.5; m]).collect();
        let mech = MechanismSet::random(&graph, &centers, &MechanismConfig::default(), &mut rng).unwrap();
        let k = graph.num_variables();
        let policy = InterventionPolicy::hard(0.2, vec![(-1.0, 2.0); k]);
        let obs = ObservationModel::noiseless(InvertibleMap::identity(graph.total_dim()));
        CausalProcess::new(graph, mech, policy, obs).unwrap()
    }

    fn env(p: CausalProcess<f64>, changed: &[usize], t: ChangeTransform<f64>) -> EnvironmentSpec<f64> {
        let k = p.num_variables();
        EnvironmentSpec {
            name: "target".into(),
            process: p,
            partition: VariablePartition::new(k, changed).unwrap(),
            transform: t,
            coarsening: Vec::new(),
            no_overlap: true,
        }
    }

    #[test]
    fn identity_environment_reproduces_base() {
        let p = process(vec![1, 2, 1], 3);
        let spec = env(p.clone(), &[1], ChangeTransform::identity(2));
        assert_eq!(realize_environment(&spec, 500, 9).unwrap(), sample_trajectory(&p, 500, 9).unwrap());
    }

    #[test]
    fn rotation_of_unit_vector() {
        let t = ChangeTransform::<f64>::rotation(2, 30.0).unwrap();
        let out = apply_change(&t, &[1.0, 0.0]).unwrap();
        assert!((out[0] - 0.86603).abs() < 1e-5 && (out[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn coarsened_targets_are_equal() {
        let p = process(vec![1; 6], 4);
        let mut spec = env(p, &[0, 1], ChangeTransform::rotation(2, 45.0).unwrap());
        spec.coarsening = vec![vec![3, 4]];
        let traj = realize_environment(&spec, 10_000, 2).unwrap();
        for t in 0..traj.len() {
            assert_eq!(traj.targets.get(t, 3), traj.targets.get(t, 4));
        }
    }

    #[test]
    fn overlap_between_coarse_and_changed_rejected() {
        let p = process(vec![1; 4], 4);
        let mut spec = env(p, &[0, 1], ChangeTransform::rotation(2, 45.0).unwrap());
        spec.coarsening = vec![vec![1, 2]];
        assert!(matches!(realize_environment(&spec, 10, 0), Err(Error::InvalidArgument(_))));
        spec.no_overlap = false;
        assert!(realize_environment(&spec, 10, 0).is_ok());
        spec.coarsening = vec![vec![1, 2], vec![2, 3]];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn shared_block_identical_and_changed_block_transformed() {
        let p = process(vec![1, 1, 2, 1], 5);
        let t = ChangeTransform::rotation(2, 30.0).unwrap();
        let spec = env(p, &[0, 3], t.clone());
        let traj = realize_environment(&spec, 2000, 1).unwrap();
        assert_eq!(traj.total_dim(), spec.total_dim());
        for r in 0..traj.len() {
            let x = traj.observations.row(r);
            let s = traj.states.row(r);
            for c in 1..4 {
                assert_eq!(x[c], s[c]);
            }
            let expect = apply_change(&t, &[x[0], x[4]]).unwrap();
            assert!((expect[0] - s[0]).abs() < 1e-12 && (expect[1] - s[4]).abs() < 1e-12);
            let back = spec.to_base(s).unwrap();
            assert!(back.iter().zip(x).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn interventions_act_in_transformed_coordinates() {
        // Variable 0 never intervened in base coordinates would still move in
        // polar coordinates when only the angle is intervened.
        let graph = CausalGraph::new(vec![1, 1], vec![vec![0], vec![1]]).unwrap();
        let id = |w: f64| {
            let mut n = DenseNet::zeros(&[1, 1], Activation::Identity).unwrap();
            n.weight_mut(0)[0] = w;
            n
        };
        let mech = MechanismSet::new(&graph, vec![id(1.0), id(1.0)], vec![0.0, 0.0]).unwrap();
        let mut policy = InterventionPolicy::hard(0.0, vec![(1.0, 2.0), (1.0, 2.0)]);
        policy.probabilities[1] = 1.0;
        let obs = ObservationModel::noiseless(InvertibleMap::identity(2));
        let p = CausalProcess::new(graph, mech, policy, obs)
            .unwrap()
            .with_initial_state(vec![1.5, 1.5])
            .unwrap();
        let spec = env(p, &[0, 1], ChangeTransform::polar([0.0, 0.0]));
        let traj = realize_environment(&spec, 200, 3).unwrap();
        let r0 = traj.states[(0, 0)];
        for t in 1..traj.len() {
            // Radius kept by the mechanism, angle redrawn.
            assert!((traj.states[(t, 0)] - r0).abs() < 1e-9);
        }
        let angles: Vec<f64> = (1..traj.len()).map(|t| traj.states[(t, 1)]).collect();
        assert!(angles.windows(2).any(|w| (w[0] - w[1]).abs() > 1e-3));
    }

    #[test]
    fn affine_change_matches_formula_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Matrix::from_rows(&[[2.0, 1.0, 0.0], [0.0, 1.0, -1.0], [1.0, 0.0, 3.0]]).unwrap();
        let b = vec![0.5, -1.0, 2.0];
        let t = ChangeTransform::affine(a.clone(), b.clone()).unwrap();
        for _ in 0..1000 {
            let c: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let out = apply_change(&t, &c).unwrap();
            let expect: Vec<f64> = a.mat_vec(&c).iter().zip(&b).map(|(x, y)| x + y).collect();
            assert!(out.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));
            let back = revert_change(&t, &out).unwrap();
            assert!(back.iter().zip(&c).all(|(x, y)| (x - y).abs() <= 1e-9));
        }
    }

    #[test]
    fn coupling_change_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = ChangeTransform::<f64>::coupling(4, 4, 0.7, &mut rng).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let c: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let back = revert_change(&t, &apply_change(&t, &c).unwrap()).unwrap();
            worst = back.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
        }
        assert!(worst <= 1e-6);
    }

    #[test]
    fn identity_change_and_dimension_errors() {
        let t = ChangeTransform::<f64>::identity(3);
        assert_eq!(apply_change(&t, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(matches!(apply_change(&t, &[1.0]), Err(Error::DimensionMismatch { .. })));
        let p = process(vec![1, 1, 1], 0);
        let spec = env(p, &[0, 1], ChangeTransform::identity(3));
        assert!(matches!(spec.validate(), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn composition_coverage() {
        let p = process(vec![1; 4], 1);
        let s1 = env(p.clone(), &[2, 3], ChangeTransform::rotation(2, 10.0).unwrap());
        let s2 = env(p.clone(), &[0, 1], ChangeTransform::rotation(2, 10.0).unwrap());
        let tgt = env(p, &[], ChangeTransform::identity(0));
        let spec = CompositionSpec::new(vec![s1.clone(), s2.clone()], tgt.clone(), vec![vec![0, 1], vec![2, 3]]).unwrap();
        assert!(spec.has_full_coverage());
        let partial = CompositionSpec::new(vec![s1, s2], tgt, vec![vec![0], vec![2, 3]]).unwrap();
        assert_eq!(partial.uncovered(), vec![1]);
    }
}
