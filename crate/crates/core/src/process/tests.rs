use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn identity_mechanism(m: usize) -> DenseNet<f64> {
    let mut net = DenseNet::zeros(&[m, m], Activation::Identity).unwrap();
    let w = net.weight_mut(0);
    for d in 0..m {
        w[d * m + d] = 1.0;
    }
    net
}

fn random_process(dims: Vec<usize>, p: f64, seed: u64) -> CausalProcess<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = CausalGraph::random(dims, 0.4, &mut rng).unwrap();
    let centers: Vec<Vec<f64>> = graph.dims().iter().map(|&m| vec![0.0; m]).collect();
    let mech = MechanismSet::random(&graph, &centers, &MechanismConfig::default(), &mut rng).unwrap();
    let k = graph.num_variables();
    let policy = InterventionPolicy::hard(p, vec![(-2.0, 2.0); k]);
    let obs = ObservationModel::noiseless(InvertibleMap::identity(graph.total_dim()));
    CausalProcess::new(graph, mech, policy, obs).unwrap()
}

#[test]
fn fixed_point_without_noise() {
    let graph = CausalGraph::new(vec![1], vec![vec![0]]).unwrap();
    let mech = MechanismSet::new(&graph, vec![identity_mechanism(1)], vec![0.0]).unwrap();
    let policy = InterventionPolicy::hard(0.0, vec![(-1.0, 1.0)]);
    let obs = ObservationModel::noiseless(InvertibleMap::identity(1));
    let process = CausalProcess::new(graph, mech, policy, obs)
        .unwrap()
        .with_initial_state(vec![0.5])
        .unwrap();
    let traj = sample_trajectory(&process, 50, 3).unwrap();
    assert!(traj.states.as_slice().iter().all(|&v| v == 0.5));
    assert!(traj.observations.as_slice().iter().all(|&v| v == 0.5));
}

#[test]
fn hard_intervention_overrides_mechanism() {
    let graph = CausalGraph::new(vec![1, 1], vec![vec![0], vec![0, 1]]).unwrap();
    let mut chain = DenseNet::zeros(&[2, 1], Activation::Identity).unwrap();
    chain.weight_mut(0).copy_from_slice(&[0.5, 0.5]);
    let mech = MechanismSet::new(&graph, vec![identity_mechanism(1), chain], vec![0.1, 0.1]).unwrap();
    let mut policy = InterventionPolicy::hard(0.5, vec![(0.7, 0.7), (-1.0, 1.0)]);
    policy.probabilities[1] = 0.0;
    let obs = ObservationModel::noiseless(InvertibleMap::identity(2));
    let process = CausalProcess::new(graph, mech, policy, obs).unwrap();
    let traj = sample_trajectory(&process, 200, 11).unwrap();
    let mut hits = 0;
    for t in 1..traj.len() {
        if traj.targets.get(t, 0) {
            hits += 1;
            assert_eq!(traj.states[(t, 0)], 0.7);
        } else {
            assert_ne!(traj.states[(t, 0)], 0.7);
        }
        assert!(!traj.targets.get(t, 1));
    }
    assert!(hits > 50);
}

#[test]
fn target_frequency_matches_probability() {
    let process = random_process(vec![1; 6], 0.1, 7);
    let traj = sample_trajectory(&process, 10_000, 7).unwrap();
    for f in traj.targets.frequencies() {
        assert!((f - 0.1).abs() <= 0.01, "frequency {f}");
    }
}

#[test]
fn first_step_has_no_targets() {
    let process = random_process(vec![1, 2, 1], 0.9, 1);
    let traj = sample_trajectory(&process, 10, 4).unwrap();
    assert!(traj.targets.row(0).iter().all(|&b| !b));
}

#[test]
fn grouped_variables_share_bits() {
    let mut process = random_process(vec![1; 5], 0.3, 2);
    process.policy.groups = vec![vec![1, 3]];
    let traj = simulate(&process, None, &[vec![3, 4]], 2000, 9).unwrap();
    for t in 0..traj.len() {
        let r = traj.targets.row(t);
        assert_eq!(r[1], r[3]);
        assert_eq!(r[3], r[4]);
    }
}

#[test]
fn noise_is_independent_across_variables() {
    let process = random_process(vec![1; 4], 0.0, 21);
    let traj = sample_trajectory(&process, 10_000, 5).unwrap();
    let k = process.num_variables();
    let mut residuals = vec![Vec::new(); k];
    for t in 1..traj.len() {
        let prev = traj.states.row(t - 1);
        for (i, res) in residuals.iter_mut().enumerate() {
            let mean = process.mechanisms.mean(&process.graph, i, prev)[0];
            res.push(traj.states[(t, i)] - mean);
        }
    }
    for a in 0..k {
        for b in a + 1..k {
            let corr = partial_correlation(&residuals[a], &residuals[b], &[]);
            assert!(corr.abs() <= 0.05, "noise correlation {corr} between {a} and {b}");
        }
    }
}

#[test]
fn sampling_is_deterministic() {
    let process = random_process(vec![2, 1, 1], 0.2, 8);
    let a = sample_trajectory(&process, 300, 17).unwrap();
    let b = sample_trajectory(&process, 300, 17).unwrap();
    assert_eq!(a, b);
    let c = sample_trajectory(&process, 300, 18).unwrap();
    assert_ne!(a, c);
}

#[test]
fn states_stay_bounded() {
    let process = random_process(vec![1; 6], 0.1, 3);
    let traj = sample_trajectory(&process, 20_000, 3).unwrap();
    assert!(traj.states.max_abs() < 10.0, "max {}", traj.states.max_abs());
}

#[test]
fn rejects_short_or_inconsistent_input() {
    let process = random_process(vec![1, 1], 0.1, 0);
    assert!(matches!(sample_trajectory(&process, 1, 0), Err(Error::InvalidArgument(_))));
    let graph = CausalGraph::new(vec![1, 1], vec![vec![0], vec![1]]).unwrap();
    let bad = MechanismSet::new(&graph, vec![identity_mechanism(2), identity_mechanism(1)], vec![0.0, 0.0]);
    assert!(matches!(bad, Err(Error::DimensionMismatch { .. })));
    let obs = ObservationModel::noiseless(InvertibleMap::identity(3));
    let r = CausalProcess::new(
        process.graph.clone(),
        process.mechanisms.clone(),
        process.policy.clone(),
        obs,
    );
    assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
}

#[test]
fn identity_observation_inverts_exactly() {
    let obs = ObservationModel::noiseless(InvertibleMap::<f64>::identity(3));
    let x = vec![0.1, -2.0, 3.5];
    assert_eq!(invert_observation(&obs, &x).unwrap(), x);
}

#[test]
fn rotation_observation_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obs = ObservationModel::noiseless(InvertibleMap::<f64>::random_rotation(4, &mut rng).unwrap());
    for _ in 0..1000 {
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x = obs.observe(&c, &mut rng).unwrap();
        let back = invert_observation(&obs, &x).unwrap();
        let err = c.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-9);
    }
}

#[test]
fn coupling_observation_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let flow = crate::transform::AffineCouplingFlow::<f64>::random(6, 4, 16, 0.5, &mut rng).unwrap();
    let obs = ObservationModel::noiseless(InvertibleMap::Coupling(flow));
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let back = invert_observation(&obs, &obs.observe(&c, &mut rng).unwrap()).unwrap();
        worst = c.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn faithfulness_check_flags_nothing_for_strong_edges() {
    let graph = CausalGraph::new(vec![1, 1], vec![vec![0], vec![0, 1]]).unwrap();
    let mut chain = DenseNet::zeros(&[2, 1], Activation::Identity).unwrap();
    chain.weight_mut(0).copy_from_slice(&[0.6, 0.3]);
    let mut own = identity_mechanism(1);
    own.weight_mut(0)[0] = 0.8;
    let mech = MechanismSet::new(&graph, vec![own, chain], vec![0.1, 0.1]).unwrap();
    let policy = InterventionPolicy::hard(0.1, vec![(-1.0, 1.0); 2]);
    let obs = ObservationModel::noiseless(InvertibleMap::identity(2));
    let process = CausalProcess::new(graph, mech, policy, obs).unwrap();
    assert!(process.faithfulness_warnings(10_000, 0.05, 1).is_empty());
}

#[test]
fn trajectory_text_and_binary_round_trip() {
    let process = random_process(vec![2, 1], 0.3, 4);
    let traj = sample_trajectory(&process, 40, 2).unwrap();
    let mut text = Vec::new();
    traj.write_csv(&mut text).unwrap();
    assert_eq!(Trajectory::<f64>::read_csv(&text[..]).unwrap(), traj);
    let mut bin = Vec::new();
    traj.write_binary(&mut bin).unwrap();
    assert_eq!(Trajectory::<f64>::read_binary(&bin[..]).unwrap(), traj);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn targets_are_binary_with_k_columns(seed in 0u64..1000, k in 1usize..6, p in 0.0f64..1.0) {
        let process = random_process(vec![1; k], p, seed);
        let traj = sample_trajectory(&process, 30, seed).unwrap();
        prop_assert_eq!(traj.targets.num_variables(), k);
        prop_assert_eq!(traj.targets.steps(), 30);
        prop_assert_eq!(traj.states.rows(), 30);
        prop_assert_eq!(traj.observations.rows(), 30);
    }
}
