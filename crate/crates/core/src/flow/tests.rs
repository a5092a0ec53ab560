use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::representation::Assignment;

fn perturbed(flow: &mut Flow<f64>, std: f64, rng: &mut ChaCha8Rng) {
    let mut p = flow.params().clone();
    for v in p.values_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += std * z;
    }
    flow.set_params(p).unwrap();
}

fn random_flow(dim: usize, depth: usize, seed: u64) -> Flow<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Flow::Autoregressive(AffineAutoregressiveFlow::new(dim, depth, 16, &mut rng));
    perturbed(&mut f, 0.1, &mut rng);
    f
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn numeric_log_det(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> f64 {
    let d = x.len();
    let h = 1e-6;
    let mut jac = Matrix::zeros(d, d);
    for j in 0..d {
        let mut plus = x.to_vec();
        plus[j] += h;
        let mut minus = x.to_vec();
        minus[j] -= h;
        let (fp, fm) = (f(&plus), f(&minus));
        for i in 0..d {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

#[test]
fn fresh_flow_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let flow = Flow::Autoregressive(AffineAutoregressiveFlow::<f64>::new(3, 2, 16, &mut rng));
    let z = [0.3, -1.2, 2.0];
    let (r, ld) = flow_forward(&flow, &z).unwrap();
    // Two reverse permutations cancel.
    assert_eq!(r, z.to_vec());
    assert_eq!(ld, 0.0);
}

#[test]
fn pure_scaling_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut f = AffineAutoregressiveFlow::<f64>::new(3, 1, 16, &mut rng);
    f.set_actnorm(0, &[0.0; 3], &[2f64.ln(); 3]);
    let (r, ld) = flow_forward(&Flow::Autoregressive(f), &[1.0, 2.0, 3.0]).unwrap();
    assert!((ld - 3.0 * 2f64.ln()).abs() < 1e-12);
    assert_eq!(r, vec![6.0, 4.0, 2.0]);
}

#[test]
fn log_det_matches_numeric_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for depth in [1, 2, 4] {
        for dim in [1, 2, 3, 5] {
            let flow = random_flow(dim, depth, 10 * depth as u64 + dim as u64);
            for _ in 0..10 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                let (_, ld) = flow_forward(&flow, &x).unwrap();
                let num = numeric_log_det(|v| flow_forward(&flow, v).unwrap().0, &x);
                let rel = (ld - num).abs() / ld.abs().max(num.abs()).max(1e-3);
                assert!(rel <= 1e-4, "depth {depth} dim {dim}: {ld} vs {num}");
                let y = flow_forward(&flow, &x).unwrap().0;
                let (_, inv) = flow.inverse_with_log_det(&Matrix::row_vector(&y)).unwrap();
                assert!((inv[0] + ld).abs() <= 1e-6, "{} vs {ld}", inv[0]);
                let fd_inv = numeric_log_det(|v| flow_inverse(&flow, v).unwrap(), &y);
                assert!((fd_inv - inv[0]).abs() <= 1e-4 * inv[0].abs().max(1.0));
            }
        }
    }
}

#[test]
fn round_trip_at_several_depths() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for depth in [1, 2, 4] {
        let flow = random_flow(4, depth, depth as u64);
        let z = random_rows(&mut rng, 1000, 4, 3.0);
        let (r, _) = flow.forward(&z).unwrap();
        let back = flow.inverse(&r).unwrap();
        assert!(back.max_abs_diff(&z) <= 1e-6, "depth {depth}: {}", back.max_abs_diff(&z));
    }
}

#[test]
fn tape_forward_matches_matrix_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let flow = random_flow(3, 3, 7);
    let z = random_rows(&mut rng, 20, 3, 2.0);
    let (r, ld) = flow.forward(&z).unwrap();
    let tape = Tape::new();
    let bound = flow.params().bind(&tape);
    let (rv, ldv) = flow.forward_tape(&tape, &bound, tape.leaf(z.clone()));
    assert!(tape.value(rv).max_abs_diff(&r) < 1e-12);
    let ldm = Matrix::column_vector(&ld);
    assert!(tape.value(ldv).max_abs_diff(&ldm) < 1e-12);
}

#[test]
fn non_finite_forward_names_block() {
    let mut flow = random_flow(2, 2, 1);
    let mut p = flow.params().clone();
    p.block_slice_mut(1)[0] = 1e6;
    flow.set_params(p).unwrap();
    match flow.forward(&Matrix::row_vector(&[1.0, 1.0])) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("block 0"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn linear_flow_log_det_and_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut flow = Flow::Linear(LinearFlow::<f64>::identity(4));
    perturbed(&mut flow, 0.5, &mut rng);
    let Flow::Linear(lin) = &flow else { unreachable!() };
    assert!((lin.matrix().determinant().abs().ln() - lin.log_det()).abs() < 1e-10);
    let z = random_rows(&mut rng, 100, 4, 2.0);
    let back = flow.inverse(&flow.forward(&z).unwrap().0).unwrap();
    assert!(back.max_abs_diff(&z) < 1e-9);
    let tape = Tape::new();
    let bound = flow.params().bind(&tape);
    let (y, _) = flow.forward_tape(&tape, &bound, tape.leaf(z.clone()));
    assert!(tape.value(y).max_abs_diff(&flow.forward(&z).unwrap().0) < 1e-12);
}

#[test]
fn standard_normal_prior_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p1 = TransitionPrior::<f64>::new(1, 1, 8, 1e-3, &mut rng).unwrap();
    let e = prior_log_prob(&p1, &[0.0], &[0.7], &[true]).unwrap();
    assert!((e.log_prob[0] + 0.91894).abs() < 1e-5);
    let p2 = TransitionPrior::<f64>::new(2, 2, 8, 1e-3, &mut rng).unwrap();
    let e = prior_log_prob(&p2, &[0.0, 0.0], &[0.1, -0.4], &[false, true]).unwrap();
    assert!((e.log_prob[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
}

#[test]
fn prior_factorizes_over_variables() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut prior = TransitionPrior::<f64>::new(3, 2, 8, 1e-3, &mut rng).unwrap();
    for i in 0..2 {
        for w in prior.net_mut(i).weight_mut(1) {
            *w = rng.random_range(-0.5..0.5);
        }
    }
    let psi = vec![1, 0, 1];
    prior.set_hard_assignment(psi.clone()).unwrap();
    for _ in 0..20 {
        let next: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let prev: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bits = [rng.random_bool(0.5), rng.random_bool(0.5)];
        let joint = prior_log_prob(&prior, &next, &prev, &bits).unwrap().log_prob[0];
        let mut sum = 0.0;
        for i in 0..2 {
            let mut input = prev.clone();
            input.push(if bits[i] { 1.0 } else { 0.0 });
            let out = prior.net(i).forward(&input).unwrap();
            for d in (0..3).filter(|&d| psi[d] == i) {
                let (mu, lv) = (out[d], out[3 + d].max(prior.logvar_floor()));
                sum += -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (next[d] - mu).powi(2) / lv.exp());
            }
        }
        assert!((joint - sum).abs() < 1e-10);
    }
}

#[test]
fn variance_floor_counts_clamps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut prior = TransitionPrior::<f64>::new(2, 1, 4, 1e-3, &mut rng).unwrap();
    prior.net_mut(0).bias_mut(1)[2] = -40.0;
    let e = prior_log_prob(&prior, &[0.0, 0.0], &[0.0, 0.0], &[false]).unwrap();
    assert_eq!(e.clamped, 1);
    assert!(e.log_prob[0].is_finite());
}

fn toy_model(seed: u64) -> (TransitionModel<f64>, Matrix<f64>, TargetMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flow = Flow::Autoregressive(AffineAutoregressiveFlow::new(2, 2, 4, &mut rng));
    perturbed(&mut flow, 0.2, &mut rng);
    let mut model = TransitionModel::new(flow, 2, 6, 5, 1e-3, &mut rng).unwrap();
    let mut p = model.params();
    for v in p.values_mut() {
        *v += 0.1 * rng.random_range(-1.0..1.0);
    }
    model.set_params(p).unwrap();
    let data = random_rows(&mut rng, 12, 2, 1.5);
    let rows: Vec<Vec<bool>> = (0..12).map(|_| vec![rng.random_bool(0.4), rng.random_bool(0.4)]).collect();
    (model, data, TargetMatrix::from_rows(&rows).unwrap())
}

#[test]
fn adaptation_loss_gradient_matches_finite_differences() {
    let (model, data, targets) = toy_model(9);
    let cfg = AdaptationConfig::default().train;
    let rows: Vec<usize> = (0..11).collect();
    let (_, grad) = model.loss_and_gradient(&data, &targets, &rows, &cfg).unwrap();
    let base = model.params();
    let h = 1e-5;
    let loss_at = |p: &ParamVector<f64>| {
        let mut m = model.clone();
        m.set_params(p.clone()).unwrap();
        m.loss_and_gradient(&data, &targets, &rows, &cfg).unwrap().0
    };
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        let mut plus = base.clone();
        plus.values_mut()[k] += h;
        let mut minus = base.clone();
        minus.values_mut()[k] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let a = grad.values()[k];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

fn sequence(values: Matrix<f64>, dims: &[usize]) -> LatentSequence<f64> {
    LatentSequence::new(values, Assignment::identity_blocks(dims), "target", "oracle").unwrap()
}

#[test]
fn substitute_identity_and_unchanged_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let seq = sequence(random_rows(&mut rng, 50, 4, 1.0), &[1, 2, 1]);
    assert_eq!(substitute(&seq, &AdaptationResult::identity()).unwrap(), seq);

    let flow = random_flow(3, 2, 3);
    let mut model = TransitionModel::new(flow, 2, 4, 4, 1e-3, &mut rng).unwrap();
    model.prior.harden();
    let result = AdaptationResult {
        changed_vars: vec![0, 1],
        changed_dims: vec![0, 1, 2],
        model: Some(model),
        assignment: vec![0, 1, 1],
        curve: Vec::new(),
        clamp_count: 0,
    };
    let out = substitute(&seq, &result).unwrap();
    assert_eq!(out.len(), seq.len());
    assert_eq!(out.values.column(3), seq.values.column(3));
    let (r, _) = result.flow().unwrap().forward(&seq.values.col_slice(0, 3)).unwrap();
    assert_eq!(out.values.col_slice(0, 3), r);
}

#[test]
fn substitute_all_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let seq = sequence(random_rows(&mut rng, 30, 2, 1.0), &[1, 1]);
    let flow = random_flow(2, 1, 4);
    let model = TransitionModel::new(flow.clone(), 2, 4, 4, 1e-3, &mut rng).unwrap();
    let result = AdaptationResult {
        changed_vars: vec![0, 1],
        changed_dims: vec![0, 1],
        model: Some(model),
        assignment: vec![1, 0],
        curve: Vec::new(),
        clamp_count: 0,
    };
    let out = substitute(&seq, &result).unwrap();
    assert_eq!(out.values, flow.forward(&seq.values).unwrap().0);
    assert_eq!(out.assignment.as_slice(), &[Some(1), Some(0)]);
}

#[test]
fn training_keeps_inputs_frozen_and_improves_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 300;
    let mut values = Vec::new();
    let mut bits = Vec::new();
    let mut state = [0.0, 0.0];
    for _ in 0..n {
        let b = [rng.random_bool(0.3), rng.random_bool(0.3)];
        for (d, s) in state.iter_mut().enumerate() {
            *s = if b[d] { rng.random_range(-2.0..2.0) } else { 0.8 * *s + 0.1 * rng.random_range(-1.0..1.0) };
        }
        values.extend([state[0] + state[1], state[0] - 0.5 * state[1], 3.0]);
        bits.push(b.to_vec());
    }
    let seq = sequence(Matrix::from_vec(n, 3, values).unwrap(), &[1, 1, 1]);
    let before = seq.clone();
    let targets = TargetMatrix::from_rows(&bits.iter().map(|b| vec![b[0], b[1], false]).collect::<Vec<_>>()).unwrap();
    let mut cfg = AdaptationConfig::default();
    cfg.flow_depth = 2;
    cfg.train.epochs = 150;
    cfg.train.track_curve = true;
    let result = train_adaptation(&seq, &targets, &[0, 1], &cfg).unwrap();
    assert_eq!(seq, before);
    assert_eq!(result.changed_dims, vec![0, 1]);
    let curve = &result.curve;
    assert!(curve.last().unwrap() > &curve[0]);
    for e in 0..curve.len().saturating_sub(50) {
        assert!(curve[e + 50] >= curve[e] - 0.01, "epoch {e}: {} then {}", curve[e], curve[e + 50]);
    }
    let out = substitute(&seq, &result).unwrap();
    assert_eq!(out.values.column(2), seq.values.column(2));
}

#[test]
fn empty_changed_set_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let seq = sequence(random_rows(&mut rng, 10, 2, 1.0), &[1, 1]);
    let targets = TargetMatrix::zeros(10, 2);
    let r = train_adaptation(&seq, &targets, &[], &AdaptationConfig::default()).unwrap();
    assert!(r.model.is_none());
    assert!(matches!(
        train_adaptation(&seq, &targets, &[0], &AdaptationConfig::default()),
        Err(Error::DegenerateTarget(0))
    ));
}
