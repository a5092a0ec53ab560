use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, DenseNet, ParamVector, Tape, Var};
use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;
use crate::Scalar;

const LN_2PI: f64 = 1.8378770664093453;

/// Conditional Gaussian transition prior factorized over changed variables.
///
/// Variable `i` has a network over `(r^t, I_i^{t+1})` producing a mean and a
/// log-variance for every latent dim. Dims are assigned to variables either by
/// a soft row-softmax over learnable logits or, once hardened, by a fixed map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionPrior<F> {
    latent_dim: usize,
    nets: Vec<DenseNet<F>>,
    logits: Matrix<F>,
    hard: Option<Vec<usize>>,
    logvar_floor: F,
}

/// Per-row log densities and how many log-variances hit the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorEval<F> {
    pub log_prob: Vec<F>,
    pub clamped: usize,
}

impl<F: Scalar> TransitionPrior<F> {
    /// Zero-output networks (standard normal factors) and uniform soft assignment.
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        num_vars: usize,
        hidden: usize,
        sigma_floor: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_vars == 0 || latent_dim == 0 {
            return Err(Error::InvalidArgument("prior needs at least one variable and dim".into()));
        }
        let mut nets = Vec::with_capacity(num_vars);
        for _ in 0..num_vars {
            let mut net = DenseNet::random(&[latent_dim + 1, hidden, 2 * latent_dim], Activation::Swish, 1.0, rng)?;
            net.weight_mut(1).iter_mut().for_each(|w| *w = F::zero());
            nets.push(net);
        }
        Ok(TransitionPrior {
            latent_dim,
            nets,
            logits: Matrix::zeros(latent_dim, num_vars),
            hard: None,
            logvar_floor: F::lit(2.0 * sigma_floor.ln()),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_vars(&self) -> usize {
        self.nets.len()
    }

    pub fn net(&self, i: usize) -> &DenseNet<F> {
        &self.nets[i]
    }

    pub fn net_mut(&mut self, i: usize) -> &mut DenseNet<F> {
        &mut self.nets[i]
    }

    pub fn logvar_floor(&self) -> F {
        self.logvar_floor
    }

    /// Soft assignment `M × K` (rows sum to one), or the hardened one-hot map.
    pub fn assignment_weights(&self) -> Matrix<F> {
        match &self.hard {
            Some(psi) => one_hot(psi, self.num_vars()),
            None => softmax_rows(&self.logits),
        }
    }

    pub fn hard_assignment(&self) -> Option<&[usize]> {
        self.hard.as_deref()
    }

    /// Fixes `ψ` (one variable index per latent dim).
    pub fn set_hard_assignment(&mut self, psi: Vec<usize>) -> Result<()> {
        ensure_dim("hard assignment", self.latent_dim, psi.len())?;
        if psi.iter().any(|&v| v >= self.num_vars()) {
            return Err(Error::InvalidArgument("assignment names an unknown variable".into()));
        }
        self.hard = Some(psi);
        Ok(())
    }

    /// Argmax of the soft assignment per dim, ties to the lowest variable.
    pub fn harden(&mut self) {
        let w = self.assignment_weights();
        let psi = (0..self.latent_dim)
            .map(|d| {
                let row = w.row(d);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        self.hard = Some(psi);
    }

    /// Nets in order, followed by the assignment logits.
    pub fn params(&self) -> ParamVector<F> {
        let mut parts: Vec<&ParamVector<F>> = self.nets.iter().map(|n| n.params()).collect();
        let mut logits = ParamVector::new();
        logits.push_block("prior.assign", &self.logits);
        parts.push(&logits);
        ParamVector::concat(&parts)
    }

    pub fn num_blocks(&self) -> usize {
        self.nets.iter().map(|n| n.params().num_blocks()).sum::<usize>() + 1
    }

    pub fn set_params(&mut self, params: ParamVector<F>) -> Result<()> {
        let mut counts: Vec<usize> = self.nets.iter().map(|n| n.params().num_blocks()).collect();
        counts.push(1);
        let mut parts = params.split(&counts)?;
        let logits = parts.pop().expect("logits block");
        for (net, p) in self.nets.iter_mut().zip(parts) {
            net.set_params(p)?;
        }
        let m = logits.block_matrix(0);
        ensure_dim("assignment logits", self.logits.len(), m.len())?;
        self.logits = m;
        Ok(())
    }

    /// Per-row log density on a tape; `targets` is `n × K` with 0/1 entries.
    pub fn log_prob_tape(&self, tape: &Tape<F>, bound: &[Var], r_next: Var, r_prev: Var, targets: Var) -> Var {
        let m = self.latent_dim;
        let per_net = self.nets[0].params().num_blocks();
        let w = match &self.hard {
            Some(psi) => tape.leaf(one_hot(psi, self.num_vars())),
            None => tape.softmax_rows(bound[per_net * self.num_vars()]),
        };
        let half_ln_2pi = F::lit(0.5 * LN_2PI);
        let mut total = None;
        for (i, net) in self.nets.iter().enumerate() {
            let input = tape.concat(&[r_prev, tape.col_slice(targets, i, 1)]);
            let out = net.forward_tape(tape, &bound[per_net * i..per_net * (i + 1)], input);
            let mu = tape.col_slice(out, 0, m);
            let logvar = tape.clamp_min(tape.col_slice(out, m, m), self.logvar_floor);
            let diff = tape.sub(r_next, mu);
            let quad = tape.mul(tape.square(diff), tape.exp(tape.neg(logvar)));
            let half = tape.scale(tape.add(logvar, quad), F::lit(-0.5));
            let log_n = tape.add_scalar(half, -half_ln_2pi);
            let term = tape.col_slice(tape.matmul(log_n, w), i, 1);
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
        total.expect("at least one variable")
    }

    /// Per-row log densities without a tape.
    pub fn log_prob(&self, r_next: &Matrix<F>, r_prev: &Matrix<F>, targets: &Matrix<F>) -> Result<PriorEval<F>> {
        let m = self.latent_dim;
        ensure_dim("prior next state", m, r_next.cols())?;
        ensure_dim("prior previous state", m, r_prev.cols())?;
        ensure_dim("prior targets", self.num_vars(), targets.cols())?;
        ensure_dim("prior rows", r_next.rows(), r_prev.rows())?;
        ensure_dim("prior rows", r_next.rows(), targets.rows())?;
        let w = self.assignment_weights();
        let n = r_next.rows();
        let mut log_prob = vec![F::zero(); n];
        let mut clamped = 0;
        let half_ln_2pi = F::lit(0.5 * LN_2PI);
        for (i, net) in self.nets.iter().enumerate() {
            let input = Matrix::hconcat(&[r_prev, &targets.col_slice(i, 1)]);
            let out = net.forward_batch(&input)?;
            for t in 0..n {
                for d in 0..m {
                    let mut lv = out[(t, m + d)];
                    if lv < self.logvar_floor {
                        lv = self.logvar_floor;
                        clamped += 1;
                    }
                    let diff = r_next[(t, d)] - out[(t, d)];
                    let ln = -F::lit(0.5) * (lv + diff * diff * (-lv).exp()) - half_ln_2pi;
                    log_prob[t] = log_prob[t] + w[(d, i)] * ln;
                }
            }
        }
        Ok(PriorEval { log_prob, clamped })
    }
}

fn one_hot<F: Scalar>(psi: &[usize], k: usize) -> Matrix<F> {
    let mut w = Matrix::zeros(psi.len(), k);
    for (d, &i) in psi.iter().enumerate() {
        w[(d, i)] = F::one();
    }
    w
}

fn softmax_rows<F: Scalar>(m: &Matrix<F>) -> Matrix<F> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            z = z + *x;
        }
        for x in row.iter_mut() {
            *x = *x / z;
        }
    }
    out
}
