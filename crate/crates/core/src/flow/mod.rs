//! Normalizing-flow adaptation of the changed latent block under a
//! conditional transition prior, trained by maximum likelihood.

mod autoregressive;
mod linear;
mod prior;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient, Activation, CosineWarmup, DenseNet, OptimizerState, ParamVector, Tape, Var};
use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;
use crate::process::TargetMatrix;
use crate::representation::LatentSequence;
use crate::Scalar;

pub use autoregressive::AffineAutoregressiveFlow;
pub use linear::LinearFlow;
pub use prior::{PriorEval, TransitionPrior};

/// An invertible map with a tractable log-determinant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Flow<F> {
    Autoregressive(AffineAutoregressiveFlow<F>),
    Linear(LinearFlow<F>),
}

impl<F: Scalar> Flow<F> {
    pub fn dim(&self) -> usize {
        match self {
            Flow::Autoregressive(f) => f.dim(),
            Flow::Linear(f) => f.dim(),
        }
    }

    pub fn params(&self) -> &ParamVector<F> {
        match self {
            Flow::Autoregressive(f) => f.params(),
            Flow::Linear(f) => f.params(),
        }
    }

    pub fn set_params(&mut self, params: ParamVector<F>) -> Result<()> {
        match self {
            Flow::Autoregressive(f) => f.set_params(params),
            Flow::Linear(f) => f.set_params(params),
        }
    }

    pub fn init_from_data(&mut self, data: &Matrix<F>) {
        match self {
            Flow::Autoregressive(f) => f.init_from_data(data),
            Flow::Linear(f) => f.init_from_data(data),
        }
    }

    pub fn forward_tape(&self, tape: &Tape<F>, bound: &[Var], x: Var) -> (Var, Var) {
        match self {
            Flow::Autoregressive(f) => f.forward_tape(tape, bound, x),
            Flow::Linear(f) => f.forward_tape(tape, bound, x),
        }
    }

    pub fn forward(&self, x: &Matrix<F>) -> Result<(Matrix<F>, Vec<F>)> {
        match self {
            Flow::Autoregressive(f) => f.forward(x),
            Flow::Linear(f) => f.forward(x),
        }
    }

    pub fn inverse(&self, y: &Matrix<F>) -> Result<Matrix<F>> {
        match self {
            Flow::Autoregressive(f) => f.inverse(y),
            Flow::Linear(f) => f.inverse(y),
        }
    }

    /// Inverse plus the per-row log-determinant of the inverse map.
    pub fn inverse_with_log_det(&self, y: &Matrix<F>) -> Result<(Matrix<F>, Vec<F>)> {
        match self {
            Flow::Autoregressive(f) => f.inverse_with_log_det(y),
            Flow::Linear(f) => Ok((f.inverse(y)?, vec![-f.log_det(); y.rows()])),
        }
    }
}

/// `(NF(z), log|det ∂NF/∂z|)` for one vector.
pub fn flow_forward<F: Scalar>(flow: &Flow<F>, z: &[F]) -> Result<(Vec<F>, F)> {
    let (r, ld) = flow.forward(&Matrix::row_vector(z))?;
    Ok((r.into_vec(), ld[0]))
}

pub fn flow_inverse<F: Scalar>(flow: &Flow<F>, r: &[F]) -> Result<Vec<F>> {
    Ok(flow.inverse(&Matrix::row_vector(r))?.into_vec())
}

/// Joint log density of the prior for single vectors; see [`TransitionPrior::log_prob`].
pub fn prior_log_prob<F: Scalar>(prior: &TransitionPrior<F>, r_next: &[F], r_prev: &[F], targets: &[bool]) -> Result<PriorEval<F>> {
    let t: Vec<F> = targets.iter().map(|&b| if b { F::one() } else { F::zero() }).collect();
    prior.log_prob(&Matrix::row_vector(r_next), &Matrix::row_vector(r_prev), &Matrix::row_vector(&t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub classifier_weight: f64,
    pub beta_alo: f64,
    pub beta_reg: f64,
    pub seed: u64,
    /// Record the full-data log-likelihood after every epoch.
    pub track_curve: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub flow_depth: usize,
    pub hidden_per_dim: usize,
    pub prior_hidden: usize,
    pub classifier_hidden: usize,
    pub sigma_floor: f64,
    pub train: TrainConfig,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            flow_depth: 4,
            hidden_per_dim: 16,
            prior_hidden: 64,
            classifier_hidden: 64,
            sigma_floor: 1e-3,
            train: TrainConfig {
                learning_rate: 1e-2,
                batch_size: 1024,
                epochs: 100,
                warmup_steps: 100,
                weight_decay: 5e-3,
                classifier_weight: 2.0,
                beta_alo: 2.0,
                beta_reg: 2.0,
                seed: 0,
                track_curve: false,
            },
        }
    }
}

/// Flow, transition prior and auxiliary target heads trained together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel<F> {
    pub flow: Flow<F>,
    pub prior: TransitionPrior<F>,
    /// One head per variable predicting `I_i^{t+1}` from `(r^t, r^{t+1} ⊙ w_i)`.
    pub heads: Vec<DenseNet<F>>,
}

/// Loss terms of one evaluation, averaged over transitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub log_likelihood: f64,
    pub classifier: f64,
    pub reg: f64,
    pub alo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Full-data mean log-likelihood per epoch.
    pub curve: Vec<f64>,
    pub final_terms: LossTerms,
    pub clamp_count: usize,
}

fn bits_matrix<F: Scalar>(targets: &TargetMatrix) -> Matrix<F> {
    let (n, k) = (targets.steps(), targets.num_variables());
    let mut m = Matrix::zeros(n, k);
    for t in 0..n {
        for (j, &b) in targets.row(t).iter().enumerate() {
            if b {
                m[(t, j)] = F::one();
            }
        }
    }
    m
}

impl<F: Scalar> TransitionModel<F> {
    pub fn new<R: rand::Rng + ?Sized>(
        flow: Flow<F>,
        num_vars: usize,
        prior_hidden: usize,
        classifier_hidden: usize,
        sigma_floor: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let m = flow.dim();
        let prior = TransitionPrior::new(m, num_vars, prior_hidden, sigma_floor, rng)?;
        let heads = (0..num_vars)
            .map(|_| DenseNet::random(&[2 * m, classifier_hidden, 1], Activation::Swish, 1.0, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransitionModel { flow, prior, heads })
    }

    fn block_counts(&self) -> Vec<usize> {
        let mut counts = vec![self.flow.params().num_blocks(), self.prior.num_blocks()];
        counts.extend(self.heads.iter().map(|h| h.params().num_blocks()));
        counts
    }

    pub fn params(&self) -> ParamVector<F> {
        let prior = self.prior.params();
        let mut parts = vec![self.flow.params(), &prior];
        parts.extend(self.heads.iter().map(|h| h.params()));
        ParamVector::concat(&parts)
    }

    pub fn set_params(&mut self, params: ParamVector<F>) -> Result<()> {
        let mut parts = params.split(&self.block_counts())?.into_iter();
        self.flow.set_params(parts.next().expect("flow part"))?;
        self.prior.set_params(parts.next().expect("prior part"))?;
        for (h, p) in self.heads.iter_mut().zip(parts) {
            h.set_params(p)?;
        }
        Ok(())
    }

    /// Records the loss on transitions `rows → rows + 1`; returns `(loss, terms)`.
    fn loss_tape(
        &self,
        tape: &Tape<F>,
        bound: &[Var],
        data: &Matrix<F>,
        targets: &Matrix<F>,
        rows: &[usize],
        cfg: &TrainConfig,
    ) -> (Var, [Var; 4]) {
        let counts = self.block_counts();
        let (nf, np) = (counts[0], counts[1]);
        let next_rows: Vec<usize> = rows.iter().map(|r| r + 1).collect();
        let z_prev = tape.leaf(data.select_rows(rows));
        let z_next = tape.leaf(data.select_rows(&next_rows));
        let tg = tape.leaf(targets.select_rows(&next_rows));
        let flow_b = &bound[..nf];
        let prior_b = &bound[nf..nf + np];
        let (r_prev, _) = self.flow.forward_tape(tape, flow_b, z_prev);
        let (r_next, log_det) = self.flow.forward_tape(tape, flow_b, z_next);
        let lp = self.prior.log_prob_tape(tape, prior_b, r_next, r_prev, tg);
        let ll = tape.mean(tape.add(lp, log_det));
        let k = self.prior.num_vars();
        let m = self.prior.latent_dim();

        let w = match self.prior.hard_assignment() {
            Some(_) => tape.leaf(self.prior.assignment_weights()),
            None => tape.softmax_rows(prior_b[np - 1]),
        };
        let mut offset = nf + np;
        let mut cls = tape.leaf(Matrix::scalar(F::zero()));
        for (i, head) in self.heads.iter().enumerate() {
            let nb = head.params().num_blocks();
            let w_row = tape.transpose(tape.col_slice(w, i, 1));
            let input = tape.concat(&[r_prev, tape.mul(r_next, w_row)]);
            let logit = head.forward_tape(tape, &bound[offset..offset + nb], input);
            let y = tape.col_slice(tg, i, 1);
            let bce = tape.mean(tape.sub(tape.softplus(logit), tape.mul(y, logit)));
            cls = tape.add(cls, bce);
            offset += nb;
        }
        let cls = tape.scale(cls, F::one() / F::from_usize_lossy(k.max(1)));
        let reg = tape.mean(tape.sum_cols(tape.square(r_next)));
        let alo = if self.prior.hard_assignment().is_some() || k < 2 {
            tape.leaf(Matrix::scalar(F::zero()))
        } else {
            let usage = tape.scale(tape.sum_rows(w), F::one() / F::from_usize_lossy(m));
            let ent = tape.neg(tape.sum(tape.mul(usage, tape.ln(tape.add_scalar(usage, F::lit(1e-12))))));
            tape.add_scalar(tape.neg(ent), F::lit((k as f64).ln()))
        };
        let mut loss = tape.neg(ll);
        loss = tape.add(loss, tape.scale(cls, F::lit(cfg.classifier_weight)));
        loss = tape.add(loss, tape.scale(reg, F::lit(cfg.beta_reg)));
        loss = tape.add(loss, tape.scale(alo, F::lit(cfg.beta_alo)));
        (loss, [ll, cls, reg, alo])
    }

    /// Loss terms on all transitions of `data`.
    pub fn evaluate(&self, data: &Matrix<F>, targets: &TargetMatrix, cfg: &TrainConfig) -> Result<LossTerms> {
        let tg = bits_matrix(targets);
        let rows: Vec<usize> = (0..data.rows().saturating_sub(1)).collect();
        let params = self.params();
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (_, terms) = self.loss_tape(&tape, &bound, data, &tg, &rows, cfg);
        Ok(LossTerms {
            log_likelihood: tape.scalar(terms[0]).as_f64(),
            classifier: tape.scalar(terms[1]).as_f64(),
            reg: tape.scalar(terms[2]).as_f64(),
            alo: tape.scalar(terms[3]).as_f64(),
        })
    }

    /// Total loss and its gradient on the given transitions.
    pub fn loss_and_gradient(
        &self,
        data: &Matrix<F>,
        targets: &TargetMatrix,
        rows: &[usize],
        cfg: &TrainConfig,
    ) -> Result<(F, ParamVector<F>)> {
        let tg = bits_matrix(targets);
        gradient(&self.params(), |tape, bound| self.loss_tape(tape, bound, data, &tg, rows, cfg).0)
    }

    /// Minimizes the loss with AdamW under a cosine warmup schedule.
    pub fn fit(&mut self, data: &Matrix<F>, targets: &TargetMatrix, cfg: &TrainConfig) -> Result<TrainStats> {
        ensure_dim("model input", self.flow.dim(), data.cols())?;
        ensure_dim("target rows", data.rows(), targets.steps())?;
        ensure_dim("target variables", self.prior.num_vars(), targets.num_variables())?;
        if data.rows() < 2 {
            return Err(Error::InvalidArgument("need at least two steps".into()));
        }
        let tg = bits_matrix(targets);
        let n = data.rows() - 1;
        let batch = cfg.batch_size.clamp(1, n);
        let batches = n.div_ceil(batch);
        let schedule = CosineWarmup {
            warmup_steps: cfg.warmup_steps,
            total_steps: cfg.epochs * batches,
        };
        let mut params = self.params();
        let mut opt = OptimizerState::adamw(params.len(), F::lit(cfg.learning_rate), F::lit(cfg.weight_decay));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut curve = Vec::with_capacity(if cfg.track_curve { cfg.epochs } else { 0 });
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let (_, grad) = gradient(&params, |tape, bound| {
                    self.loss_tape(tape, bound, data, &tg, chunk, cfg).0
                })?;
                opt.step_in_place(&mut params, &grad, schedule.factor(step))?;
                self.set_params(params.clone())?;
                step += 1;
            }
            if cfg.track_curve {
                let ll = self.evaluate(data, targets, cfg)?.log_likelihood;
                if epoch % 50 == 0 {
                    debug!("epoch {epoch}: log-likelihood {ll:.4}");
                }
                curve.push(ll);
            }
        }
        let final_terms = self.evaluate(data, targets, cfg)?;
        let clamp_count = self.clamp_count(data, targets)?;
        Ok(TrainStats {
            curve,
            final_terms,
            clamp_count,
        })
    }

    /// Number of prior log-variances at the floor on all transitions.
    pub fn clamp_count(&self, data: &Matrix<F>, targets: &TargetMatrix) -> Result<usize> {
        let (r, _) = self.flow.forward(data)?;
        let n = r.rows();
        if n < 2 {
            return Ok(0);
        }
        let tg = bits_matrix::<F>(targets).row_range(1, n);
        Ok(self.prior.log_prob(&r.row_range(1, n), &r.row_range(0, n - 1), &tg)?.clamped)
    }
}

/// Adapted representation of the changed block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationResult<F> {
    /// Changed variables (indices into the source assignment).
    pub changed_vars: Vec<usize>,
    /// Latent dims replaced by the flow output, ascending.
    pub changed_dims: Vec<usize>,
    pub model: Option<TransitionModel<F>>,
    /// Hardened `ψ_ch`: index into `changed_vars` per changed dim.
    pub assignment: Vec<usize>,
    pub curve: Vec<f64>,
    pub clamp_count: usize,
}

impl<F: Scalar> AdaptationResult<F> {
    /// No-op result for an empty changed set.
    pub fn identity() -> Self {
        AdaptationResult {
            changed_vars: Vec::new(),
            changed_dims: Vec::new(),
            model: None,
            assignment: Vec::new(),
            curve: Vec::new(),
            clamp_count: 0,
        }
    }

    pub fn flow(&self) -> Option<&Flow<F>> {
        self.model.as_ref().map(|m| &m.flow)
    }
}

/// Trains the flow on the frozen latents of the changed variables.
///
/// `latents` are the source encoder's latents of the target trajectory and
/// `targets` its intervention targets (all `K` variables).
pub fn train_adaptation<F: Scalar>(
    latents: &LatentSequence<F>,
    targets: &TargetMatrix,
    changed_vars: &[usize],
    config: &AdaptationConfig,
) -> Result<AdaptationResult<F>> {
    if changed_vars.is_empty() {
        return Ok(AdaptationResult::identity());
    }
    ensure_dim("target rows", latents.len(), targets.steps())?;
    if latents.len() < 2 {
        return Err(Error::InvalidArgument("need at least two target steps".into()));
    }
    let mut changed_dims = Vec::new();
    for &v in changed_vars {
        changed_dims.extend(latents.assignment.dims_of(v)?);
    }
    changed_dims.sort_unstable();
    let sub_targets = targets.select_cols(changed_vars);
    for (j, f) in sub_targets.frequencies().into_iter().enumerate() {
        if f == 0.0 || f == 1.0 {
            return Err(Error::DegenerateTarget(changed_vars[j]));
        }
    }
    let z_ch = latents.values.select_cols(&changed_dims);
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut flow = Flow::Autoregressive(AffineAutoregressiveFlow::new(
        changed_dims.len(),
        config.flow_depth,
        config.hidden_per_dim,
        &mut rng,
    ));
    flow.init_from_data(&z_ch);
    let mut model = TransitionModel::new(
        flow,
        changed_vars.len(),
        config.prior_hidden,
        config.classifier_hidden,
        config.sigma_floor,
        &mut rng,
    )?;
    let stats = model.fit(&z_ch, &sub_targets, &config.train)?;
    model.prior.harden();
    let assignment = model.prior.hard_assignment().expect("hardened").to_vec();
    Ok(AdaptationResult {
        changed_vars: changed_vars.to_vec(),
        changed_dims,
        model: Some(model),
        assignment,
        curve: stats.curve,
        clamp_count: stats.clamp_count,
    })
}

/// Replaces the changed dims by the flow output; other dims are copied.
pub fn substitute<F: Scalar>(latents: &LatentSequence<F>, result: &AdaptationResult<F>) -> Result<LatentSequence<F>> {
    let mut out = latents.clone();
    let Some(flow) = result.flow() else {
        return Ok(out);
    };
    ensure_dim("adapted block", flow.dim(), result.changed_dims.len())?;
    let (r, _) = flow.forward(&latents.values.select_cols(&result.changed_dims))?;
    for t in 0..out.values.rows() {
        for (j, &c) in result.changed_dims.iter().enumerate() {
            out.values[(t, c)] = r[(t, j)];
        }
    }
    for (j, &c) in result.changed_dims.iter().enumerate() {
        out.assignment.set(c, Some(result.changed_vars[result.assignment[j]]))?;
    }
    out.encoder = format!("{}+adapted", latents.encoder);
    Ok(out)
}

#[cfg(test)]
mod tests;
