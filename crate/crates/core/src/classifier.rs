//! Intervention-target classifier, per-cell error rates and change detection.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient, Activation, CosineWarmup, DenseNet, OptimizerState, Tape};
use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;
use crate::process::TargetMatrix;
use crate::representation::LatentSequence;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training transitions are subsampled to at most this many.
    pub max_samples: usize,
    /// Cells with fewer samples in the rate denominator are not evaluable.
    pub min_support: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 16,
            epochs: 30,
            learning_rate: 2e-2,
            batch_size: 256,
            max_samples: 3000,
            min_support: 5,
            seed: 0,
        }
    }
}

/// One head per (latent block `i`, target `j`), each reading
/// `concat(z^{t-1}, z^t_{ψ_i})` and predicting `I^t_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetClassifier<F> {
    num_targets: usize,
    /// Latent dims of each block, ascending.
    blocks: Vec<Vec<usize>>,
    /// Per latent dim standardization `(mean, std)`.
    loc: Vec<F>,
    scale: Vec<F>,
    heads: Vec<DenseNet<F>>,
    pub config: ClassifierConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierStats {
    /// Mean training cross-entropy per head before and after training, row-major in `(i, j)`.
    pub initial_loss: Vec<f64>,
    pub final_loss: Vec<f64>,
    pub train_samples: usize,
}

impl<F: Scalar> TargetClassifier<F> {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_targets(&self) -> usize {
        self.num_targets
    }

    pub fn head(&self, i: usize, j: usize) -> &DenseNet<F> {
        &self.heads[i * self.num_targets + j]
    }

    pub fn head_mut(&mut self, i: usize, j: usize) -> &mut DenseNet<F> {
        &mut self.heads[i * self.num_targets + j]
    }

    pub fn block(&self, i: usize) -> &[usize] {
        &self.blocks[i]
    }

    /// Standardized head inputs for block `i` on transitions `rows → rows + 1`.
    fn inputs(&self, values: &Matrix<F>, i: usize, rows: &[usize]) -> Matrix<F> {
        let m = values.cols();
        let block = &self.blocks[i];
        let mut out = Matrix::zeros(rows.len(), m + block.len());
        for (r, &t) in rows.iter().enumerate() {
            let (prev, next) = (values.row(t), values.row(t + 1));
            let row = out.row_mut(r);
            for d in 0..m {
                row[d] = (prev[d] - self.loc[d]) / self.scale[d];
            }
            for (q, &d) in block.iter().enumerate() {
                row[m + q] = (next[d] - self.loc[d]) / self.scale[d];
            }
        }
        out
    }

    /// Logits of head `(i, j)` for every transition of `latents`.
    pub fn logits(&self, latents: &Matrix<F>, i: usize, j: usize) -> Result<Vec<F>> {
        ensure_dim("classifier latents", self.loc.len(), latents.cols())?;
        let rows: Vec<usize> = (0..latents.rows().saturating_sub(1)).collect();
        let out = self.head(i, j).forward_batch(&self.inputs(latents, i, &rows))?;
        Ok(out.into_vec())
    }

    /// Predicted bits (`sigmoid(logit) > 0.5`) per transition.
    pub fn predict(&self, latents: &Matrix<F>, i: usize, j: usize) -> Result<Vec<bool>> {
        Ok(self.logits(latents, i, j)?.into_iter().map(|l| l > F::zero()).collect())
    }
}

fn bce<F: Scalar>(logits: &[F], labels: &[F]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| {
            let l = l.as_f64();
            l.max(0.0) + (-l.abs()).exp().ln_1p() - y.as_f64() * l
        })
        .sum::<f64>()
        / n
}

fn check_targets(targets: &TargetMatrix) -> Result<()> {
    let t = targets.steps();
    for j in 0..targets.num_variables() {
        let col = targets.column(j);
        let pos = col[1..t].iter().filter(|&&b| b).count();
        if pos == 0 || pos == t - 1 {
            return Err(Error::DegenerateTarget(j));
        }
    }
    Ok(())
}

/// Trains every `(i, j)` head independently; heads train in parallel.
pub fn train_classifier<F: Scalar>(
    latents: &LatentSequence<F>,
    targets: &TargetMatrix,
    config: &ClassifierConfig,
) -> Result<(TargetClassifier<F>, ClassifierStats)> {
    let t = latents.len();
    ensure_dim("classifier targets", t, targets.steps())?;
    if t < 2 {
        return Err(Error::InvalidArgument("classifier needs at least two steps".into()));
    }
    check_targets(targets)?;
    let k = targets.num_variables();
    let values = &latents.values;
    let m = values.cols();
    let blocks: Vec<Vec<usize>> = (0..latents.assignment.num_variables())
        .map(|i| latents.assignment.as_slice().iter().enumerate().filter(|(_, v)| **v == Some(i)).map(|(d, _)| d).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows: Vec<usize> = (0..t - 1).collect();
    if rows.len() > config.max_samples {
        rows.shuffle(&mut rng);
        rows.truncate(config.max_samples);
        rows.sort_unstable();
    }

    let n = F::from_usize_lossy(rows.len());
    let mut loc = vec![F::zero(); m];
    let mut scale = vec![F::one(); m];
    for d in 0..m {
        let mean = rows.iter().map(|&r| values[(r, d)]).sum::<F>() / n;
        let var = rows.iter().map(|&r| (values[(r, d)] - mean).powi(2)).sum::<F>() / n;
        loc[d] = mean;
        if var > F::lit(1e-12) {
            scale[d] = var.sqrt();
        }
    }

    let mut clf = TargetClassifier {
        num_targets: k,
        blocks,
        loc,
        scale,
        heads: Vec::new(),
        config: config.clone(),
    };
    let inputs: Vec<Matrix<F>> = (0..clf.blocks.len()).map(|i| clf.inputs(values, i, &rows)).collect();
    let labels: Vec<Vec<F>> = (0..k)
        .map(|j| rows.iter().map(|&r| if targets.get(r + 1, j) { F::one() } else { F::zero() }).collect())
        .collect();

    let cells: Vec<(usize, usize)> = (0..clf.blocks.len()).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
    let trained = cells
        .par_iter()
        .map(|&(i, j)| {
            let seed = config.seed ^ ((i as u64) << 32 | j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            train_head(&inputs[i], &labels[j], config, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stats = ClassifierStats {
        initial_loss: Vec::with_capacity(cells.len()),
        final_loss: Vec::with_capacity(cells.len()),
        train_samples: rows.len(),
    };
    for (head, l0, l1) in trained {
        clf.heads.push(head);
        stats.initial_loss.push(l0);
        stats.final_loss.push(l1);
    }
    Ok((clf, stats))
}

fn train_head<F: Scalar>(
    x: &Matrix<F>,
    y: &[F],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(DenseNet<F>, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DenseNet::random(&[x.cols(), config.hidden, 1], Activation::Swish, 1.0, &mut rng)?;
    let initial = bce(net.forward_batch(x)?.as_slice(), y);
    let n = x.rows();
    let batch = config.batch_size.clamp(1, n);
    let schedule = CosineWarmup {
        warmup_steps: 0,
        total_steps: config.epochs * n.div_ceil(batch),
    };
    let mut params = net.params().clone();
    let mut opt = OptimizerState::adamw(params.len(), F::lit(config.learning_rate), F::zero());
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xb = x.select_rows(chunk);
            let yb = Matrix::from_vec(chunk.len(), 1, chunk.iter().map(|&r| y[r]).collect())?;
            let (_, grad) = gradient(&params, |tape: &Tape<F>, bound| {
                let logit = net.forward_tape(tape, bound, tape.leaf(xb));
                let yv = tape.leaf(yb);
                tape.mean(tape.sub(tape.softplus(logit), tape.mul(yv, logit)))
            })?;
            opt.step_in_place(&mut params, &grad, schedule.factor(step))?;
            net.set_params(params.clone())?;
            step += 1;
        }
    }
    let fin = bce(net.forward_batch(x)?.as_slice(), y);
    Ok((net, initial, fin))
}

/// FPR/FNR indexed by `(k, i, j)`: conditioning intervention, latent block, predicted target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTensor {
    pub num_targets: usize,
    pub num_blocks: usize,
    fpr: Vec<Option<f64>>,
    fnr: Vec<Option<f64>>,
    /// Negatives (FP + TN) and positives (FN + TP) per cell.
    negatives: Vec<usize>,
    positives: Vec<usize>,
}

impl RateTensor {
    fn index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.num_blocks + i) * self.num_targets + j
    }

    pub fn fpr(&self, k: usize, i: usize, j: usize) -> Option<f64> {
        self.fpr[self.index(k, i, j)]
    }

    pub fn fnr(&self, k: usize, i: usize, j: usize) -> Option<f64> {
        self.fnr[self.index(k, i, j)]
    }

    pub fn negatives(&self, k: usize, i: usize, j: usize) -> usize {
        self.negatives[self.index(k, i, j)]
    }

    pub fn positives(&self, k: usize, i: usize, j: usize) -> usize {
        self.positives[self.index(k, i, j)]
    }

    /// Builds rates from per-head predictions `predictions[i][j][t]` for
    /// transitions `t → t + 1`, scored against `targets` row `t + 1`.
    pub fn from_predictions(predictions: &[Vec<Vec<bool>>], targets: &TargetMatrix, min_support: usize) -> Result<Self> {
        let k = targets.num_variables();
        let nb = predictions.len();
        let steps = targets.steps().saturating_sub(1);
        let mut tensor = RateTensor {
            num_targets: k,
            num_blocks: nb,
            fpr: vec![None; k * nb * k],
            fnr: vec![None; k * nb * k],
            negatives: vec![0; k * nb * k],
            positives: vec![0; k * nb * k],
        };
        let min_support = min_support.max(1);
        for (i, per_j) in predictions.iter().enumerate() {
            ensure_dim("prediction targets", k, per_j.len())?;
            for (j, pred) in per_j.iter().enumerate() {
                ensure_dim("prediction steps", steps, pred.len())?;
                for kk in 0..k {
                    let (mut fp, mut tn, mut fnn, mut tp) = (0usize, 0usize, 0usize, 0usize);
                    for (t, &p) in pred.iter().enumerate() {
                        let row = targets.row(t + 1);
                        if !row[kk] {
                            continue;
                        }
                        match (p, row[j]) {
                            (true, false) => fp += 1,
                            (false, false) => tn += 1,
                            (false, true) => fnn += 1,
                            (true, true) => tp += 1,
                        }
                    }
                    let idx = tensor.index(kk, i, j);
                    tensor.negatives[idx] = fp + tn;
                    tensor.positives[idx] = fnn + tp;
                    if fp + tn >= min_support {
                        tensor.fpr[idx] = Some(fp as f64 / (fp + tn) as f64);
                    }
                    if fnn + tp >= min_support {
                        tensor.fnr[idx] = Some(fnn as f64 / (fnn + tp) as f64);
                    }
                }
            }
        }
        Ok(tensor)
    }
}

/// Rates of every head on `latents` and `targets`, conditioned on each `I_k = 1`.
pub fn compute_rates<F: Scalar>(clf: &TargetClassifier<F>, latents: &LatentSequence<F>, targets: &TargetMatrix) -> Result<RateTensor> {
    ensure_dim("rate targets", latents.len(), targets.steps())?;
    ensure_dim("rate target count", clf.num_targets(), targets.num_variables())?;
    let k = clf.num_targets();
    let predictions = (0..clf.num_blocks())
        .into_par_iter()
        .map(|i| (0..k).map(|j| clf.predict(&latents.values, i, j)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    RateTensor::from_predictions(&predictions, targets, clf.config.min_support)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionCriterion {
    #[default]
    FprOnly,
    FprOrFnr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeReport {
    pub detected: Vec<usize>,
    pub tau: f64,
    pub criterion: DetectionCriterion,
    /// Largest absolute delta per target under the criterion, `None` if no cell was evaluable.
    pub max_delta: Vec<Option<f64>>,
    pub cells: Vec<CellDelta>,
    pub warnings: Vec<String>,
}

impl ChangeReport {
    pub fn is_detected(&self, j: usize) -> bool {
        self.detected.contains(&j)
    }
}

/// `Ĉ_ch = { j : ∃ i, k with |Δrate| > τ }`; cells not evaluable on either side are skipped.
pub fn detect_changes(source: &RateTensor, target: &RateTensor, tau: f64, criterion: DetectionCriterion) -> Result<ChangeReport> {
    ensure_dim("rate targets", source.num_targets, target.num_targets)?;
    ensure_dim("rate blocks", source.num_blocks, target.num_blocks)?;
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside [0, 1)")));
    }
    let k = source.num_targets;
    let delta = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| (a - b).abs());
    let mut max_delta: Vec<Option<f64>> = vec![None; k];
    let mut cells = Vec::new();
    for kk in 0..k {
        for i in 0..source.num_blocks {
            for j in 0..k {
                let cell = CellDelta {
                    k: kk,
                    i,
                    j,
                    fpr: delta(source.fpr(kk, i, j), target.fpr(kk, i, j)),
                    fnr: delta(source.fnr(kk, i, j), target.fnr(kk, i, j)),
                };
                let score = match criterion {
                    DetectionCriterion::FprOnly => cell.fpr,
                    DetectionCriterion::FprOrFnr => match (cell.fpr, cell.fnr) {
                        (Some(a), Some(b)) => Some(a.max(b)),
                        (a, b) => a.or(b),
                    },
                };
                if let Some(s) = score {
                    max_delta[j] = Some(max_delta[j].map_or(s, |m: f64| m.max(s)));
                }
                cells.push(cell);
            }
        }
    }
    let mut warnings = Vec::new();
    for (j, m) in max_delta.iter().enumerate() {
        if m.is_none() {
            let msg = format!("target {j} has no evaluable cell and is excluded");
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    let detected = (0..k).filter(|&j| max_delta[j].is_some_and(|m| m > tau)).collect();
    Ok(ChangeReport {
        detected,
        tau,
        criterion,
        max_delta,
        cells,
        warnings,
    })
}
