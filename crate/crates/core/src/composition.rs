//! Stitching shared latent blocks from several sources and the projection ρ.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient, Activation, CosineWarmup, DenseNet, OptimizerState};
use crate::classifier::ChangeReport;
use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;
use crate::representation::{Assignment, LatentSequence};
use crate::Scalar;

/// What the planner needs from one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub name: String,
    pub assignment: Assignment,
    pub report: ChangeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptBlock {
    pub variable: usize,
    pub source: usize,
    /// Latent dims in the source representation, ascending.
    pub dims: Vec<usize>,
}

/// How a variable kept by several sources was assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub variable: usize,
    pub winner: usize,
    /// `(source, max delta)` of every candidate.
    pub candidates: Vec<(usize, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchPlan {
    pub source_names: Vec<String>,
    /// Shared (kept) variables per source before duplicate removal.
    pub shared: Vec<Vec<usize>>,
    /// Final blocks in output order.
    pub blocks: Vec<KeptBlock>,
    pub resolutions: Vec<Resolution>,
    /// Target variables no source keeps.
    pub gaps: Vec<usize>,
}

impl StitchPlan {
    pub fn stitched_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dims.len()).sum()
    }

    pub fn covered(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.variable).collect()
    }
}

/// Keeps, per source, the target variables it did not flag as changed; a
/// variable kept by several sources goes to the one with the smaller max
/// rate delta (ties to the lower source index).
pub fn plan_stitch(sources: &[SourceSummary], target_vars: &[usize]) -> Result<StitchPlan> {
    if sources.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let shared: Vec<Vec<usize>> = sources
        .iter()
        .map(|s| {
            target_vars
                .iter()
                .copied()
                .filter(|&v| v < s.assignment.num_variables())
                .filter(|&v| !s.report.is_detected(v))
                .filter(|&v| s.assignment.dims_of(v).is_ok())
                .collect()
        })
        .collect();
    let delta = |l: usize, v: usize| sources[l].report.max_delta.get(v).copied().flatten();
    let mut blocks = Vec::new();
    let mut resolutions = Vec::new();
    let mut gaps = Vec::new();
    let mut vars = target_vars.to_vec();
    vars.sort_unstable();
    vars.dedup();
    for v in vars {
        let candidates: Vec<usize> = (0..sources.len()).filter(|&l| shared[l].contains(&v)).collect();
        let Some(&first) = candidates.first() else {
            warn!("target variable {v} is not kept by any source");
            gaps.push(v);
            continue;
        };
        let mut winner = first;
        for &l in &candidates[1..] {
            let (a, b) = (delta(l, v).unwrap_or(f64::INFINITY), delta(winner, v).unwrap_or(f64::INFINITY));
            if a < b {
                winner = l;
            }
        }
        if candidates.len() > 1 {
            resolutions.push(Resolution {
                variable: v,
                winner,
                candidates: candidates.iter().map(|&l| (l, delta(l, v))).collect(),
            });
        }
        blocks.push(KeptBlock {
            variable: v,
            source: winner,
            dims: sources[winner].assignment.dims_of(v)?,
        });
    }
    Ok(StitchPlan {
        source_names: sources.iter().map(|s| s.name.clone()).collect(),
        shared,
        blocks,
        resolutions,
        gaps,
    })
}

/// Concatenates the kept blocks in plan order; `latents[l]` is source `l`'s
/// encoding of the target trajectory.
pub fn stitch<F: Scalar>(plan: &StitchPlan, latents: &[LatentSequence<F>]) -> Result<LatentSequence<F>> {
    if plan.blocks.is_empty() {
        return Err(Error::EmptyPlan);
    }
    ensure_dim("stitch sources", plan.source_names.len(), latents.len())?;
    let t = latents[0].len();
    if latents.iter().any(|s| s.len() != t) {
        return Err(Error::Misaligned(format!(
            "source sequences have lengths {:?}",
            latents.iter().map(|s| s.len()).collect::<Vec<_>>()
        )));
    }
    let dim = plan.stitched_dim();
    let num_vars = latents.iter().map(|s| s.assignment.num_variables()).max().unwrap_or(0);
    let mut values = Matrix::zeros(t, dim);
    let mut map = Vec::with_capacity(dim);
    let mut col = 0;
    for b in &plan.blocks {
        let src = &latents[b.source].values;
        for &d in &b.dims {
            if d >= src.cols() {
                return Err(Error::InvalidArgument(format!(
                    "source {} has no latent dim {d}",
                    plan.source_names[b.source]
                )));
            }
            for r in 0..t {
                values[(r, col)] = src[(r, d)];
            }
            map.push(Some(b.variable));
            col += 1;
        }
    }
    let environment = latents[0].environment.clone();
    LatentSequence::new(values, Assignment::new(map, num_vars)?, environment, "stitched")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of rows held out for the reported MSE.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            hidden: 128,
            learning_rate: 1e-3,
            batch_size: 512,
            epochs: 100,
            holdout: 0.2,
            seed: 0,
        }
    }
}

/// `ρ`: stitched latents to a fixed downstream dimensionality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection<F> {
    pub net: DenseNet<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStats {
    pub initial_mse: f64,
    pub final_mse: f64,
    pub warnings: Vec<String>,
}

impl<F: Scalar> Projection<F> {
    pub fn new<R: rand::Rng + ?Sized>(input_dim: usize, output_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if output_dim == 0 {
            return Err(Error::InvalidArgument("projection output dim must be positive".into()));
        }
        Ok(Projection {
            net: DenseNet::random(&[input_dim, hidden, output_dim], Activation::Swish, 1.0, rng)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn apply(&self, x: &Matrix<F>) -> Result<Matrix<F>> {
        self.net.forward_batch(x)
    }
}

fn mse<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>) -> f64 {
    let n = a.len().max(1) as f64;
    a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>() / n
}

/// Trains `ρ` to reconstruct `targets` (its column count is the required dim) from `inputs`.
pub fn fit_projection<F: Scalar>(
    inputs: &Matrix<F>,
    targets: &Matrix<F>,
    config: &ProjectionConfig,
) -> Result<(Projection<F>, ProjectionStats)> {
    ensure_dim("projection rows", inputs.rows(), targets.rows())?;
    if inputs.rows() < 2 {
        return Err(Error::InvalidArgument("projection needs at least two rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut warnings = Vec::new();
    if targets.cols() > inputs.cols() {
        let msg = format!(
            "required dim {} exceeds stitched dim {}; reconstruction may be degenerate",
            targets.cols(),
            inputs.cols()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let mut proj = Projection::new(inputs.cols(), targets.cols(), config.hidden, &mut rng)?;
    let mut rows: Vec<usize> = (0..inputs.rows()).collect();
    rows.shuffle(&mut rng);
    let n_held = ((inputs.rows() as f64 * config.holdout).round() as usize).min(inputs.rows() - 1);
    let (held, train) = rows.split_at(n_held);
    let eval_rows = if held.is_empty() { train } else { held };
    let (xe, ye) = (inputs.select_rows(eval_rows), targets.select_rows(eval_rows));
    let initial_mse = mse(&proj.apply(&xe)?, &ye);

    let mut order = train.to_vec();
    let batch = config.batch_size.clamp(1, order.len());
    let schedule = CosineWarmup {
        warmup_steps: 0,
        total_steps: config.epochs * order.len().div_ceil(batch),
    };
    let mut params = proj.net.params().clone();
    let mut opt = OptimizerState::adamw(params.len(), F::lit(config.learning_rate), F::zero());
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let (xb, yb) = (inputs.select_rows(chunk), targets.select_rows(chunk));
            let net = &proj.net;
            let (_, grad) = gradient(&params, |tape, bound| {
                let out = net.forward_tape(tape, bound, tape.leaf(xb));
                tape.mean(tape.square(tape.sub(out, tape.leaf(yb))))
            })?;
            opt.step_in_place(&mut params, &grad, schedule.factor(step))?;
            proj.net.set_params(params.clone())?;
            step += 1;
        }
    }
    let final_mse = mse(&proj.apply(&xe)?, &ye);
    Ok((
        proj,
        ProjectionStats {
            initial_mse,
            final_mse,
            warnings,
        },
    ))
}
