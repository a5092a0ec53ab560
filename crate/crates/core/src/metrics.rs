//! Correlation-based identifiability scores.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    R2,
    Spearman,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::R2 => "r2",
            MetricKind::Spearman => "spearman",
        }
    }
}

fn to_f64<F: Scalar>(v: &[F]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// `1 − SS_res / SS_tot`.
pub fn r_squared<F: Scalar>(predicted: &[F], truth: &[F]) -> Result<f64> {
    ensure_dim("r_squared inputs", truth.len(), predicted.len())?;
    if truth.len() < 2 {
        return Err(Error::InvalidArgument("r_squared needs at least two samples".into()));
    }
    let y = to_f64(truth);
    let p = to_f64(predicted);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if !(ss_tot > 0.0) {
        return Err(Error::UndefinedVariance("truth is constant".into()));
    }
    let ss_res: f64 = y.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Average ranks, 1-based.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson_f64(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx > 0.0 && syy > 0.0 {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    } else {
        None
    }
}

pub fn pearson<F: Scalar>(x: &[F], y: &[F]) -> Result<f64> {
    ensure_dim("pearson inputs", x.len(), y.len())?;
    pearson_f64(&to_f64(x), &to_f64(y))
        .ok_or_else(|| Error::UndefinedVariance("constant input".into()))
}

/// Pearson correlation of average-ranked data.
pub fn spearman<F: Scalar>(x: &[F], y: &[F]) -> Result<f64> {
    ensure_dim("spearman inputs", x.len(), y.len())?;
    if x.len() < 3 {
        return Err(Error::InvalidArgument("spearman needs at least three samples".into()));
    }
    pearson_f64(&ranks(&to_f64(x)), &ranks(&to_f64(y))).ok_or(Error::UndefinedRank)
}

/// R² of the least-squares line predicting `truth` from `x`.
pub fn linear_r2<F: Scalar>(x: &[F], truth: &[F]) -> Result<f64> {
    ensure_dim("linear_r2 inputs", x.len(), truth.len())?;
    let xs = to_f64(x);
    let ys = to_f64(truth);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let pred: Vec<f64> = xs.iter().map(|v| my + slope * (v - mx)).collect();
    r_squared(&pred, &ys)
}

/// Score of one learned column against one ground-truth column.
pub fn score<F: Scalar>(kind: MetricKind, x: &[F], truth: &[F]) -> Result<f64> {
    match kind {
        MetricKind::R2 => linear_r2(x, truth),
        MetricKind::Spearman => spearman(x, truth),
    }
}

/// `2·diag·(1 − off) / (diag + 1 − off)`.
pub fn combined_correlation(diag: f64, off_diag: f64) -> f64 {
    let keep = 1.0 - off_diag;
    let denom = diag + keep;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * diag * keep / denom
    }
}

/// Matched `K × K` score matrix: row `k` is the learned block matched to truth `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub kind: MetricKind,
    pub values: Matrix<f64>,
    /// Learned block matched to each truth variable, if any.
    pub matching: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub kind: MetricKind,
    pub diag: f64,
    pub off_diag: f64,
    pub cc: f64,
    pub per_variable: Vec<f64>,
    /// Truth variables left without a learned block.
    pub unmatched: Vec<usize>,
}

/// Absolute scores of every learned block against every truth column.
///
/// A block's score is the maximum over its dims; constant dims score zero.
pub fn score_table<F: Scalar>(blocks: &[Matrix<F>], truth: &[Vec<F>], kind: MetricKind) -> Result<Matrix<f64>> {
    let mut table = Matrix::zeros(blocks.len(), truth.len());
    for (l, block) in blocks.iter().enumerate() {
        for (k, col) in truth.iter().enumerate() {
            ensure_dim("latent block length", col.len(), block.rows())?;
            let mut best: f64 = 0.0;
            for d in 0..block.cols() {
                match score(kind, &block.column(d), col) {
                    Ok(v) => best = best.max(v.abs()),
                    Err(Error::UndefinedRank) | Err(Error::UndefinedVariance(_)) => {
                        warn!("learned block {l} dim {d} is constant; scored 0");
                    }
                    Err(e) => return Err(e),
                }
            }
            table[(l, k)] = best;
        }
    }
    Ok(table)
}

/// Greedy matching: repeatedly take the highest remaining entry, each side used once.
pub fn greedy_matching(table: &Matrix<f64>) -> Vec<Option<usize>> {
    let (rows, cols) = table.shape();
    let mut cells: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    cells.sort_by(|a, b| table[*b].total_cmp(&table[*a]).then(a.cmp(b)));
    let mut used_row = vec![false; rows];
    let mut matching = vec![None; cols];
    for (r, c) in cells {
        if !used_row[r] && matching[c].is_none() {
            used_row[r] = true;
            matching[c] = Some(r);
        }
    }
    matching
}

/// Summary of a score table under a given matching.
pub fn summarize(table: &Matrix<f64>, matching: &[Option<usize>], kind: MetricKind) -> (CorrelationMatrix, ScoreSummary) {
    let k = table.cols();
    let mut values = Matrix::zeros(k, k);
    for (c, m) in matching.iter().enumerate() {
        if let Some(r) = m {
            for j in 0..k {
                values[(c, j)] = table[(*r, j)];
            }
        }
    }
    let per_variable: Vec<f64> = (0..k).map(|i| values[(i, i)]).collect();
    let diag = per_variable.iter().sum::<f64>() / k as f64;
    let off_diag = if k > 1 {
        (0..k)
            .map(|i| (0..k).filter(|&j| j != i).map(|j| values[(i, j)]).fold(0.0, f64::max))
            .sum::<f64>()
            / k as f64
    } else {
        0.0
    };
    let unmatched = (0..k).filter(|&c| matching[c].is_none()).collect();
    let summary = ScoreSummary {
        kind,
        diag,
        off_diag,
        cc: combined_correlation(diag, off_diag),
        per_variable,
        unmatched,
    };
    (
        CorrelationMatrix {
            kind,
            values,
            matching: matching.to_vec(),
        },
        summary,
    )
}

/// Scores learned blocks against ground-truth columns under greedy matching.
pub fn match_and_score<F: Scalar>(
    blocks: &[Matrix<F>],
    truth: &[Vec<F>],
    kind: MetricKind,
) -> Result<(CorrelationMatrix, ScoreSummary)> {
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no ground-truth variables to score".into()));
    }
    let table = score_table(blocks, truth, kind)?;
    let matching = greedy_matching(&table);
    let out = summarize(&table, &matching, kind);
    if !out.1.unmatched.is_empty() {
        warn!("truth variables {:?} have no learned block; scored 0", out.1.unmatched);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn r_squared_examples() {
        let t = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
        assert_eq!(r_squared(&[2.5; 4], &t).unwrap(), 0.0);
        assert!((r_squared(&[1.0, 2.0, 3.0, 5.0], &t).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(r_squared(&t, &[1.0; 4]), Err(Error::UndefinedVariance(_))));
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[2.0, 4.0, 8.0, 9.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        let rho = spearman(&x, &[1.0, 3.0, 2.0, 5.0, 4.0]).unwrap();
        // Brute force: Pearson of the ranks (the inputs already are ranks).
        let d2: f64 = [0.0, 1.0, 1.0, 1.0, 1.0].iter().sum();
        assert!((rho - (1.0 - 6.0 * d2 / (5.0 * 24.0))).abs() < 1e-12);
        assert!((rho - 0.8).abs() < 1e-12);
        assert!(matches!(spearman(&x, &[1.0; 5]), Err(Error::UndefinedRank)));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn combined_correlation_examples() {
        assert_eq!(combined_correlation(1.0, 0.0), 1.0);
        assert!((combined_correlation(0.8, 0.2) - 0.8).abs() < 1e-12);
        assert!((combined_correlation(0.94, 0.14) - 0.89822).abs() < 1e-5);
    }

    fn noisy_instance(rng: &mut ChaCha8Rng, k: usize, t: usize, noise: f64) -> (Vec<Matrix<f64>>, Vec<Vec<f64>>, Vec<usize>) {
        let truth: Vec<Vec<f64>> = (0..k).map(|_| (0..t).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let blocks = perm
            .iter()
            .map(|&src| {
                let mix = (src + 1) % k;
                let col: Vec<f64> = (0..t)
                    .map(|s| truth[src][s] + 0.3 * truth[mix][s] + noise * rng.random_range(-1.0..1.0))
                    .collect();
                Matrix::column_vector(&col)
            })
            .collect();
        (blocks, truth, perm)
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn greedy_close_to_optimal_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let k = rng.random_range(1..=5);
            let t = rng.random_range(10..=50);
            let (blocks, truth, _) = noisy_instance(&mut rng, k, t, 0.5);
            let table = score_table(&blocks, &truth, MetricKind::Spearman).unwrap();
            let (_, greedy) = summarize(&table, &greedy_matching(&table), MetricKind::Spearman);
            let best = permutations(k)
                .into_iter()
                .map(|p| (0..k).map(|c| table[(p[c], c)]).sum::<f64>() / k as f64)
                .fold(0.0, f64::max);
            assert!(best - greedy.diag <= 0.05, "greedy {} optimal {best}", greedy.diag);
        }
    }

    #[test]
    fn recovers_permutation_and_handles_missing_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (blocks, truth, perm) = noisy_instance(&mut rng, 4, 500, 0.05);
        let (m, s) = match_and_score(&blocks, &truth, MetricKind::Spearman).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(m.matching[src], Some(row));
        }
        assert!(s.diag > 0.9 && s.unmatched.is_empty());
        let (_, s2) = match_and_score(&blocks[..3], &truth, MetricKind::R2).unwrap();
        assert_eq!(s2.unmatched.len(), 1);
        assert_eq!(s2.per_variable[s2.unmatched[0]], 0.0);
    }

    #[test]
    fn block_score_is_max_over_dims() {
        let truth = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let block = Matrix::from_rows(&[[0.0, 4.0], [1.0, 3.0], [0.0, 2.0], [1.0, 1.0]]).unwrap();
        let t = score_table(&[block], &truth, MetricKind::Spearman).unwrap();
        assert!((t[(0, 0)] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cc_monotone(d1 in 0.01f64..0.99, d2 in 0.01f64..0.99, o in 0.01f64..0.99) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            prop_assume!(hi - lo > 1e-9);
            prop_assert!(combined_correlation(lo, o) < combined_correlation(hi, o));
            prop_assert!(combined_correlation(o, hi) < combined_correlation(o, lo));
            let cc = combined_correlation(d1, o);
            prop_assert!((0.0..=1.0).contains(&cc));
        }

        #[test]
        fn spearman_invariant_to_monotone_maps(xs in proptest::collection::vec(-5.0f64..5.0, 5..40), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ys: Vec<f64> = xs.iter().map(|x| x + rng.random_range(-2.0..2.0)).collect();
            let base = spearman(&xs, &ys);
            prop_assume!(base.is_ok());
            let mapped: Vec<f64> = xs.iter().map(|x| x.powi(3) + x.exp()).collect();
            prop_assert!((spearman(&mapped, &ys).unwrap() - base.unwrap()).abs() < 1e-9);
        }

        #[test]
        fn scores_invariant_to_block_relabeling(seed in 0u64..200, k in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (blocks, truth, _) = noisy_instance(&mut rng, k, 60, 0.5);
            let (_, a) = match_and_score(&blocks, &truth, MetricKind::Spearman).unwrap();
            let mut rev = blocks.clone();
            rev.reverse();
            let (_, b) = match_and_score(&rev, &truth, MetricKind::Spearman).unwrap();
            prop_assert!((a.diag - b.diag).abs() < 1e-12);
            prop_assert!((a.off_diag - b.off_diag).abs() < 1e-12);
        }
    }
}
