use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{swish, ParamVector, Tape, Var};
use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;
use crate::Scalar;

const BLOCK_PARAMS: usize = 7;
const SCALE_BOUND: f64 = 3.0;

/// Stack of `ActNorm → MADE affine → reverse permutation` blocks.
///
/// The MADE conditioner has one hidden swish layer, a masked linear skip from
/// the input, and a zero-initialized output, so a fresh flow is the identity
/// up to its activation normalization. Log-scales are soft-bounded by
/// `3·tanh(raw / 3)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineAutoregressiveFlow<F> {
    dim: usize,
    depth: usize,
    hidden: usize,
    params: ParamVector<F>,
}

struct Masks<F> {
    input: Matrix<F>,
    output: Matrix<F>,
    skip: Matrix<F>,
}

impl<F: Scalar> AffineAutoregressiveFlow<F> {
    /// Identity flow with random (masked) first-layer conditioner weights.
    pub fn new<R: Rng + ?Sized>(dim: usize, depth: usize, hidden_per_dim: usize, rng: &mut R) -> Self {
        let hidden = (hidden_per_dim * dim).max(1);
        let mut params = ParamVector::new();
        for b in 0..depth {
            params.push_block(format!("flow{b}.loc"), &Matrix::zeros(1, dim));
            params.push_block(format!("flow{b}.log_scale"), &Matrix::zeros(1, dim));
            let std = 1.0 / (dim.max(1) as f64).sqrt();
            let w0: Vec<F> = (0..dim * hidden)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    F::lit(z * std)
                })
                .collect();
            params.push_block(format!("flow{b}.w0"), &Matrix::from_vec(dim, hidden, w0).expect("sized"));
            params.push_block(format!("flow{b}.b0"), &Matrix::zeros(1, hidden));
            params.push_block(format!("flow{b}.w1"), &Matrix::zeros(hidden, 2 * dim));
            params.push_block(format!("flow{b}.skip"), &Matrix::zeros(dim, 2 * dim));
            params.push_block(format!("flow{b}.b1"), &Matrix::zeros(1, 2 * dim));
        }
        AffineAutoregressiveFlow {
            dim,
            depth,
            hidden,
            params,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn params(&self) -> &ParamVector<F> {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector<F>) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::InvalidArgument("flow parameter layout mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Sets the activation normalization of block `b` directly.
    pub fn set_actnorm(&mut self, b: usize, loc: &[F], log_scale: &[F]) {
        self.params.block_slice_mut(BLOCK_PARAMS * b).copy_from_slice(loc);
        self.params.block_slice_mut(BLOCK_PARAMS * b + 1).copy_from_slice(log_scale);
    }

    /// Standardizes the input of the first block on `data`.
    pub fn init_from_data(&mut self, data: &Matrix<F>) {
        if self.depth == 0 || data.rows() < 2 {
            return;
        }
        let (loc, ls) = standardizer(data);
        self.set_actnorm(0, &loc, &ls);
    }

    fn masks(&self) -> Masks<F> {
        let d = self.dim;
        let h = self.hidden;
        let hidden_degree = |u: usize| if d > 1 { u % (d - 1) + 1 } else { 1 };
        let mut input = Matrix::zeros(d, h);
        for i in 0..d {
            for u in 0..h {
                if hidden_degree(u) > i {
                    input[(i, u)] = F::one();
                }
            }
        }
        let mut output = Matrix::zeros(h, 2 * d);
        for u in 0..h {
            for o in 0..d {
                if o + 1 > hidden_degree(u) {
                    output[(u, o)] = F::one();
                    output[(u, d + o)] = F::one();
                }
            }
        }
        let mut skip = Matrix::zeros(d, 2 * d);
        for i in 0..d {
            for o in i + 1..d {
                skip[(i, o)] = F::one();
                skip[(i, d + o)] = F::one();
            }
        }
        Masks { input, output, skip }
    }

    /// Records the forward pass; returns `(output, log_det)` with `log_det` shaped `n × 1`.
    pub fn forward_tape(&self, tape: &Tape<F>, bound: &[Var], x: Var) -> (Var, Var) {
        let n = tape.shape(x).0;
        let mut log_det = tape.leaf(Matrix::zeros(n, 1));
        if self.depth == 0 {
            return (x, log_det);
        }
        let masks = self.masks();
        let m_in = tape.leaf(masks.input);
        let m_out = tape.leaf(masks.output);
        let m_skip = tape.leaf(masks.skip);
        let reverse: Vec<usize> = (0..self.dim).rev().collect();
        let d = self.dim;
        let mut h = x;
        for b in 0..self.depth {
            let p = &bound[BLOCK_PARAMS * b..BLOCK_PARAMS * (b + 1)];
            // ActNorm.
            h = tape.mul(tape.add(h, p[0]), tape.exp(p[1]));
            log_det = tape.add(log_det, tape.sum(p[1]));
            // MADE affine.
            let w0 = tape.mul(p[2], m_in);
            let w1 = tape.mul(p[4], m_out);
            let ws = tape.mul(p[5], m_skip);
            let hid = tape.swish(tape.add(tape.matmul(h, w0), p[3]));
            let out = tape.add(tape.add(tape.matmul(hid, w1), tape.matmul(h, ws)), p[6]);
            let shift = tape.col_slice(out, 0, d);
            let raw = tape.col_slice(out, d, d);
            let bound_scale = F::lit(SCALE_BOUND);
            let s = tape.scale(tape.tanh(tape.scale(raw, F::one() / bound_scale)), bound_scale);
            h = tape.add(tape.mul(h, tape.exp(s)), shift);
            log_det = tape.add(log_det, tape.sum_cols(s));
            h = tape.permute_cols(h, &reverse);
        }
        (h, log_det)
    }

    fn block_matrices(&self, b: usize, masks: &Masks<F>) -> [Matrix<F>; 7] {
        let p = |j: usize| self.params.block_matrix(BLOCK_PARAMS * b + j);
        [
            p(0),
            p(1),
            p(2).zip_map(&masks.input, |a, m| a * m),
            p(3),
            p(4).zip_map(&masks.output, |a, m| a * m),
            p(5).zip_map(&masks.skip, |a, m| a * m),
            p(6),
        ]
    }

    /// Shift and bounded log-scale of the MADE conditioner for input `a`.
    fn conditioner(&self, mats: &[Matrix<F>; 7], a: &Matrix<F>) -> (Matrix<F>, Matrix<F>) {
        let d = self.dim;
        let mut hid = a.matmul(&mats[2]);
        add_row(&mut hid, mats[3].as_slice());
        let hid = hid.map(swish);
        let mut out = hid.matmul(&mats[4]);
        out.add_assign(&a.matmul(&mats[5]));
        add_row(&mut out, mats[6].as_slice());
        let bound = F::lit(SCALE_BOUND);
        let shift = out.col_slice(0, d);
        let s = out.col_slice(d, d).map(|r| bound * (r / bound).tanh());
        (shift, s)
    }

    /// Forward pass without a tape; `log_det` has one entry per row.
    pub fn forward(&self, x: &Matrix<F>) -> Result<(Matrix<F>, Vec<F>)> {
        ensure_dim("flow input", self.dim, x.cols())?;
        let masks = self.masks();
        let mut h = x.clone();
        let mut log_det = vec![F::zero(); x.rows()];
        let reverse: Vec<usize> = (0..self.dim).rev().collect();
        for b in 0..self.depth {
            let mats = self.block_matrices(b, &masks);
            let ls_sum: F = mats[1].as_slice().iter().copied().sum();
            h = actnorm(&h, mats[0].as_slice(), mats[1].as_slice());
            let (shift, s) = self.conditioner(&mats, &h);
            for i in 0..h.rows() {
                let mut ld = ls_sum;
                for j in 0..self.dim {
                    h[(i, j)] = h[(i, j)] * s[(i, j)].exp() + shift[(i, j)];
                    ld = ld + s[(i, j)];
                }
                log_det[i] = log_det[i] + ld;
            }
            h = h.select_cols(&reverse);
            if !h.is_finite() {
                return Err(Error::NonFinite(format!("flow block {b}")));
            }
        }
        Ok((h, log_det))
    }

    /// Inverse pass, solving each MADE block one dimension at a time.
    pub fn inverse(&self, y: &Matrix<F>) -> Result<Matrix<F>> {
        Ok(self.inverse_with_log_det(y)?.0)
    }

    /// Inverse pass plus the per-row log-determinant of the inverse map.
    pub fn inverse_with_log_det(&self, y: &Matrix<F>) -> Result<(Matrix<F>, Vec<F>)> {
        ensure_dim("flow input", self.dim, y.cols())?;
        let mut log_det = vec![F::zero(); y.rows()];
        let masks = self.masks();
        let reverse: Vec<usize> = (0..self.dim).rev().collect();
        let mut h = y.clone();
        for b in (0..self.depth).rev() {
            let mats = self.block_matrices(b, &masks);
            let target = h.select_cols(&reverse);
            let mut a = Matrix::zeros(h.rows(), self.dim);
            for j in 0..self.dim {
                let (shift, s) = self.conditioner(&mats, &a);
                for i in 0..a.rows() {
                    a[(i, j)] = (target[(i, j)] - shift[(i, j)]) * (-s[(i, j)]).exp();
                    log_det[i] = log_det[i] - s[(i, j)];
                }
            }
            let (loc, ls) = (mats[0].as_slice(), mats[1].as_slice());
            let ls_sum: F = ls.iter().copied().sum();
            for i in 0..a.rows() {
                log_det[i] = log_det[i] - ls_sum;
                for j in 0..self.dim {
                    a[(i, j)] = a[(i, j)] * (-ls[j]).exp() - loc[j];
                }
            }
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("inverse of flow block {b}")));
            }
            h = a;
        }
        Ok((h, log_det))
    }
}

fn add_row<F: Scalar>(m: &mut Matrix<F>, row: &[F]) {
    for i in 0..m.rows() {
        for (x, &b) in m.row_mut(i).iter_mut().zip(row) {
            *x = *x + b;
        }
    }
}

fn actnorm<F: Scalar>(x: &Matrix<F>, loc: &[F], log_scale: &[F]) -> Matrix<F> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (*v + loc[j]) * log_scale[j].exp();
        }
    }
    out
}

/// `(−mean, −ln std)` per column; constant columns keep unit scale.
pub(crate) fn standardizer<F: Scalar>(data: &Matrix<F>) -> (Vec<F>, Vec<F>) {
    let n = F::from_usize_lossy(data.rows());
    let mut loc = Vec::with_capacity(data.cols());
    let mut ls = Vec::with_capacity(data.cols());
    for j in 0..data.cols() {
        let col = data.column(j);
        let mean = col.iter().copied().sum::<F>() / n;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        loc.push(-mean);
        ls.push(if var > F::lit(1e-12) { -F::lit(0.5) * var.ln() } else { F::zero() });
    }
    (loc, ls)
}
