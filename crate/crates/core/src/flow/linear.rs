use serde::{Deserialize, Serialize};

use super::autoregressive::standardizer;
use crate::autodiff::{ParamVector, Tape, Var};
use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;
use crate::Scalar;

/// `y = x·A + b` with `A = L·U`, `L` unit lower triangular and `U` upper
/// triangular with diagonal `exp(s)`, so `log|det A| = Σ s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFlow<F> {
    dim: usize,
    params: ParamVector<F>,
}

impl<F: Scalar> LinearFlow<F> {
    pub fn identity(dim: usize) -> Self {
        let mut params = ParamVector::new();
        params.push_block("lower", &Matrix::zeros(dim, dim));
        params.push_block("upper", &Matrix::zeros(dim, dim));
        params.push_block("log_diag", &Matrix::zeros(1, dim));
        params.push_block("bias", &Matrix::zeros(1, dim));
        LinearFlow { dim, params }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamVector<F> {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector<F>) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::InvalidArgument("linear flow parameter layout mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Standardizes every input column on `data`.
    pub fn init_from_data(&mut self, data: &Matrix<F>) {
        if data.rows() < 2 {
            return;
        }
        let (loc, ls) = standardizer(data);
        let bias: Vec<F> = loc.iter().zip(&ls).map(|(&l, &s)| l * s.exp()).collect();
        self.params.block_slice_mut(2).copy_from_slice(&ls);
        self.params.block_slice_mut(3).copy_from_slice(&bias);
    }

    fn masks(&self) -> (Matrix<F>, Matrix<F>) {
        let d = self.dim;
        let mut lower = Matrix::zeros(d, d);
        let mut upper = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                if i > j {
                    lower[(i, j)] = F::one();
                } else if i < j {
                    upper[(i, j)] = F::one();
                }
            }
        }
        (lower, upper)
    }

    /// The matrix `A`.
    pub fn matrix(&self) -> Matrix<F> {
        let (ml, mu) = self.masks();
        let mut l = self.params.block_matrix(0).zip_map(&ml, |a, m| a * m);
        let mut u = self.params.block_matrix(1).zip_map(&mu, |a, m| a * m);
        let s = self.params.block_slice(2);
        for i in 0..self.dim {
            l[(i, i)] = F::one();
            u[(i, i)] = s[i].exp();
        }
        l.matmul(&u)
    }

    pub fn log_det(&self) -> F {
        self.params.block_slice(2).iter().copied().sum()
    }

    pub fn forward_tape(&self, tape: &Tape<F>, bound: &[Var], x: Var) -> (Var, Var) {
        let (ml, mu) = self.masks();
        let eye = tape.leaf(Matrix::identity(self.dim));
        let l = tape.add(tape.mul(bound[0], tape.leaf(ml)), eye);
        let diag = tape.mul(eye, tape.exp(bound[2]));
        let u = tape.add(tape.mul(bound[1], tape.leaf(mu)), diag);
        let a = tape.matmul(l, u);
        let y = tape.add(tape.matmul(x, a), bound[3]);
        let n = tape.shape(x).0;
        let zeros = tape.leaf(Matrix::zeros(n, 1));
        (y, tape.add(zeros, tape.sum(bound[2])))
    }

    pub fn forward(&self, x: &Matrix<F>) -> Result<(Matrix<F>, Vec<F>)> {
        ensure_dim("linear flow input", self.dim, x.cols())?;
        let mut y = x.matmul(&self.matrix());
        let b = self.params.block_slice(3);
        for i in 0..y.rows() {
            for (v, &bj) in y.row_mut(i).iter_mut().zip(b) {
                *v = *v + bj;
            }
        }
        if !y.is_finite() {
            return Err(Error::NonFinite("linear flow".into()));
        }
        Ok((y, vec![self.log_det(); x.rows()]))
    }

    pub fn inverse(&self, y: &Matrix<F>) -> Result<Matrix<F>> {
        ensure_dim("linear flow input", self.dim, y.cols())?;
        let inv = self
            .matrix()
            .inverse()
            .ok_or_else(|| Error::NotInvertible("linear flow matrix".into()))?;
        let b = self.params.block_slice(3);
        let mut centered = y.clone();
        for i in 0..centered.rows() {
            for (v, &bj) in centered.row_mut(i).iter_mut().zip(b) {
                *v = *v - bj;
            }
        }
        Ok(centered.matmul(&inv))
    }
}
