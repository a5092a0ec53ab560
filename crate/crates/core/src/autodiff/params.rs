use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::Scalar;

/// Named parameter block with row-major `(rows, cols)` layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter storage with block metadata.
///
/// The number of values always equals the sum of the block sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector<F> {
    values: Vec<F>,
    blocks: Vec<ParamBlock>,
}

impl<F: Scalar> Default for ParamVector<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamVector<F> {
    pub fn new() -> Self {
        ParamVector {
            values: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn from_parts(values: Vec<F>, blocks: Vec<ParamBlock>) -> Result<Self> {
        let total: usize = blocks.iter().map(ParamBlock::len).sum();
        if total != values.len() {
            return Err(Error::dim("parameter vector", total, values.len()));
        }
        Ok(ParamVector { values, blocks })
    }

    /// Appends a block and returns its index.
    pub fn push_block(&mut self, name: impl Into<String>, value: &Matrix<F>) -> usize {
        self.blocks.push(ParamBlock {
            name: name.into(),
            rows: value.rows(),
            cols: value.cols(),
        });
        self.values.extend_from_slice(value.as_slice());
        self.blocks.len() - 1
    }

    /// Concatenates several vectors, keeping block order.
    pub fn concat(parts: &[&Self]) -> Self {
        let mut out = Self::new();
        for p in parts {
            out.values.extend_from_slice(&p.values);
            out.blocks.extend(p.blocks.iter().cloned());
        }
        out
    }

    /// Splits into consecutive pieces of `counts[i]` blocks each.
    pub fn split(&self, counts: &[usize]) -> Result<Vec<Self>> {
        let total: usize = counts.iter().sum();
        if total != self.blocks.len() {
            return Err(Error::dim("parameter split", self.blocks.len(), total));
        }
        let mut out = Vec::with_capacity(counts.len());
        let (mut b, mut v) = (0, 0);
        for &c in counts {
            let blocks = self.blocks[b..b + c].to_vec();
            let len: usize = blocks.iter().map(ParamBlock::len).sum();
            out.push(ParamVector {
                values: self.values[v..v + len].to_vec(),
                blocks,
            });
            b += c;
            v += len;
        }
        Ok(out)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            values: vec![F::zero(); self.values.len()],
            blocks: self.blocks.clone(),
        }
    }

    fn offset(&self, block: usize) -> usize {
        self.blocks[..block].iter().map(ParamBlock::len).sum()
    }

    pub fn block_slice(&self, block: usize) -> &[F] {
        let start = self.offset(block);
        &self.values[start..start + self.blocks[block].len()]
    }

    pub fn block_slice_mut(&mut self, block: usize) -> &mut [F] {
        let start = self.offset(block);
        let len = self.blocks[block].len();
        &mut self.values[start..start + len]
    }

    pub fn block_matrix(&self, block: usize) -> Matrix<F> {
        let b = &self.blocks[block];
        Matrix::from_vec(b.rows, b.cols, self.block_slice(block).to_vec())
            .expect("block layout is consistent")
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.blocks == other.blocks
    }

    /// Records every block as a leaf on `tape`, in block order.
    pub fn bind(&self, tape: &Tape<F>) -> Vec<Var> {
        (0..self.blocks.len())
            .map(|b| tape.leaf(self.block_matrix(b)))
            .collect()
    }

    /// Collects the adjoints of previously bound leaves into a vector of the same layout.
    pub fn collect_grad(&self, grads: &Gradients<F>, bound: &[Var]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for &v in bound {
            values.extend_from_slice(grads.wrt(v).as_slice());
        }
        ParamVector {
            values,
            blocks: self.blocks.clone(),
        }
    }

    /// Name of the first block holding a non-finite value, if any.
    pub fn first_non_finite_block(&self) -> Option<&str> {
        let mut start = 0;
        for b in &self.blocks {
            let end = start + b.len();
            if self.values[start..end].iter().any(|v| !v.is_finite()) {
                return Some(&b.name);
            }
            start = end;
        }
        None
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.values.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }
}

/// Gradient of a scalar loss built on a tape from the bound parameter blocks.
///
/// `loss` receives the tape and one leaf per parameter block and returns a 1×1 node.
pub fn gradient<F, L>(params: &ParamVector<F>, loss: L) -> Result<(F, ParamVector<F>)>
where
    F: Scalar,
    L: FnOnce(&Tape<F>, &[Var]) -> Var,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = loss(&tape, &bound);
    let value = tape.scalar(out);
    let grad = params.collect_grad(&tape.backward(out), &bound);
    if !value.is_finite() || !grad.is_finite() {
        let block = grad
            .first_non_finite_block()
            .or_else(|| params.first_non_finite_block())
            .unwrap_or("loss")
            .to_string();
        return Err(Error::NonFinite(format!("parameter block `{block}`")));
    }
    Ok((value, grad))
}
