//! Sampled trajectories and their on-disk formats.
//!
//! The text format is one CSV row per step: `t, c0.., x0.., i0..`. The binary
//! format is `TRJ1` followed by little-endian `u32` sizes, the `u64` seed, the
//! per-variable dims, the states and observations as `f64`, and one byte per
//! target bit.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::Scalar;

/// `T × K` binary intervention targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetMatrix {
    k: usize,
    bits: Vec<bool>,
}

impl TargetMatrix {
    pub fn zeros(steps: usize, k: usize) -> Self {
        TargetMatrix {
            k,
            bits: vec![false; steps * k],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let k = rows.first().map(Vec::len).unwrap_or(0);
        let mut bits = Vec::with_capacity(rows.len() * k);
        for r in rows {
            if r.len() != k {
                return Err(Error::dim("target row", k, r.len()));
            }
            bits.extend_from_slice(r);
        }
        Ok(TargetMatrix { k, bits })
    }

    pub fn steps(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.bits.len() / self.k
        }
    }

    pub fn num_variables(&self) -> usize {
        self.k
    }

    pub fn row(&self, t: usize) -> &[bool] {
        &self.bits[t * self.k..(t + 1) * self.k]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [bool] {
        &mut self.bits[t * self.k..(t + 1) * self.k]
    }

    pub fn get(&self, t: usize, j: usize) -> bool {
        self.bits[t * self.k + j]
    }

    /// Target bits of variable `j` over time.
    pub fn column(&self, j: usize) -> Vec<bool> {
        (0..self.steps()).map(|t| self.get(t, j)).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(idx.len() * self.k);
        for &t in idx {
            bits.extend_from_slice(self.row(t));
        }
        TargetMatrix { k: self.k, bits }
    }

    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(self.steps() * cols.len());
        for t in 0..self.steps() {
            bits.extend(cols.iter().map(|&j| self.get(t, j)));
        }
        TargetMatrix {
            k: cols.len(),
            bits,
        }
    }

    /// Empirical frequency of each target bit.
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.steps().max(1) as f64;
        (0..self.k)
            .map(|j| (0..self.steps()).filter(|&t| self.get(t, j)).count() as f64 / n)
            .collect()
    }
}

/// A sampled sequence of causal states, observations and intervention targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<F> {
    /// Per-variable dimensionality `M_1..M_K`.
    pub dims: Vec<usize>,
    /// `T × D` causal values in the sampling environment's own coordinates.
    pub states: Matrix<F>,
    /// `T × D` observations.
    pub observations: Matrix<F>,
    pub targets: TargetMatrix,
    pub seed: u64,
}

impl<F: Scalar> Trajectory<F> {
    pub fn new(
        dims: Vec<usize>,
        states: Matrix<F>,
        observations: Matrix<F>,
        targets: TargetMatrix,
        seed: u64,
    ) -> Result<Self> {
        let t = states.rows();
        if observations.rows() != t || targets.steps() != t {
            return Err(Error::Misaligned(format!(
                "states {t}, observations {}, targets {}",
                observations.rows(),
                targets.steps()
            )));
        }
        let d: usize = dims.iter().sum();
        if states.cols() != d {
            return Err(Error::dim("trajectory state width", d, states.cols()));
        }
        if targets.num_variables() != dims.len() {
            return Err(Error::dim(
                "trajectory target width",
                dims.len(),
                targets.num_variables(),
            ));
        }
        Ok(Trajectory {
            dims,
            states,
            observations,
            targets,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_variables(&self) -> usize {
        self.dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.states.cols()
    }

    /// Column offset of variable `i`.
    pub fn offset(&self, i: usize) -> usize {
        self.dims[..i].iter().sum()
    }

    /// `T × M_i` values of variable `i`.
    pub fn variable(&self, i: usize) -> Matrix<F> {
        self.states.col_slice(self.offset(i), self.dims[i])
    }

    /// Steps `start..end` as a new trajectory.
    pub fn window(&self, start: usize, end: usize) -> Self {
        let idx: Vec<usize> = (start..end).collect();
        Trajectory {
            dims: self.dims.clone(),
            states: self.states.row_range(start, end),
            observations: self.observations.row_range(start, end),
            targets: self.targets.select_rows(&idx),
            seed: self.seed,
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.total_dim();
        let mut header = vec!["t".to_string()];
        header.extend((0..d).map(|j| format!("c{j}")));
        header.extend((0..self.observations.cols()).map(|j| format!("x{j}")));
        header.extend((0..self.num_variables()).map(|j| format!("i{j}")));
        writeln!(out, "# dims={} seed={}", join(&self.dims), self.seed)?;
        writeln!(out, "{}", header.join(","))?;
        for t in 0..self.len() {
            let mut row = vec![t.to_string()];
            row.extend(self.states.row(t).iter().map(|v| fmt_real(*v)));
            row.extend(self.observations.row(t).iter().map(|v| fmt_real(*v)));
            row.extend(
                self.targets
                    .row(t)
                    .iter()
                    .map(|&b| if b { "1" } else { "0" }.to_string()),
            );
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let meta = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trajectory file".into()))??;
        let (dims, seed) = parse_meta(&meta)?;
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing header".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        let d: usize = dims.iter().sum();
        let obs_cols = cols.iter().filter(|c| c.starts_with('x')).count();
        let k = dims.len();
        if cols.len() != 1 + d + obs_cols + k {
            return Err(Error::Parse(format!(
                "header has {} columns, expected {}",
                cols.len(),
                1 + d + obs_cols + k
            )));
        }
        let (mut states, mut obs, mut targets) = (Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse(format!("row has {} fields", fields.len())));
            }
            let parse = |s: &str| -> Result<F> {
                s.trim()
                    .parse::<f64>()
                    .map(F::lit)
                    .map_err(|e| Error::Parse(format!("{s}: {e}")))
            };
            for f in &fields[1..1 + d] {
                states.push(parse(f)?);
            }
            for f in &fields[1 + d..1 + d + obs_cols] {
                obs.push(parse(f)?);
            }
            targets.push(
                fields[1 + d + obs_cols..]
                    .iter()
                    .map(|f| f.trim() == "1")
                    .collect::<Vec<bool>>(),
            );
        }
        let t = targets.len();
        Trajectory::new(
            dims,
            Matrix::from_vec(t, d, states)?,
            Matrix::from_vec(t, obs_cols, obs)?,
            TargetMatrix::from_rows(&targets)?,
            seed,
        )
    }

    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(b"TRJ1")?;
        for n in [
            self.len(),
            self.total_dim(),
            self.observations.cols(),
            self.num_variables(),
        ] {
            out.write_all(&(n as u32).to_le_bytes())?;
        }
        out.write_all(&self.seed.to_le_bytes())?;
        for &m in &self.dims {
            out.write_all(&(m as u32).to_le_bytes())?;
        }
        for v in self.states.as_slice().iter().chain(self.observations.as_slice()) {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
        for t in 0..self.len() {
            let bytes: Vec<u8> = self.targets.row(t).iter().map(|&b| b as u8).collect();
            out.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"TRJ1" {
            return Err(Error::Parse("bad trajectory magic".into()));
        }
        let read_u32 = |input: &mut R| -> Result<usize> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let (t, d, obs_d, k) = (
            read_u32(&mut input)?,
            read_u32(&mut input)?,
            read_u32(&mut input)?,
            read_u32(&mut input)?,
        );
        let mut sb = [0u8; 8];
        input.read_exact(&mut sb)?;
        let seed = u64::from_le_bytes(sb);
        let dims = (0..k)
            .map(|_| read_u32(&mut input))
            .collect::<Result<Vec<_>>>()?;
        let mut read_reals = |n: usize| -> Result<Vec<F>> {
            let mut buf = vec![0u8; n * 8];
            input.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| F::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect())
        };
        let states = read_reals(t * d)?;
        let obs = read_reals(t * obs_d)?;
        let mut bits = vec![0u8; t * k];
        input.read_exact(&mut bits)?;
        let rows: Vec<Vec<bool>> = bits.chunks(k.max(1)).map(|c| c.iter().map(|&b| b != 0).collect()).collect();
        let targets = if k == 0 {
            TargetMatrix::zeros(t, 0)
        } else {
            TargetMatrix::from_rows(&rows)?
        };
        Trajectory::new(
            dims,
            Matrix::from_vec(t, d, states)?,
            Matrix::from_vec(t, obs_d, obs)?,
            targets,
            seed,
        )
    }
}

/// Shortest decimal that round-trips an `f64`.
pub(crate) fn fmt_real<F: Scalar>(v: F) -> String {
    format!("{:?}", v.as_f64())
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn parse_meta(line: &str) -> Result<(Vec<usize>, u64)> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::Parse("missing metadata line".into()))?;
    let (mut dims, mut seed) = (None, None);
    for part in body.split_whitespace() {
        if let Some(v) = part.strip_prefix("dims=") {
            dims = Some(
                v.split(';')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
                    .collect::<Result<Vec<_>>>()?,
            );
        } else if let Some(v) = part.strip_prefix("seed=") {
            seed = Some(v.parse::<u64>().map_err(|e| Error::Parse(e.to_string()))?);
        }
    }
    Ok((
        dims.ok_or_else(|| Error::Parse("metadata lacks dims".into()))?,
        seed.ok_or_else(|| Error::Parse("metadata lacks seed".into()))?,
    ))
}
