//! Fixed invertible maps used as observation mixings and environment changes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, DenseNet};
use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;
use crate::Scalar;

/// One RealNVP-style coupling layer: coordinates outside `conditioned` are
/// scaled and shifted by functions of the conditioned ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer<F> {
    conditioned: Vec<usize>,
    transformed: Vec<usize>,
    net: Option<DenseNet<F>>,
    /// Used when nothing can be conditioned on (one-dimensional input).
    constant_log_scale: Vec<F>,
    constant_shift: Vec<F>,
    scale_bound: F,
}

impl<F: Scalar> CouplingLayer<F> {
    fn scale_shift(&self, x: &[F]) -> (Vec<F>, Vec<F>) {
        match &self.net {
            Some(net) => {
                let input: Vec<F> = self.conditioned.iter().map(|&i| x[i]).collect();
                let out = net.forward(&input).expect("coupling net layout");
                let m = self.transformed.len();
                let s = out[..m]
                    .iter()
                    .map(|&v| self.scale_bound * (v / self.scale_bound).tanh())
                    .collect();
                (s, out[m..].to_vec())
            }
            None => (self.constant_log_scale.clone(), self.constant_shift.clone()),
        }
    }

    fn forward(&self, x: &[F]) -> Vec<F> {
        let (s, t) = self.scale_shift(x);
        let mut y = x.to_vec();
        for (k, &i) in self.transformed.iter().enumerate() {
            y[i] = x[i] * s[k].exp() + t[k];
        }
        y
    }

    fn inverse(&self, y: &[F]) -> Vec<F> {
        // Conditioned coordinates pass through unchanged.
        let (s, t) = self.scale_shift(y);
        let mut x = y.to_vec();
        for (k, &i) in self.transformed.iter().enumerate() {
            x[i] = (y[i] - t[k]) * (-s[k]).exp();
        }
        x
    }

    fn log_det(&self, x: &[F]) -> F {
        self.scale_shift(x).0.into_iter().sum()
    }
}

/// Stack of random affine coupling layers with alternating partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCouplingFlow<F> {
    dim: usize,
    layers: Vec<CouplingLayer<F>>,
}

impl<F: Scalar> AffineCouplingFlow<F> {
    /// `strength` scales the conditioner weights; 0 gives the identity map.
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        layers: usize,
        hidden: usize,
        strength: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("coupling flow needs dim > 0".into()));
        }
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let (conditioned, transformed): (Vec<usize>, Vec<usize>) = if dim == 1 {
                (vec![], vec![0])
            } else {
                (0..dim).partition(|&i| (i + l) % 2 == 0)
            };
            let m = transformed.len();
            let net = if conditioned.is_empty() {
                None
            } else {
                let mut net = DenseNet::random(
                    &[conditioned.len(), hidden, 2 * m],
                    Activation::Swish,
                    1.0,
                    rng,
                )?;
                let w = net.weight_mut(1);
                for v in w.iter_mut() {
                    *v = *v * F::lit(strength);
                }
                Some(net)
            };
            let draw = |rng: &mut R| -> F {
                let z: f64 = StandardNormal.sample(rng);
                F::lit(0.2 * strength * z)
            };
            let constant_log_scale = (0..m).map(|_| draw(rng)).collect();
            let constant_shift = (0..m).map(|_| draw(rng)).collect();
            out.push(CouplingLayer {
                conditioned,
                transformed,
                net,
                constant_log_scale,
                constant_shift,
                scale_bound: F::lit(1.0),
            });
        }
        Ok(AffineCouplingFlow { dim, layers: out })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, x: &[F]) -> Vec<F> {
        self.layers.iter().fold(x.to_vec(), |h, l| l.forward(&h))
    }

    pub fn inverse(&self, y: &[F]) -> Vec<F> {
        self.layers.iter().rev().fold(y.to_vec(), |h, l| l.inverse(&h))
    }

    pub fn log_det(&self, x: &[F]) -> F {
        let mut h = x.to_vec();
        let mut total = F::zero();
        for l in &self.layers {
            total = total + l.log_det(&h);
            h = l.forward(&h);
        }
        total
    }
}

/// Invertible map on `R^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InvertibleMap<F> {
    Identity {
        dim: usize,
    },
    /// `y = A·x + b`; the inverse of `A` is cached at construction.
    Affine {
        matrix: Matrix<F>,
        offset: Vec<F>,
        inverse: Matrix<F>,
    },
    /// `(x, y) ↦ (r, θ)` around `origin`, defined for `r > 0`.
    Polar {
        origin: [F; 2],
    },
    Coupling(AffineCouplingFlow<F>),
}

impl<F: Scalar> InvertibleMap<F> {
    pub fn identity(dim: usize) -> Self {
        InvertibleMap::Identity { dim }
    }

    /// Fails with [`Error::NotInvertible`] when `matrix` is singular or badly conditioned.
    pub fn affine(matrix: Matrix<F>, offset: Vec<F>) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::NotInvertible(format!(
                "{}×{} matrix is not square",
                matrix.rows(),
                matrix.cols()
            )));
        }
        ensure_dim("affine offset", matrix.rows(), offset.len())?;
        let inverse = matrix
            .inverse()
            .ok_or_else(|| Error::NotInvertible("singular matrix".into()))?;
        let cond = inverse.max_abs() * matrix.max_abs() * F::from_usize_lossy(matrix.rows());
        if !(cond < F::lit(1e8)) {
            return Err(Error::NotInvertible(format!(
                "condition estimate {cond} too large"
            )));
        }
        Ok(InvertibleMap::Affine {
            matrix,
            offset,
            inverse,
        })
    }

    /// Rotation by `angle` radians in the plane of the first two coordinates of a `dim`-d block.
    pub fn plane_rotation(dim: usize, angle: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument("rotation needs dim ≥ 2".into()));
        }
        let mut m = Matrix::identity(dim);
        let (s, c) = angle.sin_cos();
        m[(0, 0)] = F::lit(c);
        m[(0, 1)] = F::lit(-s);
        m[(1, 0)] = F::lit(s);
        m[(1, 1)] = F::lit(c);
        Self::affine(m, vec![F::zero(); dim])
    }

    /// Random orthogonal matrix (Gram–Schmidt on a Gaussian draw) with positive determinant.
    pub fn random_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        let q = random_orthogonal::<F, R>(dim, rng);
        Self::affine(q, vec![F::zero(); dim])
    }

    /// `A = Q·diag(s)` with `Q` orthogonal and `s ∈ [scale_lo, scale_hi]`, offset `N(0, offset_std²)`.
    pub fn random_affine<R: Rng + ?Sized>(
        dim: usize,
        scale_lo: f64,
        scale_hi: f64,
        offset_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut q = random_orthogonal::<F, R>(dim, rng);
        for j in 0..dim {
            let s = F::lit(rng.random_range(scale_lo..=scale_hi));
            for i in 0..dim {
                q[(i, j)] = q[(i, j)] * s;
            }
        }
        let offset = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::lit(z * offset_std)
            })
            .collect();
        Self::affine(q, offset)
    }

    pub fn polar(origin: [F; 2]) -> Self {
        InvertibleMap::Polar { origin }
    }

    pub fn dim(&self) -> usize {
        match self {
            InvertibleMap::Identity { dim } => *dim,
            InvertibleMap::Affine { matrix, .. } => matrix.rows(),
            InvertibleMap::Polar { .. } => 2,
            InvertibleMap::Coupling(flow) => flow.dim(),
        }
    }

    pub fn apply(&self, x: &[F]) -> Result<Vec<F>> {
        ensure_dim("invertible map input", self.dim(), x.len())?;
        Ok(match self {
            InvertibleMap::Identity { .. } => x.to_vec(),
            InvertibleMap::Affine { matrix, offset, .. } => matrix
                .mat_vec(x)
                .into_iter()
                .zip(offset)
                .map(|(v, &b)| v + b)
                .collect(),
            InvertibleMap::Polar { origin } => {
                let (dx, dy) = (x[0] - origin[0], x[1] - origin[1]);
                vec![(dx * dx + dy * dy).sqrt(), dy.atan2(dx)]
            }
            InvertibleMap::Coupling(flow) => flow.forward(x),
        })
    }

    pub fn invert(&self, y: &[F]) -> Result<Vec<F>> {
        ensure_dim("invertible map input", self.dim(), y.len())?;
        Ok(match self {
            InvertibleMap::Identity { .. } => y.to_vec(),
            InvertibleMap::Affine {
                offset, inverse, ..
            } => {
                let shifted: Vec<F> = y.iter().zip(offset).map(|(&v, &b)| v - b).collect();
                inverse.mat_vec(&shifted)
            }
            InvertibleMap::Polar { origin } => {
                let (r, theta) = (y[0], y[1]);
                vec![origin[0] + r * theta.cos(), origin[1] + r * theta.sin()]
            }
            InvertibleMap::Coupling(flow) => flow.inverse(y),
        })
    }

    /// Row-wise application to a batch.
    pub fn apply_rows(&self, x: &Matrix<F>) -> Result<Matrix<F>> {
        let rows = (0..x.rows())
            .map(|i| self.apply(x.row(i)))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.dim()));
        }
        Matrix::from_rows(&rows)
    }

    pub fn invert_rows(&self, y: &Matrix<F>) -> Result<Matrix<F>> {
        let rows = (0..y.rows())
            .map(|i| self.invert(y.row(i)))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.dim()));
        }
        Matrix::from_rows(&rows)
    }
}

fn random_orthogonal<F: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Matrix<F> {
    loop {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
        let mut ok = true;
        for _ in 0..dim {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
        if !ok {
            continue;
        }
        let mut m = Matrix::zeros(dim, dim);
        for (j, c) in cols.iter().enumerate() {
            for i in 0..dim {
                m[(i, j)] = F::lit(c[i]);
            }
        }
        if m.determinant() < F::zero() {
            for i in 0..dim {
                m[(i, 0)] = -m[(i, 0)];
            }
        }
        return m;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rotation_by_thirty_degrees() {
        let r = InvertibleMap::<f64>::plane_rotation(2, 30f64.to_radians()).unwrap();
        let y = r.apply(&[1.0, 0.0]).unwrap();
        assert!((y[0] - 0.866_025_403_784_438_6).abs() < 1e-12);
        assert!((y[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn singular_affine_is_rejected() {
        let m = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(
            InvertibleMap::<f64>::affine(m, vec![0.0, 0.0]),
            Err(Error::NotInvertible(_))
        ));
    }

    #[test]
    fn polar_round_trip_away_from_origin() {
        let p = InvertibleMap::<f64>::polar([-1.0, 0.0]);
        let x = [0.3, 0.8];
        let back = p.invert(&p.apply(&x).unwrap()).unwrap();
        assert!((back[0] - x[0]).abs() < 1e-12 && (back[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn coupling_log_det_matches_diagonal_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = AffineCouplingFlow::<f64>::random(1, 2, 4, 1.0, &mut rng).unwrap();
        let x = [0.4];
        let y = f.forward(&x);
        // Scalar map y = a·x + b, so log|dy/dx| is constant.
        let h = 1e-6;
        let fd = (f.forward(&[x[0] + h])[0] - f.forward(&[x[0] - h])[0]) / (2.0 * h);
        assert!((fd.ln() - f.log_det(&x)).abs() < 1e-8);
        assert!((f.inverse(&y)[0] - x[0]).abs() < 1e-12);
    }
}
