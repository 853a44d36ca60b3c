//! Dense symmetric-matrix kernels: cyclic Jacobi eigendecomposition and
//! spectral matrix functions.
//!
//! Everything here targets desk-scale dimensions (M up to a few dozen bonds),
//! where the Jacobi method is deterministic, dependency-free and accurate to
//! near machine precision. Matrices are stored dense row-major; symmetry is
//! enforced on construction.

use crate::error::{Error, Result};

const MODULE: &str = "linalg";

/// Off-diagonal convergence threshold for the cyclic Jacobi sweeps.
const JACOBI_TOL: f64 = 1e-13;
const JACOBI_MAX_SWEEPS: usize = 64;

/// Symmetric `n × n` matrix with dense storage.
///
/// Construction symmetrizes the input exactly (`(a_ij + a_ji) / 2`) after
/// checking that the asymmetry is below tolerance, so `get(i, j) == get(j, i)`
/// holds bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymmetricMatrix {
    /// Build from a dense row-major slice, rejecting asymmetry beyond
    /// `1e-12` relative to the largest entry.
    pub fn from_dense(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::invalid(
                MODULE,
                format!("expected {} entries, got {}", n * n, data.len()),
            ));
        }
        let scale = data.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let asym = (data[i * n + j] - data[j * n + i]).abs();
                if asym > 1e-12 * scale {
                    return Err(Error::invalid(
                        MODULE,
                        format!("matrix not symmetric at ({i},{j}): asymmetry {asym:.3e}"),
                    ));
                }
            }
        }
        let mut m = Self {
            n,
            data: data.to_vec(),
        };
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (m.data[i * n + j] + m.data[j * n + i]);
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
            }
        }
        Ok(m)
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, d) in diag.iter().enumerate() {
            m.data[i * m.n + i] = *d;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Set both `(i, j)` and `(j, i)`.
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `y = S x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| (0..n).map(|j| self.data[i * n + j] * x[j]).sum())
            .collect()
    }

    /// Quadratic form `xᵀ S x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.data[i * n + j] * x[j];
            }
            acc += x[i] * row;
        }
        acc
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|v| c * v).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.n, other.n);
        Self {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.n, other.n);
        Self {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Congruence by a diagonal matrix: `diag(d) · S · diag(d)`.
    pub fn congruence_diag(&self, d: &[f64]) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = d[i] * self.data[i * n + j] * d[j];
            }
        }
        out
    }

    /// Symmetric product `S · T · S` (result is symmetric for symmetric T).
    pub fn sandwich(&self, t: &Self) -> Self {
        let st = mat_mul(self.n, &self.data, &t.data);
        let sts = mat_mul(self.n, &st, &self.data);
        let mut out = Self {
            n: self.n,
            data: sts,
        };
        // symmetrize away rounding noise
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let v = 0.5 * (out.get(i, j) + out.get(j, i));
                out.set_sym(i, j, v);
            }
        }
        out
    }

    /// Eigendecomposition `S = Q diag(λ) Qᵀ` by cyclic Jacobi rotations.
    /// Eigenvalues are returned in ascending order.
    pub fn eigen(&self) -> Result<EigenDecomposition> {
        let n = self.n;
        let mut a = self.data.clone();
        let mut q = SymmetricMatrix::identity(n).data;
        let scale = self.max_abs().max(f64::MIN_POSITIVE);

        let off = |a: &[f64]| -> f64 {
            let mut s = 0.0f64;
            for i in 0..n {
                for j in (i + 1)..n {
                    s = s.max(a[i * n + j].abs());
                }
            }
            s
        };

        let mut converged = false;
        for _ in 0..JACOBI_MAX_SWEEPS {
            if off(&a) <= JACOBI_TOL * scale {
                converged = true;
                break;
            }
            for p in 0..n {
                for r in (p + 1)..n {
                    let apq = a[p * n + r];
                    if apq.abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[r * n + r];
                    let theta = 0.5 * (aqq - app) / apq;
                    let t = if theta.abs() > 1e154 {
                        // avoid overflow in theta^2
                        0.5 / theta
                    } else {
                        let s = (1.0 + theta * theta).sqrt();
                        if theta >= 0.0 {
                            1.0 / (theta + s)
                        } else {
                            1.0 / (theta - s)
                        }
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    // rotate rows/columns p, r of a
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + r];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + r] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[r * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[r * n + k] = s * apk + c * aqk;
                    }
                    // accumulate eigenvectors
                    for k in 0..n {
                        let qkp = q[k * n + p];
                        let qkq = q[k * n + r];
                        q[k * n + p] = c * qkp - s * qkq;
                        q[k * n + r] = s * qkp + c * qkq;
                    }
                }
            }
        }
        if !converged && off(&a) > JACOBI_TOL * scale {
            return Err(Error::numerical(
                MODULE,
                format!(
                    "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps (off-diag {:.3e})",
                    off(&a)
                ),
            ));
        }

        let mut order: Vec<usize> = (0..n).collect();
        let eigs: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
        order.sort_by(|&i, &j| eigs[i].partial_cmp(&eigs[j]).unwrap());
        let values: Vec<f64> = order.iter().map(|&i| eigs[i]).collect();
        let mut vectors = vec![0.0; n * n];
        for (col, &src) in order.iter().enumerate() {
            for k in 0..n {
                vectors[k * n + col] = q[k * n + src];
            }
        }
        Ok(EigenDecomposition { n, values, vectors })
    }

    /// Spectral function: `f(S) = Q diag(f(λ)) Qᵀ`.
    ///
    /// `f` may reject an eigenvalue outside its domain; the error names it.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> Result<f64>) -> Result<SymmetricMatrix> {
        let eig = self.eigen()?;
        let mapped: Result<Vec<f64>> = eig.values.iter().map(|&l| f(l)).collect();
        Ok(eig.recompose(&mapped?))
    }

    /// Principal square root of a positive semidefinite matrix. Eigenvalues in
    /// `[-tol, 0)` are clamped to zero; anything below is an error.
    pub fn sqrt_psd(&self) -> Result<SymmetricMatrix> {
        let scale = self.max_abs().max(1.0);
        self.map_spectrum(|l| {
            if l < -1e-10 * scale {
                Err(Error::invalid(
                    MODULE,
                    format!("matrix not PSD: eigenvalue {l:.6e}"),
                ))
            } else {
                Ok(l.max(0.0).sqrt())
            }
        })
    }

    /// Inverse square root; requires positive definiteness.
    pub fn inv_sqrt_pd(&self) -> Result<SymmetricMatrix> {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        self.map_spectrum(|l| {
            if l <= 1e-14 * scale {
                Err(Error::invalid(
                    MODULE,
                    format!("matrix not positive definite: eigenvalue {l:.6e}"),
                ))
            } else {
                Ok(1.0 / l.sqrt())
            }
        })
    }

    /// Smallest eigenvalue.
    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigen()?.values[0])
    }
}

/// Result of a symmetric eigendecomposition.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    n: usize,
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Column-major eigenvectors aligned with `values` (row-major storage,
    /// column `i` is eigenvector `i`).
    pub vectors: Vec<f64>,
}

impl EigenDecomposition {
    /// Rebuild `Q diag(vals) Qᵀ` with substituted eigenvalues.
    pub fn recompose(&self, vals: &[f64]) -> SymmetricMatrix {
        let n = self.n;
        let mut out = SymmetricMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += self.vectors[i * n + k] * vals[k] * self.vectors[j * n + k];
                }
                out.set_sym(i, j, s);
            }
        }
        out
    }

    /// Residual `‖Q diag(λ) Qᵀ − S‖_max`.
    pub fn residual(&self, s: &SymmetricMatrix) -> f64 {
        self.recompose(&self.values).sub(s).max_abs()
    }
}

/// Plain dense `n×n` product (row-major).
pub(crate) fn mat_mul(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, rng: &mut impl Rng) -> SymmetricMatrix {
        // B Bᵀ for random B is PSD
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += b[i * n + k] * b[j * n + k];
                }
                data[i * n + j] = s;
            }
        }
        SymmetricMatrix::from_dense(n, &data).unwrap()
    }

    #[test]
    fn rejects_asymmetric_input() {
        let r = SymmetricMatrix::from_dense(2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(r.is_err());
    }

    #[test]
    fn eigen_identity() {
        let m = SymmetricMatrix::identity(3);
        let e = m.eigen().unwrap();
        for v in &e.values {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn eigen_residual_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1usize, 2, 3, 4, 6, 10] {
            let m = random_psd(n, &mut rng);
            let e = m.eigen().unwrap();
            let res = e.residual(&m);
            assert!(
                res <= 1e-11 * m.max_abs().max(1.0),
                "n={n} residual {res:.3e} vs scale {:.3e}",
                m.max_abs()
            );
        }
    }

    #[test]
    fn sqrt_of_identity_is_identity() {
        let m = SymmetricMatrix::identity(4);
        let s = m.sqrt_psd().unwrap();
        assert!(s.sub(&SymmetricMatrix::identity(4)).max_abs() < 1e-13);
    }

    #[test]
    fn tanh_of_diagonal_is_elementwise() {
        let m = SymmetricMatrix::from_diagonal(&[0.3, -1.2, 2.0]);
        let t = m.map_spectrum(|l| Ok(l.tanh())).unwrap();
        for (i, d) in [0.3f64, -1.2, 2.0].iter().enumerate() {
            assert!((t.get(i, i) - d.tanh()).abs() < 1e-14);
            for j in 0..3 {
                if j != i {
                    assert!(t.get(i, j).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn sqrt_squares_back_to_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_psd(4, &mut rng);
        let s = m.sqrt_psd().unwrap();
        let sq = s.sandwich(&SymmetricMatrix::identity(4));
        // s·I·s = s²
        let diff = sq.sub(&m).max_abs();
        assert!(diff <= 1e-10 * m.max_abs(), "sqrt(S)^2 residual {diff:.3e}");
    }

    #[test]
    fn domain_error_names_eigenvalue() {
        let m = SymmetricMatrix::from_diagonal(&[0.5, 2.0]);
        let r = m.map_spectrum(|l| {
            if l.abs() >= 1.0 {
                Err(Error::invalid(
                    MODULE,
                    format!("arctanh domain violated by eigenvalue {l}"),
                ))
            } else {
                Ok(l.atanh())
            }
        });
        let msg = format!("{}", r.unwrap_err());
        assert!(
            msg.contains("2"),
            "error should name the offending eigenvalue: {msg}"
        );
    }

    #[test]
    fn quad_form_matches_direct() {
        let m = SymmetricMatrix::from_dense(2, &[2.0, 0.5, 0.5, 3.0]).unwrap();
        let x = [1.0, -2.0];
        let expect = 2.0 * 1.0 + 2.0 * 0.5 * (1.0 * -2.0) + 3.0 * 4.0;
        assert!((m.quad_form(&x) - expect).abs() < 1e-14);
    }
}
