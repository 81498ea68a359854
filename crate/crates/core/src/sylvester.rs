//! Closed-form factor update.
//!
//! With `Y = X_(k) Mᵀ + ρ A_prev` and `G = M Mᵀ`, the factor subproblem's
//! stationarity condition is the Sylvester equation
//!
//! ```text
//! λ L A + A G + ρ A = Y        (A: q × s, L: q × q circulant, G: s × s)
//! ```
//!
//! Diagonalizing `L = Fᴴ diag(Λ) F` and `G = C diag(Φ) Cᵀ` turns it into an
//! entrywise division: `A = Fᴴ((F Y C) ⊘ T) Cᵀ` with
//! `T[i, j] = λ Λ_i + Φ_j + ρ`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::regularizer::CirculantLaplacian;
use crate::tensor::{gemm, DenseTensor, MatRef};

/// Smallest admissible entry of the denominator table.
pub const MIN_DENOMINATOR: f64 = 1e-10;

/// Largest `s·q` accepted by [`solve_factor_dense_oracle`].
pub const DENSE_ORACLE_LIMIT: usize = 4096;

/// Inputs of one factor update. Matrices are order-2 tensors.
#[derive(Clone, Copy, Debug)]
pub struct FactorSubproblem<'a> {
    /// Mode-`k` unfolding of `X`, `q × P`.
    pub x_k: &'a DenseTensor,
    /// Unfolded leave-one-out tensor, `s × P`.
    pub m_k: &'a DenseTensor,
    /// Current mode-`k` unfolding of the factor, `q × s`.
    pub a_prev: &'a DenseTensor,
    pub laplacian: &'a CirculantLaplacian,
    pub lambda: f64,
    pub rho: f64,
}

impl FactorSubproblem<'_> {
    /// Returns `(q, s)`.
    pub fn validate(&self) -> Result<(usize, usize)> {
        for (name, m) in [("x_k", self.x_k), ("m_k", self.m_k), ("a_prev", self.a_prev)] {
            if m.order() != 2 {
                return Err(Error::ShapeMismatch(format!("{name} must be a matrix, got {:?}", m.shape())));
            }
        }
        let (q, p) = (self.x_k.rows(), self.x_k.cols());
        let s = self.m_k.rows();
        if self.m_k.cols() != p {
            return Err(Error::ShapeMismatch(format!(
                "x_k is {q}×{p} but m_k is {s}×{}",
                self.m_k.cols()
            )));
        }
        if self.a_prev.shape() != [q, s] {
            return Err(Error::ShapeMismatch(format!(
                "a_prev must be {q}×{s}, got {:?}",
                self.a_prev.shape()
            )));
        }
        if self.laplacian.size() != q {
            return Err(Error::ShapeMismatch(format!(
                "laplacian of size {} for {q} rows",
                self.laplacian.size()
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        Ok((q, s))
    }

    /// `Y = X_(k) Mᵀ + ρ A_prev`.
    pub fn rhs(&self) -> Result<DenseTensor> {
        let (q, s) = self.validate()?;
        let mut y = gemm(MatRef::of(self.x_k), MatRef::of(self.m_k).t());
        for (v, a) in y.iter_mut().zip(self.a_prev.data()) {
            *v += self.rho * a;
        }
        DenseTensor::from_matrix(q, s, y)
    }

    /// `G = M Mᵀ`.
    pub fn gram(&self) -> DenseTensor {
        gram(self.m_k)
    }
}

/// `M Mᵀ`, exactly symmetric.
pub fn gram(m: &DenseTensor) -> DenseTensor {
    let s = m.rows();
    let mut g = gemm(MatRef::of(m), MatRef::of(m).t());
    for j in 0..s {
        for i in j + 1..s {
            let v = 0.5 * (g[i + j * s] + g[j + i * s]);
            g[i + j * s] = v;
            g[j + i * s] = v;
        }
    }
    DenseTensor::from_matrix(s, s, g).expect("gram shape")
}

/// Orthogonal eigendecomposition `M Mᵀ = C diag(Φ) Cᵀ` with `Φ ≥ 0`.
#[derive(Clone, Debug)]
pub struct SpectralPair {
    /// `s × s`, orthonormal columns.
    pub c: DenseTensor,
    pub phi: Vec<f64>,
}

/// Eigendecomposition of the Gram matrix of `m`'s rows.
pub fn eig_gram(m: &DenseTensor) -> Result<SpectralPair> {
    if m.order() != 2 {
        return Err(Error::ShapeMismatch(format!("eig_gram needs a matrix, got {:?}", m.shape())));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("leave-one-out matrix has non-finite entries".into()));
    }
    eig_symmetric(&gram(m))
}

/// Eigendecomposition of a symmetric PSD matrix, eigenvalues clamped at 0.
pub fn eig_symmetric(g: &DenseTensor) -> Result<SpectralPair> {
    let s = g.rows();
    if g.order() != 2 || g.cols() != s {
        return Err(Error::ShapeMismatch(format!("expected a square matrix, got {:?}", g.shape())));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("gram matrix has non-finite entries".into()));
    }
    let eig = DMatrix::from_column_slice(s, s, g.data()).symmetric_eigen();
    let phi = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    let c = DenseTensor::from_matrix(s, s, eig.eigenvectors.as_slice().to_vec())?;
    Ok(SpectralPair { c, phi })
}

/// The factor update, `q × s`.
pub fn solve_factor(p: &FactorSubproblem<'_>) -> Result<DenseTensor> {
    p.validate()?;
    let y = p.rhs()?;
    let spectral = eig_gram(p.m_k)?;
    solve_spectral(&y, &spectral, p.laplacian, p.lambda, p.rho)
}

/// Solves `λ L A + A G + ρ A = Y` given the spectral pair of `G`.
pub fn solve_spectral(
    y: &DenseTensor,
    spectral: &SpectralPair,
    laplacian: &CirculantLaplacian,
    lambda: f64,
    rho: f64,
) -> Result<DenseTensor> {
    let (q, s) = (y.rows(), y.cols());
    if y.order() != 2 || spectral.c.shape() != [s, s] || laplacian.size() != q {
        return Err(Error::ShapeMismatch(format!(
            "rhs {:?}, eigenvectors {:?}, laplacian size {}",
            y.shape(),
            spectral.c.shape(),
            laplacian.size()
        )));
    }
    let yc = gemm(MatRef::of(y), MatRef::of(&spectral.c));
    let mut buf: Vec<Complex64> = yc.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    laplacian.forward_columns(&mut buf);
    let lam = laplacian.eigvals();
    for (j, col) in buf.chunks_exact_mut(q).enumerate() {
        let phi = spectral.phi[j];
        for (i, z) in col.iter_mut().enumerate() {
            let t = lambda * lam[i] + phi + rho;
            if t.is_nan() || t <= MIN_DENOMINATOR {
                return Err(Error::NonPositiveDenominator {
                    row: i,
                    col: j,
                    value: t,
                    laplacian_eigval: lam[i],
                    gram_eigval: phi,
                });
            }
            *z /= t;
        }
    }
    laplacian.inverse_columns(&mut buf);
    let (mut re_sq, mut im_sq) = (0.0, 0.0);
    let re: Vec<f64> = buf
        .iter()
        .map(|z| {
            re_sq += z.re * z.re;
            im_sq += z.im * z.im;
            z.re
        })
        .collect();
    let (re_norm, im_norm) = (re_sq.sqrt(), im_sq.sqrt());
    if im_norm > 1e-9 * re_norm && im_norm > 0.0 {
        return Err(Error::ImaginaryResidue {
            imag: im_norm,
            real: re_norm,
        });
    }
    let a = gemm(MatRef::col_major(&re, q, s), MatRef::of(&spectral.c).t());
    let a = DenseTensor::from_matrix(q, s, a)?;
    if !a.is_finite() {
        return Err(Error::NonFinite("factor update produced non-finite entries".into()));
    }
    Ok(a)
}

/// Direct solve of the vectorized system
/// `(λ I_s ⊗ L + G ⊗ I_q + ρ I) vec(A) = vec(Y)`.
pub fn solve_factor_dense_oracle(p: &FactorSubproblem<'_>) -> Result<DenseTensor> {
    let (q, s) = p.validate()?;
    let n = q * s;
    if n > DENSE_ORACLE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "dense oracle limited to s·q ≤ {DENSE_ORACLE_LIMIT}, got {n}"
        )));
    }
    let y = p.rhs()?;
    let g = p.gram();
    let l = p.laplacian.dense();
    let mut k = DMatrix::<f64>::zeros(n, n);
    for b in 0..s {
        for a in 0..s {
            let gab = g.get(&[a, b]);
            for i in 0..q {
                k[(a * q + i, b * q + i)] += gab;
            }
        }
        for i in 0..q {
            for j in 0..q {
                k[(b * q + i, b * q + j)] += p.lambda * l.get(&[i, j]);
            }
            k[(b * q + i, b * q + i)] += p.rho;
        }
    }
    let rhs = nalgebra::DVector::from_column_slice(y.data());
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular(format!("{n}×{n} Kronecker system")))?;
    DenseTensor::from_matrix(q, s, sol.as_slice().to_vec())
}

/// `‖A G + λ L A + ρ A − Y‖_F / ‖Y‖_F` (absolute when `Y = 0`).
pub fn stationarity_residual(p: &FactorSubproblem<'_>, a: &DenseTensor) -> Result<f64> {
    let (q, s) = p.validate()?;
    if a.shape() != [q, s] {
        return Err(Error::ShapeMismatch(format!("solution must be {q}×{s}, got {:?}", a.shape())));
    }
    let y = p.rhs()?;
    let g = p.gram();
    let mut r = gemm(MatRef::of(a), MatRef::of(&g));
    for (j, col) in a.data().chunks_exact(q).enumerate() {
        let la = p.laplacian.apply(col)?;
        for i in 0..q {
            r[i + j * q] += p.lambda * la[i] + p.rho * col[i] - y.data()[i + j * q];
        }
    }
    let res = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = y.norm();
    Ok(if scale > 0.0 { res / scale } else { res })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizer::LaplacianSign;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
        DenseTensor::from_fn(&[rows, cols], |_| rng.sample(StandardNormal))
    }

    fn rel(a: &DenseTensor, b: &DenseTensor) -> f64 {
        a.dist_sq(b).unwrap().sqrt() / b.norm()
    }

    fn lap(q: usize) -> CirculantLaplacian {
        CirculantLaplacian::build(q, 0.5, LaplacianSign::PositiveDefinite).unwrap()
    }

    #[test]
    fn pure_proximal_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(4, 6, &mut rng);
        let m = DenseTensor::zeros(&[3, 6]);
        let a_prev = randn(4, 3, &mut rng);
        let l = lap(4);
        let p = FactorSubproblem { x_k: &x, m_k: &m, a_prev: &a_prev, laplacian: &l, lambda: 0.0, rho: 1.0 };
        let a = solve_factor(&p).unwrap();
        assert!(rel(&a, &a_prev) < 1e-14);
    }

    #[test]
    fn vanishing_proximal_term_gives_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(4, 10, &mut rng);
        let m = randn(3, 10, &mut rng);
        let a_prev = randn(4, 3, &mut rng);
        let l = lap(4);
        let p = FactorSubproblem { x_k: &x, m_k: &m, a_prev: &a_prev, laplacian: &l, lambda: 0.0, rho: 1e-12 };
        let a = solve_factor(&p).unwrap();
        // normal equations: A (M Mᵀ) = X Mᵀ
        let xm = DMatrix::from_column_slice(4, 3, &gemm(MatRef::of(&x), MatRef::of(&m).t()));
        let g = DMatrix::from_column_slice(3, 3, gram(&m).data());
        let ls = g.lu().solve(&xm.transpose()).unwrap().transpose();
        let ls = DenseTensor::from_matrix(4, 3, ls.as_slice().to_vec()).unwrap();
        assert!(rel(&a, &ls) < 1e-8);
        assert!(rel(&solve_factor_dense_oracle(&p).unwrap(), &ls) < 1e-8);
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(4, 12, &mut rng);
        let m = randn(3, 12, &mut rng);
        let a_prev = randn(4, 3, &mut rng);
        let l = lap(4);
        let p = FactorSubproblem { x_k: &x, m_k: &m, a_prev: &a_prev, laplacian: &l, lambda: 0.35, rho: 0.1 };
        let a = solve_factor(&p).unwrap();
        assert!(rel(&a, &solve_factor_dense_oracle(&p).unwrap()) < 1e-8);
        assert!(stationarity_residual(&p, &a).unwrap() < 1e-8);
    }

    #[test]
    fn scalar_closed_form() {
        let x = DenseTensor::from_matrix(1, 1, vec![2.0]).unwrap();
        let m = DenseTensor::from_matrix(1, 1, vec![3.0]).unwrap();
        let a_prev = DenseTensor::from_matrix(1, 1, vec![-1.0]).unwrap();
        let l = lap(1);
        let p = FactorSubproblem { x_k: &x, m_k: &m, a_prev: &a_prev, laplacian: &l, lambda: 0.7, rho: 0.2 };
        let want = (2.0 * 3.0 + -0.2) / (9.0 + 0.7 * 0.5 + 0.2);
        assert!((solve_factor_dense_oracle(&p).unwrap().data()[0] - want).abs() < 1e-15);
        assert!((solve_factor(&p).unwrap().data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn column_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(5, 8, &mut rng);
        let m = randn(2, 8, &mut rng);
        let a_prev = randn(5, 2, &mut rng);
        let l = lap(5);
        let perm = [3, 7, 0, 1, 6, 2, 5, 4];
        let px = DenseTensor::from_fn(&[5, 8], |i| x.get(&[i[0], perm[i[1]]]));
        let pm = DenseTensor::from_fn(&[2, 8], |i| m.get(&[i[0], perm[i[1]]]));
        let p = FactorSubproblem { x_k: &x, m_k: &m, a_prev: &a_prev, laplacian: &l, lambda: 0.4, rho: 0.1 };
        let pp = FactorSubproblem { x_k: &px, m_k: &pm, ..p };
        assert!(rel(&solve_factor(&pp).unwrap(), &solve_factor(&p).unwrap()) < 1e-12);
    }

    #[test]
    fn update_decreases_subproblem_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(6, 9, &mut rng);
        let m = randn(3, 9, &mut rng);
        let a_prev = randn(6, 3, &mut rng);
        let l = lap(6);
        let p = FactorSubproblem { x_k: &x, m_k: &m, a_prev: &a_prev, laplacian: &l, lambda: 0.35, rho: 0.1 };
        let f = |a: &DenseTensor| {
            let fit = matmul(a, &m).unwrap().dist_sq(&x).unwrap();
            0.5 * fit + 0.5 * 0.35 * l.trace_penalty(a).unwrap() + 0.5 * 0.1 * a.dist_sq(&a_prev).unwrap()
        };
        let a = solve_factor(&p).unwrap();
        assert!(f(&a) < f(&a_prev));
    }

    #[test]
    fn eig_gram_cases() {
        let id = DenseTensor::from_fn(&[3, 3], |i| (i[0] == i[1]) as u8 as f64);
        let sp = eig_gram(&id).unwrap();
        assert!(sp.phi.iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let sp = eig_gram(&DenseTensor::zeros(&[3, 5])).unwrap();
        assert!(sp.phi.iter().all(|&v| v == 0.0));
        let ctc = gemm(MatRef::of(&sp.c).t(), MatRef::of(&sp.c));
        for j in 0..3 {
            for i in 0..3 {
                assert!((ctc[i + 3 * j] - (i == j) as u8 as f64).abs() < 1e-14);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = randn(5, 20, &mut rng);
        let sp = eig_gram(&m).unwrap();
        let scaled = DenseTensor::from_fn(&[5, 5], |i| sp.c.get(i) * sp.phi[i[1]]);
        let recon = DenseTensor::from_matrix(5, 5, gemm(MatRef::of(&scaled), MatRef::of(&sp.c).t())).unwrap();
        assert!(rel(&recon, &gram(&m)) < 1e-10);

        let bad = DenseTensor::from_fn(&[2, 2], |_| f64::NAN);
        assert!(matches!(eig_gram(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn as_printed_sign_trips_the_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(4, 6, &mut rng);
        let m = DenseTensor::zeros(&[2, 6]);
        let a_prev = randn(4, 2, &mut rng);
        let l = CirculantLaplacian::build(4, 0.5, LaplacianSign::AsPrinted).unwrap();
        let p = FactorSubproblem { x_k: &x, m_k: &m, a_prev: &a_prev, laplacian: &l, lambda: 1.0, rho: 0.1 };
        let err = solve_factor(&p).unwrap_err();
        assert!(matches!(err, Error::NonPositiveDenominator { .. }));
        assert!(err.is_numeric());
    }

    #[test]
    fn shape_errors() {
        let x = DenseTensor::zeros(&[4, 6]);
        let m = DenseTensor::zeros(&[2, 5]);
        let a_prev = DenseTensor::zeros(&[4, 2]);
        let l = lap(4);
        let p = FactorSubproblem { x_k: &x, m_k: &m, a_prev: &a_prev, laplacian: &l, lambda: 1.0, rho: 0.1 };
        assert!(matches!(solve_factor(&p), Err(Error::ShapeMismatch(_))));
        let m = DenseTensor::zeros(&[2, 6]);
        let p = FactorSubproblem { m_k: &m, rho: 0.0, ..p };
        assert!(matches!(solve_factor(&p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dense_oracle_size_guard() {
        let x = DenseTensor::zeros(&[65, 2]);
        let m = DenseTensor::zeros(&[64, 2]);
        let a_prev = DenseTensor::zeros(&[65, 64]);
        let l = lap(65);
        let p = FactorSubproblem { x_k: &x, m_k: &m, a_prev: &a_prev, laplacian: &l, lambda: 1.0, rho: 0.1 };
        assert!(solve_factor_dense_oracle(&p).is_err());
    }
}
