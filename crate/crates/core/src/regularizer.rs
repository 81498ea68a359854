//! Periodic second-difference operator and its Fourier diagonalization.
//!
//! The operator `L` is the `n × n` symmetric circulant matrix whose first
//! column, as printed, is `(−2−δ, 1, 0, .., 0, 1)`; for `n < 3` the off-diagonal
//! contributions accumulate on the wrapped positions (`n = 2` gives
//! `[[−2−δ, 2], [2, −2−δ]]`, `n = 1` gives `[−δ]`). That matrix is negative
//! definite, so [`LaplacianSign::PositiveDefinite`] (the default) uses `−L`.
//!
//! Every circulant is diagonalized by the unitary DFT: `L = Fᴴ diag(Λ) F` with
//! `Λ_j = s·(−2−δ+2cos(2πj/n))`, `s = ±1` the sign.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LaplacianSign {
    /// The matrix exactly as printed: eigenvalues in `[−4−δ, −δ]`.
    AsPrinted,
    /// The negated matrix: eigenvalues in `[δ, 4+δ]`.
    #[default]
    PositiveDefinite,
}

impl LaplacianSign {
    fn factor(self) -> f64 {
        match self {
            LaplacianSign::AsPrinted => 1.0,
            LaplacianSign::PositiveDefinite => -1.0,
        }
    }
}

impl FromStr for LaplacianSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-printed" => Ok(LaplacianSign::AsPrinted),
            "positive-definite" => Ok(LaplacianSign::PositiveDefinite),
            other => Err(Error::InvalidArgument(format!(
                "unknown laplacian sign {other:?} (expected as-printed or positive-definite)"
            ))),
        }
    }
}

impl fmt::Display for LaplacianSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LaplacianSign::AsPrinted => "as-printed",
            LaplacianSign::PositiveDefinite => "positive-definite",
        })
    }
}

#[derive(Clone)]
pub struct CirculantLaplacian {
    n: usize,
    delta: f64,
    sign: LaplacianSign,
    first_col: Vec<f64>,
    eigvals: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for CirculantLaplacian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CirculantLaplacian")
            .field("n", &self.n)
            .field("delta", &self.delta)
            .field("sign", &self.sign)
            .field("first_col", &self.first_col)
            .field("eigvals", &self.eigvals)
            .finish()
    }
}

impl CirculantLaplacian {
    pub fn build(n: usize, delta: f64, sign: LaplacianSign) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("laplacian size must be ≥ 1".into()));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be > 0, got {delta}")));
        }
        let s = sign.factor();
        let mut first_col = vec![0.0; n];
        first_col[0] += -2.0 - delta;
        first_col[1 % n] += 1.0;
        first_col[(n - 1) % n] += 1.0;
        for c in &mut first_col {
            *c *= s;
        }
        let eigvals: Vec<f64> = (0..n)
            .map(|j| s * ((2.0 * (2.0 * PI * j as f64 / n as f64).cos() - 2.0) - delta))
            .collect();

        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);

        let mut spectrum: Vec<Complex64> = first_col.iter().map(|&c| Complex64::new(c, 0.0)).collect();
        forward.process(&mut spectrum);
        for (z, &e) in spectrum.iter().zip(&eigvals) {
            assert!(
                (z.re - e).abs() <= 1e-10 * (4.0 + delta) && z.im.abs() <= 1e-10 * (4.0 + delta),
                "circulant spectrum {z} disagrees with analytic eigenvalue {e}"
            );
        }

        Ok(Self {
            n,
            delta,
            sign,
            first_col,
            eigvals,
            forward,
            inverse,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn sign(&self) -> LaplacianSign {
        self.sign
    }

    pub fn first_col(&self) -> &[f64] {
        &self.first_col
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    /// `L·v` through the wrapped three-point stencil.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        let mut out = vec![0.0; self.n];
        self.apply_into(v, &mut out);
        Ok(out)
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        let n = self.n;
        let s = self.sign.factor();
        let d = -2.0 - self.delta;
        for i in 0..n {
            let prev = v[(i + n - 1) % n];
            let next = v[(i + 1) % n];
            out[i] = s * (d * v[i] + prev + next);
        }
    }

    /// Dense `n × n` matrix, column-major.
    pub fn dense(&self) -> DenseTensor {
        let n = self.n;
        DenseTensor::from_fn(&[n, n], |idx| self.first_col[(idx[0] + n - idx[1]) % n])
    }

    /// `tr(Aᵀ L A) = Σ_cols ⟨a, L a⟩` for a matrix with `n` rows.
    pub fn trace_penalty(&self, a: &DenseTensor) -> Result<f64> {
        if a.order() != 2 || a.shape()[0] != self.n {
            return Err(Error::ShapeMismatch(format!(
                "trace penalty needs a matrix with {} rows, got shape {:?}",
                self.n,
                a.shape()
            )));
        }
        let mut lv = vec![0.0; self.n];
        let mut total = 0.0;
        for col in a.data().chunks_exact(self.n) {
            self.apply_into(col, &mut lv);
            total += col.iter().zip(&lv).map(|(x, y)| x * y).sum::<f64>();
        }
        Ok(total)
    }

    /// Unitary forward transform `F·v`.
    pub fn apply_f(&self, v: &[f64]) -> Result<Vec<Complex64>> {
        self.check_len(v.len())?;
        let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward_columns(&mut buf);
        Ok(buf)
    }

    /// Unitary inverse transform `Fᴴ·v`.
    pub fn apply_fh(&self, v: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(v.len())?;
        let mut buf = v.to_vec();
        self.inverse_columns(&mut buf);
        Ok(buf)
    }

    /// `F` applied to every consecutive length-`n` chunk of `buf`.
    pub(crate) fn forward_columns(&self, buf: &mut [Complex64]) {
        self.forward.process(buf);
        self.normalize(buf);
    }

    /// `Fᴴ` applied to every consecutive length-`n` chunk of `buf`.
    pub(crate) fn inverse_columns(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
        self.normalize(buf);
    }

    fn normalize(&self, buf: &mut [Complex64]) {
        let scale = 1.0 / (self.n as f64).sqrt();
        for z in buf {
            *z *= scale;
        }
    }

    /// `Fᴴ diag(Λ) F` assembled column by column from the spectrum.
    pub fn reconstruct_dense(&self) -> DenseTensor {
        let n = self.n;
        let mut out = DenseTensor::zeros(&[n, n]);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            buf[j] = Complex64::new(1.0, 0.0);
            self.forward_columns(&mut buf);
            for (z, &e) in buf.iter_mut().zip(&self.eigvals) {
                *z *= e;
            }
            self.inverse_columns(&mut buf);
            out.data_mut()[j * n..(j + 1) * n]
                .iter_mut()
                .zip(&buf)
                .for_each(|(o, z)| *o = z.re);
        }
        out
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::ShapeMismatch(format!(
                "vector of length {len} for a laplacian of size {}",
                self.n
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use nalgebra::DMatrix;

    fn pd(n: usize, delta: f64) -> CirculantLaplacian {
        CirculantLaplacian::build(n, delta, LaplacianSign::PositiveDefinite).unwrap()
    }

    fn printed(n: usize, delta: f64) -> CirculantLaplacian {
        CirculantLaplacian::build(n, delta, LaplacianSign::AsPrinted).unwrap()
    }

    fn pseudo(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(CirculantLaplacian::build(0, 0.5, LaplacianSign::default()).is_err());
        assert!(CirculantLaplacian::build(3, 0.0, LaplacianSign::default()).is_err());
        assert!(CirculantLaplacian::build(3, -1.0, LaplacianSign::default()).is_err());
    }

    #[test]
    fn small_sizes_wrap() {
        assert_eq!(printed(1, 1.0).first_col(), &[-1.0]);
        assert_eq!(printed(1, 1.0).eigvals(), &[-1.0]);
        assert_eq!(printed(2, 0.5).first_col(), &[-2.5, 2.0]);
        assert_eq!(printed(5, 0.5).first_col(), &[-2.5, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(pd(5, 0.5).first_col(), &[2.5, -1.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn eigenvalues_match_dense_oracle() {
        let l = pd(4, 0.5);
        let mut want = vec![0.5, 2.5, 4.5, 2.5];
        for (a, b) in l.eigvals().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
        let dense = l.dense();
        let m = DMatrix::from_column_slice(4, 4, dense.data());
        let mut eig: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn row_sums_are_minus_delta() {
        let l = printed(3, 0.37);
        let d = l.dense();
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| d.get(&[i, j])).sum();
            assert!((row + 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn spectrum_extremes() {
        for delta in [0.3, 0.4, 0.5, 0.6] {
            let l = pd(8, delta);
            let min = l.eigvals().iter().copied().fold(f64::INFINITY, f64::min);
            let max = l.eigvals().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(min, delta);
            assert!((max - (4.0 + delta)).abs() < 1e-14);
        }
    }

    #[test]
    fn reconstruction_matches_stencil() {
        for n in 1..=64 {
            for delta in [0.3, 0.4, 0.5, 0.6] {
                let l = pd(n, delta);
                let r = l.reconstruct_dense();
                let d = l.dense();
                let err = r.data().iter().zip(d.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err <= 1e-12, "n={n} δ={delta} err={err}");
            }
        }
    }

    #[test]
    fn stencil_matches_dense_product() {
        let l = printed(7, 0.45);
        let v = pseudo(7, 3);
        let lv = l.apply(&v).unwrap();
        let dense = matmul(&l.dense(), &DenseTensor::from_matrix(7, 1, v).unwrap()).unwrap();
        for (a, b) in lv.iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!(l.apply(&[1.0]).is_err());
    }

    #[test]
    fn transforms_are_unitary() {
        let l = pd(9, 0.5);
        let mut e1 = vec![0.0; 9];
        e1[0] = 1.0;
        for z in l.apply_f(&e1).unwrap() {
            assert!((z.re - 1.0 / 3.0).abs() < 1e-15 && z.im.abs() < 1e-15);
        }
        let v = pseudo(9, 4);
        let back = l.apply_fh(&l.apply_f(&v).unwrap()).unwrap();
        for (z, x) in back.iter().zip(&v) {
            assert!((z.re - x).abs() < 1e-14 && z.im.abs() < 1e-14);
        }
    }

    #[test]
    fn spectral_application_is_real() {
        let l = printed(6, 0.3);
        let v = pseudo(6, 5);
        let mut f = l.apply_f(&v).unwrap();
        for (z, &e) in f.iter_mut().zip(l.eigvals()) {
            *z *= e;
        }
        let lv = l.apply_fh(&f).unwrap();
        let want = l.apply(&v).unwrap();
        for (z, w) in lv.iter().zip(&want) {
            assert!((z.re - w).abs() < 1e-12 && z.im.abs() < 1e-12);
        }
    }

    #[test]
    fn trace_penalty_cases() {
        let l = printed(4, 0.5);
        assert_eq!(l.trace_penalty(&DenseTensor::zeros(&[4, 3])).unwrap(), 0.0);
        let c = DenseTensor::from_fn(&[4, 2], |_| 3.0);
        assert!((l.trace_penalty(&c).unwrap() - 2.0 * (-0.5 * 9.0 * 4.0)).abs() < 1e-12);
        assert!(l.trace_penalty(&DenseTensor::zeros(&[3, 3])).is_err());

        let l = pd(5, 0.4);
        let a = DenseTensor::from_matrix(5, 3, pseudo(15, 6)).unwrap();
        let la = matmul(&l.dense(), &a).unwrap();
        let want: f64 = a.data().iter().zip(la.data()).map(|(x, y)| x * y).sum();
        let got = l.trace_penalty(&a).unwrap();
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0));
        assert!(got >= 0.4 * a.norm_sq() - 1e-12);
    }

    #[test]
    fn sign_round_trips_through_text() {
        for s in [LaplacianSign::AsPrinted, LaplacianSign::PositiveDefinite] {
            assert_eq!(s.to_string().parse::<LaplacianSign>().unwrap(), s);
        }
        assert!("negative".parse::<LaplacianSign>().is_err());
    }
}
