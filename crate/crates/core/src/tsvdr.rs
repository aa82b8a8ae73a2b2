//! Truncated singular value decomposition and reconstruction (TSVDR).
//!
//! The decomposition is a one-sided (Hestenes) Jacobi SVD. It is slower than
//! bidiagonalization for large square matrices, but the matrices here are
//! short and wide (a few channels by a few hundred time steps) and Jacobi
//! delivers singular values with high relative accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Off-diagonal tolerance for the Jacobi sweeps, relative to column norms.
pub const SVD_TOLERANCE: f64 = 1e-12;
pub const SVD_MAX_SWEEPS: usize = 100;

/// Thin SVD `X = U diag(sigma) V^T` with `r = min(M, L)`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// `M x r`, orthonormal columns.
    pub u: Matrix,
    /// Descending, nonnegative.
    pub sigma: Vec<f64>,
    /// `L x r`, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactors {
    /// `U diag(weights) V^T`.
    pub fn reconstruct_with(&self, weights: &[f64]) -> Matrix {
        let (m, l) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(m, l);
        for (k, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for i in 0..m {
                let a = w * self.u.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                    *o += a * self.v.get(j, k);
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(&self.sigma)
    }
}

/// How the truncation threshold `c` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum TruncationPolicy {
    /// `c` in the data's own units.
    Absolute(f64),
    /// `c = value * sigma_max`, `value` in `[0, 1]`.
    Relative(f64),
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        TruncationPolicy::Relative(0.05)
    }
}

impl TruncationPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TruncationPolicy::Absolute(c) if c.is_finite() && c >= 0.0 => Ok(()),
            TruncationPolicy::Relative(c) if (0.0..=1.0).contains(&c) => Ok(()),
            other => Err(Error::Parameter(format!("invalid truncation policy {other:?}"))),
        }
    }

    pub fn threshold(&self, sigma_max: f64) -> f64 {
        match *self {
            TruncationPolicy::Absolute(c) => c,
            TruncationPolicy::Relative(c) => c * sigma_max,
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            TruncationPolicy::Absolute(_) => "absolute",
            TruncationPolicy::Relative(_) => "relative",
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            TruncationPolicy::Absolute(c) | TruncationPolicy::Relative(c) => c,
        }
    }
}

/// Thin SVD of `x`.
pub fn svd(x: &Matrix) -> Result<SvdFactors> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Data("svd of an empty matrix".into()));
    }
    if !x.all_finite() {
        return Err(Error::Data("svd input contains non-finite values".into()));
    }
    if x.rows() >= x.cols() {
        jacobi_tall(x)
    } else {
        let f = jacobi_tall(&x.transpose())?;
        Ok(SvdFactors {
            u: f.v,
            sigma: f.sigma,
            v: f.u,
        })
    }
}

/// One-sided Jacobi on an `m x n` matrix with `m >= n`.
fn jacobi_tall(x: &Matrix) -> Result<SvdFactors> {
    let (m, n) = x.shape();
    // Column-major working copies keep each column contiguous.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| x.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| f64::from(u8::from(i == j))).collect())
        .collect();

    let mut converged = n < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: SVD_MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = norms[order[0]];
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for &k in &order {
        let s = norms[k];
        // Columns that are numerically zero carry no direction of their own.
        if s == 0.0 || s <= sigma_max * f64::EPSILON * m as f64 {
            sigma.push(if s == 0.0 { 0.0 } else { s });
            deficient.push(u_cols.len());
            u_cols.push(vec![0.0; m]);
        } else {
            sigma.push(s);
            u_cols.push(a[k].iter().map(|x| x / s).collect());
        }
    }
    complete_basis(&mut u_cols, &deficient);

    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    let vm = Matrix::from_fn(n, n, |i, j| v[order[j]][i]);
    Ok(SvdFactors { u, sigma, v: vm })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (xp, xq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*xp, *xq);
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

/// Fills the listed columns with unit vectors orthogonal to all others by
/// Gram-Schmidt against the standard basis.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = cols[0].len();
    let mut candidate = 0;
    for &slot in missing {
        loop {
            assert!(candidate < m, "basis completion ran out of candidates");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of classical Gram-Schmidt for numerical orthogonality.
            for _ in 0..2 {
                for (k, col) in cols.iter().enumerate() {
                    if k == slot || (missing.contains(&k) && col.iter().all(|x| *x == 0.0)) {
                        continue;
                    }
                    let d = dot(&e, col);
                    for (x, y) in e.iter_mut().zip(col) {
                        *x -= d * y;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Summary of a denoising pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseReport {
    pub threshold: f64,
    pub kept_rank: usize,
    pub full_rank: usize,
    /// `sum(kept sigma^2) / sum(sigma^2)`; 1 for the zero matrix.
    pub retained_energy: f64,
    /// `||X - X'||_F` from the discarded singular values.
    pub frobenius_error: f64,
    pub singular_values: Vec<f64>,
}

/// Zeroes every singular value strictly below the threshold and rebuilds the
/// matrix. Values equal to the threshold are kept.
pub fn tsvdr_denoise(x: &Matrix, policy: TruncationPolicy) -> Result<Matrix> {
    tsvdr_denoise_with_report(x, policy).map(|(m, _)| m)
}

pub fn tsvdr_denoise_with_report(x: &Matrix, policy: TruncationPolicy) -> Result<(Matrix, DenoiseReport)> {
    policy.validate()?;
    let f = svd(x)?;
    let c = policy.threshold(f.sigma[0]);
    let kept: Vec<f64> = f.sigma.iter().map(|&s| if s < c { 0.0 } else { s }).collect();
    let total: f64 = f.sigma.iter().map(|s| s * s).sum();
    let kept_energy: f64 = kept.iter().map(|s| s * s).sum();
    let report = DenoiseReport {
        threshold: c,
        kept_rank: kept.iter().filter(|&&s| s > 0.0).count(),
        full_rank: f.sigma.iter().filter(|&&s| s > 0.0).count(),
        retained_energy: if total > 0.0 { kept_energy / total } else { 1.0 },
        frobenius_error: (total - kept_energy).max(0.0).sqrt(),
        singular_values: f.sigma.clone(),
    };
    Ok((f.reconstruct_with(&kept), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, l: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(m, l, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        let g = q.transpose().matmul(q).unwrap();
        g.sub(&Matrix::identity(q.cols())).unwrap().frobenius()
    }

    /// Eigenvalues of the symmetric 2x2 Gram matrix, an independent route to
    /// the singular values of a 2-column matrix.
    fn gram_eigen_sigma(x: &Matrix) -> [f64; 2] {
        let g = x.transpose().matmul(x).unwrap();
        let (a, b, d) = (g.get(0, 0), g.get(0, 1), g.get(1, 1));
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d).powi(2) + b * b).sqrt();
        [(mid + rad).sqrt(), (mid - rad).max(0.0).sqrt()]
    }

    #[test]
    fn diagonal_matrix_singular_values() {
        let x = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]).unwrap();
        let f = svd(&x).unwrap();
        let oracle = gram_eigen_sigma(&x);
        assert!((f.sigma[0] - oracle[0]).abs() < 1e-12);
        assert!((f.sigma[1] - oracle[1]).abs() < 1e-12);
        assert_eq!(f.sigma, vec![3.0, 1.0]);
    }

    #[test]
    fn zero_matrix_has_zero_spectrum_and_orthonormal_factors() {
        for (m, l) in [(3, 5), (5, 3), (1, 1)] {
            let f = svd(&Matrix::zeros(m, l)).unwrap();
            assert!(f.sigma.iter().all(|&s| s == 0.0));
            assert!(orthonormality_error(&f.u) < 1e-10);
            assert!(orthonormality_error(&f.v) < 1e-10);
        }
    }

    #[test]
    fn random_wide_matrix_reconstructs() {
        let x = random(5, 7, 1);
        let f = svd(&x).unwrap();
        assert_eq!(f.u.shape(), (5, 5));
        assert_eq!(f.v.shape(), (7, 5));
        let rel = f.reconstruct().sub(&x).unwrap().frobenius() / x.frobenius();
        assert!(rel <= 1e-10, "{rel:e}");
        assert!(orthonormality_error(&f.u) < 1e-10);
        assert!(orthonormality_error(&f.v) < 1e-10);
        assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_deficient_input_still_gets_orthonormal_u() {
        let row = [1.0, 2.0, 3.0, 4.0];
        let x = Matrix::from_rows(&[row, row.map(|v| 2.0 * v), row.map(|v| -v)]).unwrap();
        let f = svd(&x).unwrap();
        assert!(f.sigma[1] < 1e-12 * f.sigma[0]);
        assert!(orthonormality_error(&f.u) < 1e-10);
        assert!(orthonormality_error(&f.v) < 1e-10);
        let rel = f.reconstruct().sub(&x).unwrap().frobenius() / x.frobenius();
        assert!(rel <= 1e-10);
    }

    #[test]
    fn non_finite_input_is_a_data_error() {
        let mut x = random(2, 3, 2);
        x.set(1, 1, f64::NAN);
        assert!(matches!(svd(&x), Err(Error::Data(_))));
    }

    #[test]
    fn denoise_closed_form_cases() {
        let x = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]).unwrap();
        let d = tsvdr_denoise(&x, TruncationPolicy::Absolute(2.0)).unwrap();
        let expect = Matrix::from_rows(&[[3.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(d.sub(&expect).unwrap().frobenius() < 1e-12);

        let r = random(4, 9, 3);
        let same = tsvdr_denoise(&r, TruncationPolicy::Absolute(0.0)).unwrap();
        assert!(same.sub(&r).unwrap().frobenius() / r.frobenius() <= 1e-10);

        let smax = svd(&r).unwrap().sigma[0];
        let gone = tsvdr_denoise(&r, TruncationPolicy::Absolute(smax * 1.01)).unwrap();
        assert!(gone.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_equal_to_a_singular_value_keeps_it() {
        let x = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]).unwrap();
        let (_, rep) = tsvdr_denoise_with_report(&x, TruncationPolicy::Absolute(1.0)).unwrap();
        assert_eq!(rep.kept_rank, 2);
    }

    #[test]
    fn policy_validation() {
        assert!(TruncationPolicy::Relative(1.5).validate().is_err());
        assert!(TruncationPolicy::Absolute(-1.0).validate().is_err());
        assert!(TruncationPolicy::Relative(0.05).validate().is_ok());
        assert_eq!(TruncationPolicy::Relative(0.5).threshold(4.0), 2.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn eckart_young_and_rank(m in 1usize..=20, l in 1usize..=50, frac in 0.0f64..1.0, seed in 0u64..10_000) {
            let x = random(m, l, seed);
            let sig = svd(&x).unwrap().sigma;
            let c = frac * sig[0];
            let (d, rep) = tsvdr_denoise_with_report(&x, TruncationPolicy::Absolute(c)).unwrap();
            let err2 = d.sub(&x).unwrap().frobenius().powi(2);
            let dropped: f64 = sig.iter().filter(|&&s| s < c).map(|s| s * s).sum();
            let scale = x.frobenius().powi(2);
            prop_assert!((err2 - dropped).abs() <= 1e-8 * dropped.max(1e-12 * scale));
            let expected_rank = sig.iter().filter(|&&s| s >= c).count();
            prop_assert_eq!(rep.kept_rank, expected_rank);
            let after = svd(&d).unwrap().sigma;
            let numerical_rank = after.iter().filter(|&&s| s > 1e-10 * after[0]).count();
            prop_assert_eq!(numerical_rank, expected_rank);
        }

        #[test]
        fn denoising_is_idempotent(m in 1usize..=8, l in 1usize..=20, frac in 0.0f64..1.0, seed in 0u64..10_000) {
            let x = random(m, l, seed);
            let p = TruncationPolicy::Relative(frac);
            let once = tsvdr_denoise(&x, p).unwrap();
            let twice = tsvdr_denoise(&once, p).unwrap();
            let denom = once.frobenius().max(1e-300);
            prop_assert!(twice.sub(&once).unwrap().frobenius() / denom <= 1e-8);
        }

        #[test]
        fn error_is_monotone_in_threshold(seed in 0u64..10_000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let x = random(6, 15, seed);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let e1 = tsvdr_denoise(&x, TruncationPolicy::Relative(lo)).unwrap().sub(&x).unwrap().frobenius();
            let e2 = tsvdr_denoise(&x, TruncationPolicy::Relative(hi)).unwrap().sub(&x).unwrap().frobenius();
            prop_assert!(e1 <= e2 + 1e-12);
        }
    }
}
