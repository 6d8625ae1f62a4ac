//! Small dense matrix kernel.
//!
//! Just enough linear algebra for the ensemble losses: row-major matrices,
//! empirical covariance, Cholesky factorization, log-determinant, and the
//! analytic gradients needed to train through them. Matrices here are tiny
//! (N classifiers by a minibatch of anchors), so everything is plain loops.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("matrix is not positive definite (Cholesky failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("covariance needs at least 2 columns, got {cols}")]
    TooFewColumns { cols: usize },
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Build from row-major data. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let m = if n == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            assert_eq!(r.len(), m, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: n, cols: m, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.at(r, c));
            }
        }
        out
    }

    /// `self * other`. The inner accumulation runs over k in fixed order,
    /// which the determinism contract relies on.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for c in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.at(r, k) * other.at(k, c);
                }
                out.set(r, c, acc);
            }
        }
        out
    }

    /// `self * otherᵀ`; both operands are scanned along contiguous rows.
    pub fn matmul_bt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_bt shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            for c in 0..other.rows {
                let a = self.row(r);
                let b = other.row(c);
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += a[k] * b[k];
                }
                out.set(r, c, acc);
            }
        }
        out
    }

    /// `selfᵀ * other`.
    pub fn matmul_at(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_at shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.cols {
            for c in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.rows {
                    acc += self.at(k, r) * other.at(k, c);
                }
                out.set(r, c, acc);
            }
        }
        out
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += s * other`, entry-wise.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Copy of the given columns, in the given order.
    pub fn select_columns(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, indices.len());
        for (c, &i) in indices.iter().enumerate() {
            for r in 0..self.rows {
                out.set(r, c, self.at(r, i));
            }
        }
        out
    }

    /// Rows centered to zero mean.
    pub fn center_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            for v in row {
                *v -= mean;
            }
        }
        out
    }
}

/// Empirical covariance of the rows of `f` over its columns, divisor `1/N_A`
/// (population normalization). Output is exactly symmetric by construction.
pub fn covariance(f: &Matrix) -> Result<Matrix, LinalgError> {
    let n_a = f.cols();
    if n_a < 2 {
        return Err(LinalgError::TooFewColumns { cols: n_a });
    }
    let centered = f.center_rows();
    let n = f.rows();
    let mut sigma = Matrix::zeros(n, n);
    for j in 0..n {
        for k in j..n {
            let a = centered.row(j);
            let b = centered.row(k);
            let mut acc = 0.0;
            for i in 0..n_a {
                acc += a[i] * b[i];
            }
            let v = acc / n_a as f64;
            sigma.set(j, k, v);
            sigma.set(k, j, v);
        }
    }
    Ok(sigma)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix, LinalgError> {
    let n = a.rows();
    if a.cols() != n {
        return Err(LinalgError::DimMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.at(j, j);
        for k in 0..j {
            diag -= l.at(j, k) * l.at(j, k);
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

fn ridged(s: &Matrix, ridge: f64) -> Matrix {
    let mut a = s.clone();
    for i in 0..a.rows() {
        a.add_at(i, i, ridge);
    }
    a
}

/// `log det(S + ridge*I)` via Cholesky, natural logarithm.
pub fn logdet_psd(s: &Matrix, ridge: f64) -> Result<f64, LinalgError> {
    let l = cholesky(&ridged(s, ridge))?;
    let mut acc = 0.0;
    for i in 0..l.rows() {
        acc += l.at(i, i).ln();
    }
    Ok(2.0 * acc)
}

/// Gradient of `log det(S + ridge*I)` with respect to `S`: the inverse of the
/// ridged matrix, symmetrized.
pub fn grad_logdet(s: &Matrix, ridge: f64) -> Result<Matrix, LinalgError> {
    let n = s.rows();
    let l = cholesky(&ridged(s, ridge))?;
    // Solve L Lᵀ X = I column by column.
    let mut inv = Matrix::zeros(n, n);
    for col in 0..n {
        // forward: L y = e_col
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s_ = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s_ -= l.at(i, k) * y[k];
            }
            y[i] = s_ / l.at(i, i);
        }
        // backward: Lᵀ x = y
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s_ = y[i];
            for k in (i + 1)..n {
                s_ -= l.at(k, i) * x[k];
            }
            x[i] = s_ / l.at(i, i);
        }
        for i in 0..n {
            inv.set(i, col, x[i]);
        }
    }
    // Symmetrize to remove round-off asymmetry.
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, 0.5 * (inv.at(i, j) + inv.at(j, i)));
        }
    }
    Ok(out)
}

/// Back-propagate a gradient `G = dL/dSigma` through the covariance
/// construction: `dL/dF = (2/N_A) * G * F_centered`.
pub fn chain_covariance_grad(f: &Matrix, g: &Matrix) -> Result<Matrix, LinalgError> {
    let n = f.rows();
    if g.rows() != n || g.cols() != n {
        return Err(LinalgError::DimMismatch(format!(
            "gradient must be {n}x{n}, got {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    let centered = f.center_rows();
    let mut out = g.matmul(&centered);
    out.scale_in_place(2.0 / f.cols() as f64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff_grad, max_rel_err};
    use crate::rng::{derive_rng, fill_normal, tag};
    use approx::assert_abs_diff_eq;

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let mut rng = derive_rng(seed, &[tag::GRADCHECK, n as u64]);
        let mut b = Matrix::zeros(n, n);
        fill_normal(&mut rng, b.data_mut(), 1.0);
        // B Bᵀ + I is comfortably positive definite.
        let mut s = b.matmul_bt(&b);
        for i in 0..n {
            s.add_at(i, i, 1.0);
        }
        s
    }

    #[test]
    fn covariance_of_constant_rows_is_zero() {
        // Binary-exact constants center to exactly zero.
        let f = Matrix::from_rows(&[vec![0.25, 0.25, 0.25], vec![0.75, 0.75, 0.75]]);
        let sigma = covariance(&f).unwrap();
        assert!(sigma.data().iter().all(|&v| v == 0.0));
        // Non-representable constants still center to round-off scale.
        let g = Matrix::from_rows(&[vec![0.3, 0.3, 0.3]]);
        assert!(covariance(&g).unwrap().at(0, 0).abs() < 1e-30);
    }

    #[test]
    fn covariance_matches_direct_arithmetic() {
        // Centered rows are [-0.4, 0, 0.4] and [0, 0.4, -0.4]; divisor 3.
        let f = Matrix::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.5, 0.9, 0.1]]);
        let sigma = covariance(&f).unwrap();
        assert_abs_diff_eq!(sigma.at(0, 0), 0.32 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sigma.at(1, 1), 0.32 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sigma.at(0, 1), -0.16 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sigma.at(1, 0), -0.16 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn covariance_of_single_row_is_variance() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let sigma = covariance(&f).unwrap();
        // Population variance of 1..4 with mean 2.5.
        assert_abs_diff_eq!(sigma.at(0, 0), 1.25, epsilon = 1e-15);
    }

    #[test]
    fn covariance_rejects_single_column() {
        let f = Matrix::from_rows(&[vec![1.0], vec![2.0]]);
        assert_eq!(covariance(&f), Err(LinalgError::TooFewColumns { cols: 1 }));
    }

    #[test]
    fn covariance_is_exactly_symmetric_and_psd() {
        for seed in 0..20 {
            let mut rng = derive_rng(seed, &[tag::GRADCHECK]);
            let mut f = Matrix::zeros(4, 9);
            fill_normal(&mut rng, f.data_mut(), 1.0);
            let sigma = covariance(&f).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(sigma.at(i, j).to_bits(), sigma.at(j, i).to_bits());
                }
            }
            // PSD up to round-off: Cholesky with a tiny ridge must succeed.
            assert!(cholesky(&ridged(&sigma, 1e-12)).is_ok());
        }
    }

    #[test]
    fn logdet_identity_is_zero() {
        assert_eq!(logdet_psd(&Matrix::identity(3), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn logdet_diagonal() {
        let s = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        assert_abs_diff_eq!(logdet_psd(&s, 0.0).unwrap(), 6.0_f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn logdet_of_example_covariance() {
        let f = Matrix::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.5, 0.9, 0.1]]);
        let sigma = covariance(&f).unwrap();
        // 2x2 determinant arithmetic on the exact entries.
        let v: f64 = 0.32 / 3.0;
        let c: f64 = -0.16 / 3.0;
        let expected = (v * v - c * c).ln();
        assert_abs_diff_eq!(logdet_psd(&sigma, 0.0).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn logdet_reports_failing_pivot() {
        let s = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
        assert_eq!(
            logdet_psd(&s, 0.0),
            Err(LinalgError::NotPositiveDefinite { pivot: 1 })
        );
    }

    #[test]
    fn logdet_monotone_in_ridge() {
        let s = random_spd(4, 11);
        let mut prev = f64::NEG_INFINITY;
        for ridge in [0.0, 1e-6, 1e-3, 1e-1, 1.0] {
            let v = logdet_psd(&s, ridge).unwrap();
            assert!(v >= prev, "logdet not monotone at ridge={ridge}");
            prev = v;
        }
    }

    #[test]
    fn neg_logdet_grows_with_correlation() {
        // det = v^2 (1 - rho^2), so -log det strictly increases in |rho|.
        let v = 0.07;
        let mut prev = f64::NEG_INFINITY;
        for rho in [0.0, 0.3, 0.6, 0.9, 0.99] {
            let s = Matrix::from_rows(&[vec![v, rho * v], vec![rho * v, v]]);
            let neg = -logdet_psd(&s, 0.0).unwrap();
            let analytic = -(v * v * (1.0 - rho * rho)).ln();
            assert_abs_diff_eq!(neg, analytic, epsilon = 1e-12);
            assert!(neg > prev);
            prev = neg;
        }
    }

    #[test]
    fn grad_logdet_of_identity_is_identity() {
        let g = grad_logdet(&Matrix::identity(3), 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g.at(i, j), want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn grad_logdet_of_diagonal_is_reciprocal() {
        let s = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        let g = grad_logdet(&s, 0.0).unwrap();
        assert_abs_diff_eq!(g.at(0, 0), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(g.at(1, 1), 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.at(0, 1), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn grad_logdet_matches_finite_differences() {
        // Perturb symmetric pairs together: d/dS_ij with S kept symmetric picks
        // up both (i,j) and (j,i), so the analytic entry doubles off-diagonal.
        for seed in 0..100u64 {
            let s = random_spd(3, 1000 + seed);
            let g = grad_logdet(&s, 0.0).unwrap();
            let flat: Vec<f64> = s.data().to_vec();
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            for i in 0..3 {
                for j in i..3 {
                    let f = |x: &[f64]| {
                        let m = Matrix::from_vec(3, 3, x.to_vec());
                        logdet_psd(&m, 0.0).unwrap()
                    };
                    let mut probe = flat.clone();
                    let h = 1e-5;
                    probe[i * 3 + j] += h;
                    if i != j {
                        probe[j * 3 + i] += h;
                    }
                    let up = f(&probe);
                    probe[i * 3 + j] = flat[i * 3 + j] - h;
                    if i != j {
                        probe[j * 3 + i] = flat[j * 3 + i] - h;
                    }
                    let down = f(&probe);
                    let fd = (up - down) / (2.0 * h);
                    let a = if i == j { g.at(i, j) } else { 2.0 * g.at(i, j) };
                    analytic.push(a);
                    numeric.push(fd);
                }
            }
            let err = max_rel_err(&analytic, &numeric);
            assert!(err <= 1e-5, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn chain_grad_zero_gradient_gives_zero() {
        let f = Matrix::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.5, 0.9, 0.1]]);
        let g = Matrix::zeros(2, 2);
        let out = chain_covariance_grad(&f, &g).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chain_grad_constant_rows_give_zero() {
        let f = Matrix::from_rows(&[vec![0.5, 0.5, 0.5], vec![0.75, 0.75, 0.75]]);
        let g = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, -1.0]]);
        let out = chain_covariance_grad(&f, &g).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chain_grad_rejects_mismatched_shapes() {
        let f = Matrix::zeros(2, 5);
        let g = Matrix::zeros(3, 3);
        assert!(matches!(
            chain_covariance_grad(&f, &g),
            Err(LinalgError::DimMismatch(_))
        ));
    }

    #[test]
    fn composed_covariance_gradient_matches_finite_differences() {
        // d/dF of -log det(Sigma(F) + ridge I), checked end to end.
        let ridge = 1e-6;
        for seed in 0..100u64 {
            let mut rng = derive_rng(seed, &[tag::GRADCHECK, 3, 8]);
            let mut f = Matrix::zeros(3, 8);
            fill_normal(&mut rng, f.data_mut(), 0.5);
            let sigma = covariance(&f).unwrap();
            let g = grad_logdet(&sigma, ridge).unwrap();
            let mut analytic = chain_covariance_grad(&f, &g).unwrap();
            analytic.scale_in_place(-1.0);

            let flat = f.data().to_vec();
            let numeric = central_diff_grad(
                |x| {
                    let m = Matrix::from_vec(3, 8, x.to_vec());
                    -logdet_psd(&covariance(&m).unwrap(), ridge).unwrap()
                },
                &flat,
                1e-5,
            );
            let err = max_rel_err(analytic.data(), &numeric);
            assert!(err <= 1e-4, "seed {seed}: rel err {err}");
        }
    }
}
