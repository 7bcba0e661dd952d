//! Dense linear algebra and probability primitives.
//!
//! Row-major `f64` matrices with the handful of operations the rest of the
//! crate needs: matrix products (backed by `matrixmultiply`), a Cholesky
//! solver for symmetric positive-definite systems, the ridge-regression
//! closed form, numerically stable softmax, KL divergence, spectral norm via
//! power iteration, and the sample Pearson coefficient.
//!
//! All values are immutable after construction and safe to share across
//! threads; every operation is a pure function of its inputs.

use thiserror::Error;

/// Errors reported by linear-algebra and statistic routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch in {0}")]
    DimensionMismatch(&'static str),
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("matrix is not positive definite (pivot {pivot:e} at column {col})")]
    NotPositiveDefinite { col: usize, pivot: f64 },
    #[error("ridge regularization must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("KL support violation: q[{0}] = 0 but p[{0}] > 0")]
    SupportViolation(usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("probability vector does not sum to 1 (sum = {0})")]
    NotNormalized(f64),
    #[error("negative probability entry at index {0}")]
    NegativeProbability(usize),
}

/// Dense row-major matrix of `f64` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major entries, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch("DenseMatrix::new"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for values produced by our own arithmetic.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_raw(r, c, data)
    }

    /// Stacks the selected rows of `self` into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self, LinalgError> {
        if indices.is_empty() || indices.iter().any(|&i| i >= self.rows) {
            return Err(LinalgError::DimensionMismatch("select_rows"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Ok(Self::from_raw(indices.len(), self.cols, data))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> DenseVector {
        DenseVector::from_raw((0..self.rows).map(|i| self.get(i, j)).collect())
    }

    pub fn set_column(&mut self, j: usize, v: &DenseVector) {
        assert_eq!(v.dim(), self.rows);
        for i in 0..self.rows {
            self.set(i, j, v[i]);
        }
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch("add"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch("sub"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    /// `self += other * s`, shapes must already agree.
    pub(crate) fn axpy(&mut self, s: f64, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    fn gemm(&self, ta: bool, other: &Self, tb: bool) -> Self {
        let (m, ka) = if ta { (self.cols, self.rows) } else { (self.rows, self.cols) };
        let (kb, n) = if tb { (other.cols, other.rows) } else { (other.rows, other.cols) };
        assert_eq!(ka, kb, "gemm inner dimension mismatch");
        let mut out = Self::zeros(m, n);
        let (rsa, csa) = if ta { (1, self.cols as isize) } else { (self.cols as isize, 1) };
        let (rsb, csb) = if tb { (1, other.cols as isize) } else { (other.cols as isize, 1) };
        unsafe {
            matrixmultiply::dgemm(
                m,
                ka,
                n,
                1.0,
                self.data.as_ptr(),
                rsa,
                csa,
                other.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch("matmul"));
        }
        Ok(self.gemm(false, other, false))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch("matmul_nt"));
        }
        Ok(self.gemm(false, other, true))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.rows != other.rows {
            return Err(LinalgError::DimensionMismatch("matmul_tn"));
        }
        Ok(self.gemm(true, other, false))
    }

    /// `self · v`.
    pub fn matvec(&self, v: &DenseVector) -> Result<DenseVector, LinalgError> {
        if self.cols != v.dim() {
            return Err(LinalgError::DimensionMismatch("matvec"));
        }
        let out = (0..self.rows).map(|i| dot(self.row(i), v.entries())).collect();
        Ok(DenseVector::from_raw(out))
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &DenseVector) -> Result<DenseVector, LinalgError> {
        if self.rows != v.dim() {
            return Err(LinalgError::DimensionMismatch("matvec_t"));
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        Ok(DenseVector::from_raw(out))
    }

    /// Mean of the columns as a vector of length `rows`.
    pub fn column_mean(&self) -> DenseVector {
        let inv = 1.0 / self.cols as f64;
        let out = (0..self.rows)
            .map(|i| self.row(i).iter().sum::<f64>() * inv)
            .collect();
        DenseVector::from_raw(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense vector of `f64` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.is_empty() {
            return Err(LinalgError::DimensionMismatch("DenseVector::new"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { data })
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_entries(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim(), other.dim());
        Self::from_raw(self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.dim(), other.dim());
        Self::from_raw(self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_raw(self.data.iter().map(|v| v * s).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Probability distribution: non-negative entries summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    data: Vec<f64>,
}

impl ProbabilityVector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.is_empty() {
            return Err(LinalgError::DimensionMismatch("ProbabilityVector::new"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        if let Some(i) = data.iter().position(|&v| v < 0.0) {
            return Err(LinalgError::NegativeProbability(i));
        }
        let sum: f64 = data.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LinalgError::NotNormalized(sum));
        }
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }
}

impl std::ops::Index<usize> for ProbabilityVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Solves `A · X = B` for symmetric positive-definite `A` by Cholesky
/// factorization. `A` must be symmetric within 1e-9 relative tolerance.
pub fn cholesky_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(LinalgError::DimensionMismatch("cholesky_solve"));
    }
    let scale = a.entries().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * (1.0 + scale);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.get(i, j) - a.get(j, i)).abs() > tol {
                return Err(LinalgError::NotSymmetric);
            }
        }
    }

    // Lower-triangular factor, row-major.
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { col: j, pivot: d });
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }

    let m = b.cols();
    let mut x = DenseMatrix::zeros(n, m);
    let mut col = vec![0.0f64; n];
    for c in 0..m {
        // Forward: L z = b.
        for i in 0..n {
            let mut s = b.get(i, c);
            for k in 0..i {
                s -= l[i * n + k] * col[k];
            }
            col[i] = s / l[i * n + i];
        }
        // Backward: Lᵀ x = z.
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * col[k];
            }
            col[i] = s / l[i * n + i];
        }
        for i in 0..n {
            x.set(i, c, col[i]);
        }
    }
    Ok(x)
}

/// Ridge regression closed form: returns the `W` minimizing
/// `‖Y − W·H‖_F² + λ‖W‖_F²` by solving `(H·Hᵀ + λI)·Wᵀ = H·Yᵀ`.
///
/// `H` is d×N and `Y` is m×N (m = d for the hidden-space problem; the
/// logit-space variant uses m = vocabulary size). The result is m×d.
pub fn ridge_solve(h: &DenseMatrix, y: &DenseMatrix, lambda: f64) -> Result<DenseMatrix, LinalgError> {
    if !(lambda > 0.0) {
        return Err(LinalgError::NonPositiveLambda(lambda));
    }
    if h.cols() != y.cols() {
        return Err(LinalgError::DimensionMismatch("ridge_solve"));
    }
    let d = h.rows();
    let mut gram = h.matmul_nt(h)?;
    // Symmetrize away float round-off from the GEMM, then add the ridge.
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (gram.get(i, j) + gram.get(j, i));
            gram.set(i, j, v);
            gram.set(j, i, v);
        }
        gram.set(i, i, gram.get(i, i) + lambda);
    }
    let rhs = h.matmul_nt(y)?; // d×m
    let x = cholesky_solve(&gram, &rhs)?;
    Ok(x.transpose())
}

/// Max-subtracted softmax.
pub fn softmax(z: &DenseVector) -> ProbabilityVector {
    softmax_slice(z.entries())
}

pub(crate) fn softmax_slice(z: &[f64]) -> ProbabilityVector {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    ProbabilityVector { data: out }
}

/// `D_KL(P ‖ Q)` in nats. Terms with `p_i = 0` contribute zero; `q_i = 0`
/// with `p_i > 0` is a support violation.
pub fn kl_divergence(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64, LinalgError> {
    if p.dim() != q.dim() {
        return Err(LinalgError::DimensionMismatch("kl_divergence"));
    }
    let mut sum = 0.0;
    for i in 0..p.dim() {
        let pi = p[i];
        if pi > 0.0 {
            let qi = q[i];
            if qi <= 0.0 {
                return Err(LinalgError::SupportViolation(i));
            }
            sum += pi * (pi / qi).ln();
        }
    }
    // Round-off can leave a tiny negative residue when P ≈ Q.
    Ok(sum.max(0.0))
}

/// Largest singular value by power iteration on `MᵀM`, seeded with the
/// normalized all-ones vector, relative tolerance 1e-6, at most 1000 rounds.
pub fn spectral_norm(m: &DenseMatrix) -> f64 {
    let n = m.cols();
    let mut v = DenseVector::from_raw(vec![1.0 / (n as f64).sqrt(); n]);
    let mut sigma = 0.0f64;
    for _ in 0..1000 {
        let w = m.matvec(&v).expect("shape fixed");
        let new_sigma = w.norm();
        if new_sigma == 0.0 {
            return 0.0;
        }
        let u = m.matvec_t(&w).expect("shape fixed");
        let un = u.norm();
        if un == 0.0 {
            return new_sigma;
        }
        v = u.scale(1.0 / un);
        let converged = (new_sigma - sigma).abs() <= 1e-6 * new_sigma;
        sigma = new_sigma;
        if converged {
            break;
        }
    }
    // ‖M·v‖ / ‖v‖ for the final unit iterate v.
    m.matvec(&v).expect("shape fixed").norm()
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, LinalgError> {
    if xs.len() != ys.len() {
        return Err(LinalgError::DimensionMismatch("pearson"));
    }
    if xs.len() < 3 {
        return Err(LinalgError::DegenerateInput("fewer than 3 samples"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(LinalgError::DegenerateInput("constant sequence"));
    }
    Ok((cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha20Rng) -> DenseMatrix {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseMatrix::from_raw(r, c, data)
    }

    fn random_spd(n: usize, rng: &mut ChaCha20Rng) -> DenseMatrix {
        let m = random_matrix(n, n, rng);
        let mut a = m.matmul_nt(&m).unwrap();
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 1.0);
        }
        // Exact symmetry for the test fixture.
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (a.get(i, j) + a.get(j, i));
                a.set(i, j, v);
                a.set(j, i, v);
            }
        }
        a
    }

    #[test]
    fn cholesky_identity_returns_rhs() {
        let a = DenseMatrix::identity(3);
        let b = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let x = cholesky_solve(&a, &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn cholesky_scalar_matrix() {
        let a = DenseMatrix::identity(2).scale(2.0);
        let b = DenseMatrix::identity(2);
        let x = cholesky_solve(&a, &b).unwrap();
        let expect = DenseMatrix::identity(2).scale(0.5);
        assert!(x.sub(&expect).unwrap().frobenius_norm() < 1e-15);
    }

    #[test]
    fn cholesky_random_spd_residual() {
        let mut r = rng(7);
        for _ in 0..20 {
            let a = random_spd(6, &mut r);
            let b = random_matrix(6, 4, &mut r);
            let x = cholesky_solve(&a, &b).unwrap();
            let resid = a.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm();
            assert!(resid <= 1e-8 * (1.0 + b.frobenius_norm()), "residual {resid}");
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        match cholesky_solve(&a, &DenseMatrix::identity(2)) {
            Err(LinalgError::NotPositiveDefinite { .. }) => {}
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let a = DenseMatrix::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]);
        assert_eq!(
            cholesky_solve(&a, &DenseMatrix::identity(2)),
            Err(LinalgError::NotSymmetric)
        );
    }

    #[test]
    fn cholesky_rejects_shape_mismatch() {
        let a = DenseMatrix::identity(3);
        let b = DenseMatrix::identity(2);
        assert_eq!(
            cholesky_solve(&a, &b),
            Err(LinalgError::DimensionMismatch("cholesky_solve"))
        );
    }

    #[test]
    fn ridge_zero_target_gives_zero_map() {
        let mut r = rng(11);
        let h = random_matrix(4, 6, &mut r);
        let y = DenseMatrix::zeros(4, 6);
        let w = ridge_solve(&h, &y, 2.5).unwrap();
        assert!(w.frobenius_norm() < 1e-12);
    }

    #[test]
    fn ridge_hand_case_identity_h() {
        // H = I₂, Y = diag(2, 4), λ = 1 → (HHᵀ + I) = 2I, HYᵀ = diag(2, 4),
        // so W = diag(1, 2).
        let h = DenseMatrix::identity(2);
        let y = DenseMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 4.0]]);
        let w = ridge_solve(&h, &y, 1.0).unwrap();
        let expect = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        assert!(w.sub(&expect).unwrap().frobenius_norm() < 1e-14);
    }

    /// Gradient-descent oracle for the ridge objective, independent of the
    /// Cholesky path.
    fn ridge_descent_oracle(h: &DenseMatrix, y: &DenseMatrix, lambda: f64) -> DenseMatrix {
        let d = y.rows();
        let mut w = DenseMatrix::zeros(d, h.rows());
        let lr = 5e-3;
        for _ in 0..200_000 {
            // ∇ = 2(WH − Y)Hᵀ + 2λW
            let wh = w.matmul(h).unwrap();
            let diff = wh.sub(y).unwrap();
            let mut grad = diff.matmul_nt(h).unwrap();
            grad.axpy(lambda, &w);
            w.axpy(-lr, &grad);
        }
        w
    }

    #[test]
    fn ridge_matches_descent_oracle() {
        let mut r = rng(13);
        let h = random_matrix(4, 8, &mut r);
        let y = random_matrix(4, 8, &mut r);
        let w = ridge_solve(&h, &y, 1.5).unwrap();
        let oracle = ridge_descent_oracle(&h, &y, 1.5);
        let diff = w.sub(&oracle).unwrap().frobenius_norm();
        assert!(diff < 1e-4, "‖ΔW‖_F = {diff}");
    }

    #[test]
    fn ridge_residual_property() {
        let mut r = rng(17);
        for _ in 0..100 {
            let d = r.gen_range(2..=16);
            let n = r.gen_range(1..=32);
            let h = random_matrix(d, n, &mut r);
            let y = random_matrix(d, n, &mut r);
            let lambda = r.gen_range(0.1..10.0);
            let w = ridge_solve(&h, &y, lambda).unwrap();
            let mut gram = h.matmul_nt(&h).unwrap();
            for i in 0..d {
                gram.set(i, i, gram.get(i, i) + lambda);
            }
            let lhs = gram.matmul_nt(&w).unwrap();
            let rhs = h.matmul_nt(&y).unwrap();
            let resid = lhs.sub(&rhs).unwrap().frobenius_norm();
            assert!(resid <= 1e-7 * (1.0 + rhs.frobenius_norm()), "residual {resid}");
        }
    }

    #[test]
    fn ridge_first_order_optimality() {
        let mut r = rng(19);
        let h = random_matrix(4, 8, &mut r);
        let y = random_matrix(4, 8, &mut r);
        let lambda = 1.5;
        let w = ridge_solve(&h, &y, lambda).unwrap();
        let objective = |w: &DenseMatrix| {
            let diff = y.sub(&w.matmul(&h).unwrap()).unwrap();
            let fro = diff.frobenius_norm();
            let reg = w.frobenius_norm();
            fro * fro + lambda * reg * reg
        };
        let base = objective(&w);
        for _ in 0..100 {
            let delta = random_matrix(4, 4, &mut r);
            let mut perturbed = w.clone();
            perturbed.axpy(1e-3, &delta);
            assert!(objective(&perturbed) > base, "perturbation must not improve");
        }
    }

    #[test]
    fn ridge_rejects_bad_lambda() {
        let h = DenseMatrix::identity(2);
        assert!(matches!(
            ridge_solve(&h, &h, 0.0),
            Err(LinalgError::NonPositiveLambda(_))
        ));
        assert!(matches!(
            ridge_solve(&h, &h, -1.0),
            Err(LinalgError::NonPositiveLambda(_))
        ));
    }

    #[test]
    fn ridge_shrinks_to_zero_for_huge_lambda() {
        let mut r = rng(23);
        let h = random_matrix(4, 8, &mut r);
        let y = random_matrix(4, 8, &mut r);
        let w = ridge_solve(&h, &y, 1e12).unwrap();
        assert!(w.frobenius_norm() < 1e-6);
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let p = softmax(&DenseVector::new(vec![0.0, 0.0]).unwrap());
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);

        let p = softmax(&DenseVector::new(vec![3.7; 4]).unwrap());
        for i in 0..4 {
            assert!((p[i] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_known_ratios() {
        let z = DenseVector::new(vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]).unwrap();
        let p = softmax(&z);
        assert!((p[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((p[2] - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_randomized() {
        let mut r = rng(29);
        for _ in 0..200 {
            let dim = r.gen_range(2..10);
            let z: Vec<f64> = (0..dim).map(|_| r.gen_range(-30.0..30.0)).collect();
            let c = r.gen_range(-100.0..100.0);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let a = softmax(&DenseVector::new(z).unwrap());
            let b = softmax(&DenseVector::new(shifted).unwrap());
            for i in 0..dim {
                assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }
    }

    fn prob(data: Vec<f64>) -> ProbabilityVector {
        ProbabilityVector::new(data).unwrap()
    }

    #[test]
    fn kl_identity_is_zero() {
        let p = prob(vec![0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_known_values() {
        // Direct summation: 0.5·ln(0.5/0.9) + 0.5·ln(0.5/0.1).
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((expect - 0.5108256237659907).abs() < 1e-12);
        let d = kl_divergence(&prob(vec![0.5, 0.5]), &prob(vec![0.9, 0.1])).unwrap();
        assert!((d - expect).abs() < 1e-12);

        let d = kl_divergence(&prob(vec![1.0, 0.0]), &prob(vec![0.5, 0.5])).unwrap();
        assert!((d - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_support_violation() {
        let p = prob(vec![0.5, 0.5]);
        let q = prob(vec![1.0, 0.0]);
        assert_eq!(kl_divergence(&p, &q), Err(LinalgError::SupportViolation(1)));
    }

    #[test]
    fn kl_nonnegative_randomized() {
        let mut r = rng(31);
        for _ in 0..1000 {
            let dim = r.gen_range(2..8);
            let draw = |r: &mut ChaCha20Rng| {
                let mut v: Vec<f64> = (0..dim).map(|_| r.gen_range(0.01..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                // Renormalized draws can miss the 1e-9 window only by
                // round-off; rebuild through softmax-free constructor.
                ProbabilityVector::new(v).unwrap()
            };
            let p = draw(&mut r);
            let q = draw(&mut r);
            assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            assert!(kl_divergence(&p, &p.clone()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn spectral_norm_identity_and_diagonal() {
        assert!((spectral_norm(&DenseMatrix::identity(5)) - 1.0).abs() < 1e-9);
        let d = DenseMatrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        assert!((spectral_norm(&d) - 3.0).abs() < 1e-9);
        assert_eq!(spectral_norm(&DenseMatrix::zeros(3, 4)), 0.0);
    }

    /// Jacobi eigenvalue oracle for small symmetric matrices.
    fn jacobi_max_eigenvalue(a: &DenseMatrix) -> f64 {
        let n = a.rows();
        let mut m = a.clone();
        for _ in 0..500 {
            let mut p = 0;
            let mut q = 1;
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    if m.get(i, j).abs() > off {
                        off = m.get(i, j).abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if off < 1e-13 {
                break;
            }
            let theta = 0.5 * (m.get(q, q) - m.get(p, p)) / m.get(p, q);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = DenseMatrix::identity(n);
            rot.set(p, p, c);
            rot.set(q, q, c);
            rot.set(p, q, s);
            rot.set(q, p, -s);
            m = rot.matmul_tn(&m.matmul(&rot).unwrap()).unwrap();
        }
        (0..n).map(|i| m.get(i, i)).fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn spectral_norm_matches_eigen_oracle() {
        let mut r = rng(37);
        for _ in 0..20 {
            let m = random_matrix(5, 3, &mut r);
            let gram = m.matmul_tn(&m).unwrap();
            let expect = jacobi_max_eigenvalue(&gram).max(0.0).sqrt();
            let got = spectral_norm(&m);
            assert!((got - expect).abs() < 1e-5, "got {got}, expect {expect}");
        }
    }

    #[test]
    fn spectral_norm_dominates_rayleigh_quotients() {
        let mut r = rng(41);
        let m = random_matrix(6, 6, &mut r);
        let sigma = spectral_norm(&m) + 1e-9;
        for _ in 0..100 {
            let u = DenseVector::new((0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
            if u.norm() == 0.0 {
                continue;
            }
            let q = m.matvec(&u).unwrap().norm() / u.norm();
            assert!(sigma >= q, "σ = {sigma} < ‖Mu‖/‖u‖ = {q}");
        }
    }

    #[test]
    fn pearson_perfect_correlations() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.to_vec();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x + 7.0).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_known_value() {
        // Direct formula: cov = 1.375, σx² = 1.25, σy² = 2.1875.
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 3.0, 2.0, 5.0];
        let expect = 1.375 / (1.25f64.sqrt() * 2.1875f64.sqrt());
        let got = pearson(&xs, &ys).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.8315).abs() < 1e-3);
    }

    #[test]
    fn pearson_degenerate_inputs() {
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0, 2.0]),
            Err(LinalgError::DegenerateInput(_))
        ));
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(LinalgError::DegenerateInput(_))
        ));
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.5]).is_ok());
        assert!(matches!(
            ProbabilityVector::new(vec![0.5, 0.4]),
            Err(LinalgError::NotNormalized(_))
        ));
        assert!(matches!(
            ProbabilityVector::new(vec![1.5, -0.5]),
            Err(LinalgError::NegativeProbability(_))
        ));
    }
}
