//! Dense kernels: Cholesky, symmetric eigendecomposition, power iteration,
//! inverse p-th roots and synthetic SPD generation.
//!
//! Everything runs in `f64`; quantization is the only source of precision loss.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::math;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

/// Symmetry tolerance used when validating [`SpdMatrix`] inputs.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A symmetric positive definite matrix.
///
/// Only symmetry is checked on construction; definiteness is checked lazily
/// by the algorithms that need it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    pub fn new(m: Matrix) -> Result<Self, LinalgError> {
        if !m.is_square() {
            return Err(LinalgError::NotSquare { rows: m.rows(), cols: m.cols() });
        }
        if !m.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let scale = m.max_abs().max(1.0);
        let asym = m.sub(&m.transpose()).max_abs();
        if asym > SYMMETRY_TOL * scale {
            return Err(LinalgError::NotSymmetric(asym));
        }
        Ok(Self(m))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn order(&self) -> usize {
        self.0.rows()
    }
}

impl AsRef<Matrix> for SpdMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

/// A square matrix whose strict upper triangle is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular(Matrix);

impl LowerTriangular {
    pub fn new(m: Matrix) -> Result<Self, LinalgError> {
        if !m.is_square() {
            return Err(LinalgError::NotSquare { rows: m.rows(), cols: m.cols() });
        }
        for i in 0..m.rows() {
            for j in i + 1..m.cols() {
                if m[(i, j)] != 0.0 {
                    return Err(LinalgError::InvalidArgument("strict upper triangle is not zero"));
                }
            }
        }
        Ok(Self(m))
    }

    /// Keeps the lower triangle (diagonal included) of `m`.
    pub fn from_lower_part(m: &Matrix) -> Self {
        Self(Matrix::from_fn(m.rows(), m.cols(), |i, j| if i >= j { m[(i, j)] } else { 0.0 }))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        Self(Matrix::from_diag(&vec![s; n]))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn order(&self) -> usize {
        self.0.rows()
    }

    /// `C Cᵀ`
    pub fn gram(&self) -> Matrix {
        self.0.gram()
    }
}

impl AsRef<Matrix> for LowerTriangular {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

fn ensure_square(a: &Matrix) -> Result<(), LinalgError> {
    if a.is_square() {
        Ok(())
    } else {
        Err(LinalgError::NotSquare { rows: a.rows(), cols: a.cols() })
    }
}

/// Cholesky factor of `a + eps·I` (only the lower triangle of `a` is read).
pub fn cholesky(a: &Matrix, eps: f64) -> Result<LowerTriangular, LinalgError> {
    ensure_square(a)?;
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = a.rows();
    let mut c = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + eps;
        for k in 0..j {
            d -= c[(j, k)] * c[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = math::sqrt(d);
        c[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= c[(i, k)] * c[(j, k)];
            }
            c[(i, j)] = s / djj;
        }
    }
    Ok(LowerTriangular(c))
}

/// Number of times [`cholesky_with_retry`] multiplies the shift by 10.
pub const CHOLESKY_RETRIES: usize = 3;

/// [`cholesky`] with up to three retries at `10×`, `100×`, `1000×` the shift.
///
/// Before the first retry the shift is raised to at least `n·u·max|a|`, the
/// roundoff level of the factorization.
///
/// Returns the factor and the shift that succeeded.
pub fn cholesky_with_retry(a: &Matrix, eps: f64) -> Result<(LowerTriangular, f64), LinalgError> {
    let mut shift = eps;
    let mut last = None;
    for attempt in 0..=CHOLESKY_RETRIES {
        match cholesky(a, shift) {
            Ok(c) => return Ok((c, shift)),
            Err(e @ LinalgError::NotPositiveDefinite { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
        if attempt == 0 {
            let floor = a.rows() as f64 * f64::EPSILON * a.max_abs().max(f64::MIN_POSITIVE);
            shift = shift.max(floor);
        }
        shift *= 10.0;
    }
    Err(last.expect("at least one attempt"))
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, matching `values`.
    pub vectors: Matrix,
}

impl SymEigen {
    /// `U f(Λ) Uᵀ`
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let fv: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let u = &self.vectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..n {
                    s += u[(i, k)] * fv[k] * u[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(f64::NAN)
    }

    pub fn max(&self) -> f64 {
        self.values.last().copied().unwrap_or(f64::NAN)
    }
}

/// Cyclic Jacobi eigen-decomposition of the symmetric part of `a`.
pub fn eigh(a: &Matrix) -> Result<SymEigen, LinalgError> {
    ensure_square(a)?;
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = a.rows();
    let mut m = a.symmetrize();
    let mut v = Matrix::identity(n);
    let total = m.frobenius();
    if total == 0.0 {
        return Ok(SymEigen { values: vec![0.0; n], vectors: v });
    }
    let target = total * 1e-16;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..i {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if math::sqrt(2.0 * off) <= target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (math::abs(theta) + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[(x, x)].total_cmp(&m[(y, y)]));
    let values = order.iter().map(|&k| m[(k, k)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok(SymEigen { values, vectors })
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Starts from the normalised all-ones vector and returns the Rayleigh
/// quotient, which never exceeds the true largest eigenvalue.
pub fn max_singular_value(a: &Matrix, iters: usize, tol: f64) -> f64 {
    let n = a.rows();
    if n == 0 || a.max_abs() == 0.0 {
        return 0.0;
    }
    let mut v = vec![1.0 / math::sqrt(n as f64); n];
    let mut w = vec![0.0; n];
    let mut lambda = 0.0;
    for it in 0..iters.max(1) {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = a.row(i).iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let rq: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
        let norm = math::sqrt(w.iter().map(|x| x * x).sum());
        if norm == 0.0 {
            return 0.0;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        let converged = it > 0 && math::abs(rq - lambda) <= tol * math::abs(rq);
        lambda = rq;
        if converged {
            break;
        }
    }
    lambda
}

/// Iteration cap for the coupled Newton root iteration.
pub const SCHUR_NEWTON_MAX_ITERS: usize = 100;
/// Convergence threshold on `‖M - I‖_F / √n` inside the iteration.
pub const SCHUR_NEWTON_TOL: f64 = 1e-12;
/// Acceptance threshold on `‖X^p A - I‖_F / √n`.
pub const ROOT_RESIDUAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootMethod {
    SchurNewton { iterations: usize },
    Eigen,
}

#[derive(Debug, Clone)]
pub struct InverseRoot {
    pub matrix: Matrix,
    pub method: RootMethod,
    /// `‖X^p A_reg - I‖_F / √n` of the returned matrix.
    pub residual: f64,
    /// The regularised input had eigenvalues `≤ 0`, which were clamped to zero
    /// before the shift was added (eigen route only).
    pub clamped: bool,
}

fn root_residual(x: &Matrix, a: &Matrix, p: u32) -> f64 {
    let mut xp = x.clone();
    for _ in 1..p {
        xp = xp.matmul(x);
    }
    let n = a.rows().max(1);
    xp.matmul(a).sub(&Matrix::identity(a.rows())).frobenius() / math::sqrt(n as f64)
}

fn mat_pow(m: &Matrix, p: u32) -> Matrix {
    match p {
        1 => m.clone(),
        2 => m.matmul(m),
        4 => {
            let sq = m.matmul(m);
            sq.matmul(&sq)
        }
        _ => {
            let mut out = m.clone();
            for _ in 1..p {
                out = out.matmul(m);
            }
            out
        }
    }
}

/// Coupled Newton iteration for `a^(-1/p)` scaled by `lam_max`.
///
/// Returns `None` when the iteration fails to converge within the cap.
pub fn schur_newton_inv_root(a: &Matrix, p: u32, lam_max: f64) -> Option<(Matrix, usize)> {
    let n = a.rows();
    if lam_max <= 0.0 || !lam_max.is_finite() {
        return None;
    }
    let pf = p as f64;
    let id = Matrix::identity(n);
    let z = (1.0 + pf) / (2.0 * lam_max);
    let mut x = id.scale(math::powf(z, 1.0 / pf));
    let mut m = a.scale(z);
    let sqrt_n = math::sqrt(n as f64);
    for it in 1..=SCHUR_NEWTON_MAX_ITERS {
        let t = id.scale(pf + 1.0).sub(&m).scale(1.0 / pf);
        x = x.matmul(&t);
        m = mat_pow(&t, p).matmul(&m).symmetrize();
        let res = m.sub(&id).frobenius() / sqrt_n;
        if !res.is_finite() || res > 1e8 {
            return None;
        }
        if res <= SCHUR_NEWTON_TOL {
            return Some((x.symmetrize(), it));
        }
    }
    None
}

/// `U diag((max(λ, 0) + shift)^(-1/p)) Uᵀ` of the symmetric matrix `a`.
pub fn eigen_inv_root(a: &Matrix, p: u32, shift: f64) -> Result<(Matrix, bool), LinalgError> {
    let eig = eigh(a)?;
    let clamped = eig.values.iter().any(|&l| l + shift <= 0.0);
    let e = -1.0 / p as f64;
    let m = eig.apply(|l| {
        let v = if l + shift > 0.0 { l + shift } else { l.max(0.0) + shift };
        math::powf(v, e)
    });
    Ok((m, clamped))
}

/// `(a + lam_max·eps·I)^(-1/4)`.
///
/// Tries the coupled Newton iteration first and falls back to the
/// eigen-decomposition route when it does not converge or misses the
/// residual contract.
pub fn inv_quarter_root(a: &Matrix, lam_max: f64, eps: f64) -> Result<InverseRoot, LinalgError> {
    inv_pth_root(a, 4, lam_max, eps)
}

pub fn inv_pth_root(a: &Matrix, p: u32, lam_max: f64, eps: f64) -> Result<InverseRoot, LinalgError> {
    ensure_square(a)?;
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    if p == 0 {
        return Err(LinalgError::InvalidArgument("root order must be positive"));
    }
    let shift = lam_max.max(0.0) * eps;
    let reg = a.symmetrize().add_diag(shift);
    // largest eigenvalue of the shifted matrix, for scaling the iteration
    let scale = lam_max.max(0.0) + shift;
    if let Some((x, iterations)) = schur_newton_inv_root(&reg, p, scale) {
        let residual = root_residual(&x, &reg, p);
        if residual <= ROOT_RESIDUAL_TOL {
            return Ok(InverseRoot {
                matrix: x,
                method: RootMethod::SchurNewton { iterations },
                residual,
                clamped: false,
            });
        }
    }
    let (x, clamped) = eigen_inv_root(&a.symmetrize(), p, shift)?;
    let residual = root_residual(&x, &reg, p);
    Ok(InverseRoot { matrix: x, method: RootMethod::Eigen, residual, clamped })
}

/// `l · g · r`.
pub fn precondition(l: &Matrix, g: &Matrix, r: &Matrix) -> Result<Matrix, LinalgError> {
    if l.rows() != l.cols() || r.rows() != r.cols() {
        return Err(LinalgError::ShapeMismatch("preconditioners must be square"));
    }
    if l.cols() != g.rows() || g.cols() != r.rows() {
        return Err(LinalgError::ShapeMismatch("preconditioner and gradient shapes differ"));
    }
    Ok(l.matmul(g).matmul(r))
}

/// Seeded `rows × cols` standard Gaussian matrix.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Orthogonal factor of a Householder QR, with signs fixed so `R` has a
/// non-negative diagonal.
pub fn qr_orthogonal(a: &Matrix) -> Matrix {
    let (m, n) = a.shape();
    let mut r = a.clone();
    let mut q = Matrix::identity(m);
    let mut signs = vec![1.0; m];
    for k in 0..n.min(m) {
        let norm = math::sqrt((k..m).map(|i| r[(i, k)] * r[(i, k)]).sum());
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[(k, k)] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in 0..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * r[(i, j)]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                r[(i, j)] -= f * v[i - k];
            }
        }
        // q <- q H
        for i in 0..m {
            let dot: f64 = (k..m).map(|l| q[(i, l)] * v[l - k]).sum();
            let f = 2.0 * dot / vnorm2;
            for l in k..m {
                q[(i, l)] -= f * v[l - k];
            }
        }
        signs[k] = if r[(k, k)] < 0.0 { -1.0 } else { 1.0 };
    }
    Matrix::from_fn(m, m, |i, j| q[(i, j)] * signs[j])
}

/// Geometric sequence of `n` values from `lo` to `hi`.
pub fn geometric_spectrum(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let ratio = math::ln(hi / lo);
    (0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                lo * math::exp(ratio * i as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

/// `U Λ Uᵀ` with `U` Haar-orthogonal from a seeded Gaussian and `Λ` geometric
/// between `lam_lo` and `lam_hi`.
pub fn synth_spd(n: usize, lam_lo: f64, lam_hi: f64, seed: u64) -> Result<SpdMatrix, LinalgError> {
    if n < 2 {
        return Err(LinalgError::InvalidArgument("order must be at least 2"));
    }
    if !(lam_lo > 0.0 && lam_lo <= lam_hi) {
        return Err(LinalgError::InvalidArgument("need 0 < lam_lo <= lam_hi"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = qr_orthogonal(&gaussian_matrix(n, n, &mut rng));
    let lam = geometric_spectrum(n, lam_lo, lam_hi);
    let eig = SymEigen { values: lam, vectors: u };
    SpdMatrix::new(eig.apply(|l| l))
}
