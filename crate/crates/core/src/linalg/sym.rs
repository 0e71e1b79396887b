//! Symmetric matrices, cyclic Jacobi eigendecomposition and spectral functions.

use std::sync::OnceLock;

use crate::error::{Error, Result};

use super::matrix::Matrix;

/// Largest dimension accepted by [`sym_eig`].
pub const MAX_EIG_DIM: usize = 4096;
/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;
/// Eigenvalue gap below which divided differences fall back to the derivative.
pub const DEGENERATE_GAP: f64 = 1e-9;

/// Dense symmetric matrix. Storage is exactly symmetric.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    inner: Matrix,
    eig: OnceLock<EigPair>,
}

impl PartialEq for SymMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

impl SymMatrix {
    /// Symmetrizes `m` as `(m + m^T) / 2`.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::InvalidShape(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if m.rows() == 0 {
            return Err(Error::InvalidShape("symmetric matrix must have n >= 1".into()));
        }
        Ok(Self::wrap(m.sym_part()))
    }

    /// Wraps a matrix that is already exactly symmetric. Debug builds verify it.
    pub(crate) fn wrap(m: Matrix) -> Self {
        debug_assert!(m.rows() == m.cols() && m.rows() >= 1);
        debug_assert!((0..m.rows()).all(|i| (0..i).all(|j| m[(i, j)] == m[(j, i)])));
        Self {
            inner: m,
            eig: OnceLock::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::wrap(Matrix::identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        Self::wrap(Matrix::zeros(n, n))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self::wrap(Matrix::from_diag(diag))
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.inner.rows()
    }

    #[inline]
    pub fn as_matrix(&self) -> &Matrix {
        &self.inner
    }

    pub fn into_matrix(self) -> Matrix {
        self.inner
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    pub fn is_finite(&self) -> bool {
        self.inner.is_finite()
    }

    /// Cached eigendecomposition.
    pub fn eig(&self) -> Result<&EigPair> {
        if let Some(e) = self.eig.get() {
            return Ok(e);
        }
        let e = sym_eig(self)?;
        Ok(self.eig.get_or_init(|| e))
    }

    /// Seeds the cache with a decomposition known to be exact for this matrix.
    pub(crate) fn with_eig(self, eig: EigPair) -> Self {
        let _ = self.eig.set(eig);
        self
    }

    pub fn add_diagonal(&self, lambda: f64) -> SymMatrix {
        let mut m = self.inner.clone();
        for i in 0..self.n() {
            m[(i, i)] += lambda;
        }
        SymMatrix::wrap(m)
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix::wrap(self.inner.scale(c))
    }

    /// `A * S * A^T`, symmetrized.
    pub fn congruence(&self, a: &Matrix) -> SymMatrix {
        let m = a.matmul(&self.inner).matmul_nt(a);
        SymMatrix::wrap(m.sym_part())
    }
}

/// Eigenpairs of a symmetric matrix: eigenvalues ascending, eigenvectors in
/// the columns of `u`, each column signed so its largest-magnitude entry is
/// positive (lowest row index on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct EigPair {
    pub u: Matrix,
    pub sigma: Vec<f64>,
}

impl EigPair {
    pub fn n(&self) -> usize {
        self.sigma.len()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.sigma[0]
    }

    /// `U diag(f(sigma)) U^T`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.n();
        let fs: Vec<f64> = self.sigma.iter().map(|&s| f(s)).collect();
        let mut ud = self.u.clone();
        for i in 0..n {
            for (j, fj) in fs.iter().enumerate() {
                ud[(i, j)] *= fj;
            }
        }
        SymMatrix::wrap(ud.matmul_nt(&self.u).sym_part())
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.apply(|s| s)
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(s: &SymMatrix) -> Result<EigPair> {
    let n = s.n();
    if n > MAX_EIG_DIM {
        return Err(Error::invalid(format!("eigendecomposition limited to n <= {MAX_EIG_DIM}, got {n}")));
    }
    if !s.is_finite() {
        return Err(Error::invalid("non-finite entries in symmetric matrix"));
    }
    let (sigma, vt) = jacobi(s.as_matrix().data(), n)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[a].total_cmp(&sigma[b]));

    let mut u = Matrix::zeros(n, n);
    let mut sorted = Vec::with_capacity(n);
    for (col, &k) in order.iter().enumerate() {
        let v = &vt[k * n..(k + 1) * n];
        let mut pivot = 0;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, x) in v.iter().enumerate() {
            u[(i, col)] = sign * x;
        }
        sorted.push(sigma[k]);
    }
    Ok(EigPair { u, sigma: sorted })
}

/// Returns (eigenvalues, eigenvectors as rows), unsorted.
fn jacobi(a_in: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = a_in.to_vec();
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }
    let mut d: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    if n == 1 {
        return Ok((d, vt));
    }
    let mut b = d.clone();
    let mut z = vec![0.0; n];

    #[inline(always)]
    fn rot(a: &mut [f64], x: usize, y: usize, s: f64, tau: f64) {
        let g = a[x];
        let h = a[y];
        a[x] = g - s * (h + g * tau);
        a[y] = h + s * (g - h * tau);
    }

    let mut off = 0.0;
    for sweep in 0..MAX_SWEEPS {
        off = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                off += a[p * n + q].abs();
            }
        }
        if off == 0.0 {
            return Ok((d, vt));
        }
        let thresh = if sweep < 3 { 0.2 * off / (n * n) as f64 } else { 0.0 };

        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                let g = 100.0 * apq.abs();
                if sweep > 3 && d[p].abs() + g == d[p].abs() && d[q].abs() + g == d[q].abs() {
                    a[p * n + q] = 0.0;
                    continue;
                }
                if apq.abs() <= thresh {
                    continue;
                }
                let h = d[q] - d[p];
                let t = if h.abs() + g == h.abs() {
                    apq / h
                } else {
                    let theta = 0.5 * h / apq;
                    let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                let h = t * apq;
                z[p] -= h;
                z[q] += h;
                d[p] -= h;
                d[q] += h;
                a[p * n + q] = 0.0;
                for j in 0..p {
                    rot(&mut a, j * n + p, j * n + q, s, tau);
                }
                for j in p + 1..q {
                    rot(&mut a, p * n + j, j * n + q, s, tau);
                }
                for j in q + 1..n {
                    rot(&mut a, p * n + j, q * n + j, s, tau);
                }
                for j in 0..n {
                    rot(&mut vt, p * n + j, q * n + j, s, tau);
                }
            }
        }
        for i in 0..n {
            b[i] += z[i];
            d[i] = b[i];
            z[i] = 0.0;
        }
    }
    Err(Error::ConvergenceFailure {
        sweeps: MAX_SWEEPS,
        off_norm: off,
    })
}

/// Matrix logarithm of an SPD matrix.
pub fn mat_log_spd(s: &SymMatrix) -> Result<SymMatrix> {
    let eig = s.eig()?;
    log_from_eig(eig)
}

pub(crate) fn log_from_eig(eig: &EigPair) -> Result<SymMatrix> {
    let min = eig.min_eigenvalue();
    if min <= 0.0 {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
    }
    Ok(eig.apply(f64::ln))
}

/// Matrix exponential of a symmetric matrix.
pub fn mat_exp_sym(s: &SymMatrix) -> Result<SymMatrix> {
    let eig = s.eig()?;
    let out = eig.apply(f64::exp);
    if !out.is_finite() {
        return Err(Error::invalid("matrix exponential overflowed"));
    }
    Ok(out)
}

/// Gradient of a scalar loss through `S -> U f(Sigma) U^T`.
///
/// `d_out` is the gradient with respect to the output; the result is the
/// gradient with respect to `S`, `U (K o (U^T d_out U)) U^T` where `K` holds
/// divided differences of `f` off the diagonal and `f'` on it (and wherever
/// two eigenvalues are closer than [`DEGENERATE_GAP`]).
pub fn eig_fn_backward(
    eig: &EigPair,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
    d_out: &SymMatrix,
) -> Result<SymMatrix> {
    let n = eig.n();
    if d_out.n() != n {
        return Err(Error::DimMismatch {
            context: "eig_fn_backward",
            expected: n,
            got: d_out.n(),
        });
    }
    if !d_out.is_finite() {
        return Err(Error::invalid("non-finite upstream gradient"));
    }
    let sigma = &eig.sigma;
    let fs: Vec<f64> = sigma.iter().map(|&s| f(s)).collect();
    let dfs: Vec<f64> = sigma.iter().map(|&s| df(s)).collect();

    let u = &eig.u;
    let mut inner = u.matmul_tn(d_out.as_matrix()).matmul(u);
    for i in 0..n {
        for j in 0..n {
            let k = if i == j || (sigma[i] - sigma[j]).abs() < DEGENERATE_GAP {
                dfs[i]
            } else {
                (fs[i] - fs[j]) / (sigma[i] - sigma[j])
            };
            inner[(i, j)] *= k;
        }
    }
    let ds = u.matmul(&inner).matmul_nt(u);
    Ok(SymMatrix::wrap(ds.sym_part()))
}

/// `max(eps, x)` and its right-continuous subgradient.
pub fn clamp_fn(eps: f64) -> (impl Fn(f64) -> f64, impl Fn(f64) -> f64) {
    (move |x: f64| x.max(eps), move |x: f64| if x >= eps { 1.0 } else { 0.0 })
}
