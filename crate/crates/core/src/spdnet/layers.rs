//! BiMap, ReEig and LogEig layers with their backward passes, plus the
//! half-vectorization bridge to Euclidean layers.
//!
//! Matrix gradients follow one convention throughout: `dS` is the symmetric
//! part of the gradient taken with respect to independent entries of `S`.

use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};
use crate::linalg::{clamp_fn, eig_fn_backward, log_from_eig, EigPair, Matrix, SymMatrix};
use crate::optim::StiefelParam;

fn check_bimap(s: &SymMatrix, w: &StiefelParam) -> Result<()> {
    if w.in_dim() != s.n() {
        return Err(Error::DimMismatch {
            context: "bimap input",
            expected: w.in_dim(),
            got: s.n(),
        });
    }
    Ok(())
}

/// `W S W^T`.
pub fn bimap_forward(s: &SymMatrix, w: &StiefelParam) -> Result<SymMatrix> {
    check_bimap(s, w)?;
    Ok(s.congruence(w.matrix()))
}

/// Returns `(dS, dW)` with `dS = W^T dOut W` and `dW = 2 dOut W S`.
pub fn bimap_backward(s: &SymMatrix, w: &StiefelParam, d_out: &SymMatrix) -> Result<(SymMatrix, Matrix)> {
    check_bimap(s, w)?;
    if d_out.n() != w.out_dim() {
        return Err(Error::DimMismatch {
            context: "bimap upstream gradient",
            expected: w.out_dim(),
            got: d_out.n(),
        });
    }
    let wm = w.matrix();
    let ds = SymMatrix::wrap(wm.matmul_tn(&d_out.as_matrix().matmul(wm)).sym_part());
    let dw = d_out.as_matrix().matmul(wm).matmul(s.as_matrix()).scale(2.0);
    Ok((ds, dw))
}

/// `U max(eps, Sigma) U^T`. The output carries its eigendecomposition.
pub fn reeig_forward(s: &SymMatrix, eps: f64) -> Result<SymMatrix> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("ReEig threshold must be positive, got {eps}")));
    }
    let eig = s.eig()?;
    let (f, _) = clamp_fn(eps);
    let out = eig.apply(&f);
    let clamped = EigPair {
        u: eig.u.clone(),
        sigma: eig.sigma.iter().map(|&x| f(x)).collect(),
    };
    Ok(out.with_eig(clamped))
}

pub fn reeig_backward(s: &SymMatrix, eps: f64, d_out: &SymMatrix) -> Result<SymMatrix> {
    let (f, df) = clamp_fn(eps);
    eig_fn_backward(s.eig()?, f, df, d_out)
}

/// Matrix logarithm; fails with `NotPositiveDefinite` on non-SPD input.
pub fn logeig_forward(s: &SymMatrix) -> Result<SymMatrix> {
    log_from_eig(s.eig()?)
}

pub fn logeig_backward(s: &SymMatrix, d_out: &SymMatrix) -> Result<SymMatrix> {
    let eig = s.eig()?;
    if eig.min_eigenvalue() <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: eig.min_eigenvalue(),
        });
    }
    eig_fn_backward(eig, f64::ln, |x| 1.0 / x, d_out)
}

/// Length of the half-vectorization of an `n x n` matrix.
pub fn halfvec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Upper triangle row by row, off-diagonal entries scaled by `sqrt(2)` so the
/// Euclidean inner product equals the Frobenius one.
pub fn halfvec(s: &SymMatrix) -> Vec<f64> {
    let n = s.n();
    let mut out = Vec::with_capacity(halfvec_len(n));
    for i in 0..n {
        out.push(s.get(i, i));
        for j in i + 1..n {
            out.push(SQRT_2 * s.get(i, j));
        }
    }
    out
}

/// Gradient with respect to `S` given the gradient with respect to `halfvec(S)`.
pub fn halfvec_backward(d_vec: &[f64], n: usize) -> Result<SymMatrix> {
    if d_vec.len() != halfvec_len(n) {
        return Err(Error::DimMismatch {
            context: "halfvec gradient",
            expected: halfvec_len(n),
            got: d_vec.len(),
        });
    }
    let mut m = Matrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        m[(i, i)] = d_vec[k];
        k += 1;
        for j in i + 1..n {
            let g = d_vec[k] / SQRT_2;
            m[(i, j)] = g;
            m[(j, i)] = g;
            k += 1;
        }
    }
    Ok(SymMatrix::wrap(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eig;
    use crate::optim::init_stiefel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::E;

    fn rand_sym(n: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
        SymMatrix::from_matrix(&Matrix::randn(n, n, 1.0, rng)).unwrap()
    }

    #[test]
    fn bimap_identity_and_submatrix() {
        let s = SymMatrix::from_diag(&[1.0, 2.0, 3.0]);
        let id = StiefelParam::new(Matrix::identity(3)).unwrap();
        assert_eq!(bimap_forward(&s, &id).unwrap(), s);
        let w = StiefelParam::new(Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]])).unwrap();
        assert_eq!(bimap_forward(&s, &w).unwrap(), SymMatrix::from_diag(&[1.0, 2.0]));
        let bad = SymMatrix::identity(4);
        assert!(matches!(bimap_forward(&bad, &w), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn bimap_preserves_positivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Matrix::randn(8, 8, 1.0, &mut rng);
        let s = SymMatrix::from_matrix(&a.matmul_nt(&a)).unwrap().add_diagonal(1e-3);
        let w = init_stiefel(4, 8, &mut rng).unwrap();
        let out = bimap_forward(&s, &w).unwrap();
        assert!(sym_eig(&out).unwrap().min_eigenvalue() > 0.0);
    }

    #[test]
    fn bimap_backward_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = rand_sym(5, &mut rng);
        let w = init_stiefel(3, 5, &mut rng).unwrap();
        let (ds, dw) = bimap_backward(&s, &w, &SymMatrix::zeros(3)).unwrap();
        assert_eq!(ds.as_matrix().frobenius_norm(), 0.0);
        assert_eq!(dw.frobenius_norm(), 0.0);

        let id = StiefelParam::new(Matrix::identity(4)).unwrap();
        let s4 = rand_sym(4, &mut rng);
        let (ds, _) = bimap_backward(&s4, &id, &SymMatrix::identity(4)).unwrap();
        assert_eq!(ds, SymMatrix::identity(4));
    }

    #[test]
    fn reeig_clamps_small_eigenvalues() {
        let out = reeig_forward(&SymMatrix::from_diag(&[1.0, 1e-6]), 1e-4).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-15 && (out.get(1, 1) - 1e-4).abs() < 1e-18);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Matrix::randn(6, 6, 1.0, &mut rng);
        let spd = SymMatrix::from_matrix(&a.matmul_nt(&a)).unwrap().add_diagonal(1.0);
        let same = reeig_forward(&spd, 1e-4).unwrap();
        assert!(same.as_matrix().sub(spd.as_matrix()).frobenius_norm() <= 1e-10);

        let indef = rand_sym(7, &mut rng);
        let out = reeig_forward(&indef, 1e-2).unwrap();
        let fresh = SymMatrix::from_matrix(out.as_matrix()).unwrap();
        assert!((sym_eig(&fresh).unwrap().min_eigenvalue() - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn reeig_backward_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = rand_sym(3, &mut rng);
        let above = SymMatrix::from_diag(&[1.0, 2.0, 3.0]);
        let ds = reeig_backward(&above, 1e-4, &g).unwrap();
        assert!(ds.as_matrix().sub(g.as_matrix()).frobenius_norm() < 1e-14);

        let below = SymMatrix::from_diag(&[-3.0, -2.0, -1.0]);
        let ds = reeig_backward(&below, 1e-4, &g).unwrap();
        assert!(ds.as_matrix().frobenius_norm() == 0.0);
    }

    #[test]
    fn logeig_backward_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let g = rand_sym(4, &mut rng);
        let ds = logeig_backward(&SymMatrix::identity(4), &g).unwrap();
        assert!(ds.as_matrix().sub(g.as_matrix()).frobenius_norm() < 1e-14);

        let ds = logeig_backward(&SymMatrix::from_diag(&[E, E]), &SymMatrix::identity(2)).unwrap();
        assert!(ds.as_matrix().sub(&Matrix::identity(2).scale(1.0 / E)).frobenius_norm() < 1e-15);

        assert!(matches!(
            logeig_forward(&SymMatrix::from_diag(&[1.0, 0.0])),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn halfvec_examples() {
        assert_eq!(halfvec(&SymMatrix::identity(2)), vec![1.0, 0.0, 1.0]);
        let s = SymMatrix::from_matrix(&Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 3.0]])).unwrap();
        assert_eq!(halfvec(&s), vec![1.0, 2.0 * SQRT_2, 3.0]);
        assert_eq!(halfvec_len(24), 300);
    }

    #[test]
    fn halfvec_is_an_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for n in 1..10 {
            let a = rand_sym(n, &mut rng);
            let b = rand_sym(n, &mut rng);
            let lhs: f64 = halfvec(&a).iter().zip(halfvec(&b)).map(|(x, y)| x * y).sum();
            let rhs = a.as_matrix().frobenius_dot(b.as_matrix());
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }
}
