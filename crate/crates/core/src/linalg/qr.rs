use super::matrix::Matrix;

/// Thin Householder QR of an `n x p` matrix (`p <= n`).
///
/// Returns `(Q, R)` with `Q` of shape `n x p` having orthonormal columns and
/// `R` upper triangular `p x p` with a non-negative diagonal.
///
/// # Panics
/// Panics if `p > n`.
pub fn thin_qr(a: &Matrix) -> (Matrix, Matrix) {
    let (n, p) = a.shape();
    assert!(p <= n, "thin_qr needs rows >= cols, got {n}x{p}");
    let mut r = a.clone();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(p);

    for k in 0..p {
        let mut v: Vec<f64> = (k..n).map(|i| r[(i, k)]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            vs.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2 = v.iter().map(|x| x * x).sum::<f64>();
        if vnorm2 == 0.0 {
            vs.push(Vec::new());
            continue;
        }
        for j in k..p {
            let s: f64 = v.iter().enumerate().map(|(t, vt)| vt * r[(k + t, j)]).sum();
            let c = 2.0 * s / vnorm2;
            for (t, vt) in v.iter().enumerate() {
                r[(k + t, j)] -= c * vt;
            }
        }
        vs.push(v.iter().map(|x| x / vnorm2.sqrt()).collect());
    }

    // Q = H_0 H_1 ... H_{p-1} applied to the first p columns of I.
    let mut q = Matrix::from_fn(n, p, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..p).rev() {
        let v = &vs[k];
        if v.is_empty() {
            continue;
        }
        for j in 0..p {
            let s: f64 = v.iter().enumerate().map(|(t, vt)| vt * q[(k + t, j)]).sum();
            for (t, vt) in v.iter().enumerate() {
                q[(k + t, j)] -= 2.0 * s * vt;
            }
        }
    }

    let mut rr = Matrix::from_fn(p, p, |i, j| if j >= i { r[(i, j)] } else { 0.0 });
    for k in 0..p {
        if rr[(k, k)] < 0.0 {
            for j in 0..p {
                rr[(k, j)] = -rr[(k, j)];
            }
            for i in 0..n {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    (q, rr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn factors_reproduce_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(n, p) in &[(5, 5), (9, 4), (79, 48), (3, 1)] {
            let a = Matrix::randn(n, p, 1.0, &mut rng);
            let (q, r) = thin_qr(&a);
            assert!(q.matmul(&r).sub(&a).frobenius_norm() < 1e-12 * a.frobenius_norm().max(1.0));
            assert!(q.matmul_tn(&q).sub(&Matrix::identity(p)).frobenius_norm() < 1e-12);
            for i in 0..p {
                assert!(r[(i, i)] >= 0.0);
                for j in 0..i {
                    assert_eq!(r[(i, j)], 0.0);
                }
            }
        }
    }
}
