//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check contracts the layer output with a fixed random cotangent and
//! compares the analytic gradient with `(L(x + h) - L(x - h)) / 2h` entry by
//! entry. The error of one tensor is `max |a - n| / max(max |a|, max |n|)`.
//! Symmetric inputs are perturbed in the (i, j) and (j, i) entries at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::linalg::{thin_qr, Matrix, SymMatrix};
use crate::optim::{init_stiefel, ParamValueMut, Parameterized};
use crate::spdnet::{
    bimap_backward, bimap_forward, halfvec, halfvec_backward, logeig_backward, logeig_forward, reeig_backward,
    reeig_forward, ClassTokenHead, GapHead, GeometricHead, HeadConfig,
};
use crate::trainer::{bce_loss, infonce_loss, Projections};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: String,
    pub tensors: Vec<TensorReport>,
}

impl LayerReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn tensor(name: &str, analytic: &[f64], numeric: &[f64]) -> TensorReport {
    TensorReport {
        name: name.to_string(),
        entries: numeric.len(),
        max_rel_err: rel_err(analytic, numeric),
    }
}

fn fd_vec(x: &[f64], h: f64, f: impl Fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

fn fd_matrix(m: &Matrix, h: f64, f: impl Fn(&Matrix) -> Result<f64>) -> Result<Vec<f64>> {
    let (r, c) = m.shape();
    fd_vec(m.data(), h, |x| f(&Matrix::new(r, c, x.to_vec())?))
}

/// Directional derivatives along `E_ij + E_ji` (`E_ii` on the diagonal), upper triangle.
fn fd_sym(s: &SymMatrix, h: f64, f: impl Fn(&SymMatrix) -> Result<f64>) -> Result<Vec<f64>> {
    let n = s.n();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = s.as_matrix().clone();
                m.row_mut(i)[j] += delta;
                if i != j {
                    m.row_mut(j)[i] += delta;
                }
                f(&SymMatrix::from_matrix(&m)?)
            };
            out.push((eval(h)? - eval(-h)?) / (2.0 * h));
        }
    }
    Ok(out)
}

/// Analytic counterpart of [`fd_sym`].
fn sym_pairs(g: &Matrix) -> Vec<f64> {
    let n = g.rows();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            out.push(if i == j { g.row(i)[i] } else { g.row(i)[j] + g.row(j)[i] });
        }
    }
    out
}

fn bump<M: Parameterized>(model: &mut M, k: usize, e: usize, delta: f64) {
    let p = model.params_mut().into_iter().nth(k).expect("parameter index");
    match p.value {
        ParamValueMut::Euclidean(m) => m.data_mut()[e] += delta,
        ParamValueMut::Stiefel(w) => w.matrix_mut_unchecked().data_mut()[e] += delta,
    }
}

/// Compares every parameter of `model` against the matching tensor of `grads`.
/// Stiefel weights are perturbed off the manifold, giving the Euclidean gradient.
fn check_params<M: Parameterized + Clone, G: Parameterized>(
    prefix: &str,
    model: &M,
    grads: &G,
    h: f64,
    f: impl Fn(&M) -> Result<f64>,
) -> Result<Vec<TensorReport>> {
    let mut out = Vec::new();
    for (k, (p, g)) in model.params().iter().zip(grads.params()).enumerate() {
        let len = p.value.matrix().data().len();
        let mut numeric = Vec::with_capacity(len);
        for e in 0..len {
            let mut plus = model.clone();
            bump(&mut plus, k, e, h);
            let mut minus = model.clone();
            bump(&mut minus, k, e, -h);
            numeric.push((f(&plus)? - f(&minus)?) / (2.0 * h));
        }
        out.push(tensor(&format!("{prefix}{}", p.name), g.value.matrix().data(), &numeric));
    }
    Ok(out)
}

/// `Q diag(eigs) Q^T` with a random orthogonal `Q`.
pub fn spd_with_spectrum<R: Rng + ?Sized>(eigs: &[f64], rng: &mut R) -> SymMatrix {
    let (q, _) = thin_qr(&Matrix::randn(eigs.len(), eigs.len(), 1.0, rng));
    SymMatrix::from_diag(eigs).congruence(&q)
}

fn random_sym<R: Rng + ?Sized>(n: usize, rng: &mut R) -> SymMatrix {
    SymMatrix::wrap(Matrix::randn(n, n, 1.0, rng).sym_part())
}

fn random_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    Matrix::randn(1, n, 1.0, rng).into_data()
}

fn contract(g: &SymMatrix, y: &SymMatrix) -> f64 {
    g.as_matrix().frobenius_dot(y.as_matrix())
}

fn layer(name: &str, tensors: Vec<TensorReport>) -> LayerReport {
    LayerReport {
        layer: name.to_string(),
        tensors,
    }
}

/// Spectrum with gap 0.1 and every eigenvalue at least 0.05 away from 0.5.
pub const REEIG_SPECTRUM: [f64; 7] = [0.1, 0.2, 0.35, 0.65, 0.8, 1.0, 1.3];
pub const REEIG_EPS: f64 = 0.5;

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<LayerReport>> {
    let h = cfg.step;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();

    // BiMap
    {
        let s = spd_with_spectrum(&[0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 1.7, 1.9], &mut rng);
        let w = init_stiefel(5, 8, &mut rng)?;
        let g = random_sym(5, &mut rng);
        let (ds, dw) = bimap_backward(&s, &w, &g)?;
        let n_s = fd_sym(&s, h, |x| Ok(contract(&g, &bimap_forward(x, &w)?)))?;
        let n_w = fd_matrix(w.matrix(), h, |m| Ok(contract(&g, &s.congruence(m))))?;
        reports.push(layer(
            "bimap",
            vec![tensor("input", &sym_pairs(ds.as_matrix()), &n_s), tensor("w", dw.data(), &n_w)],
        ));
    }

    // ReEig, with the clamp active on three eigenvalues
    {
        let s = spd_with_spectrum(&REEIG_SPECTRUM, &mut rng);
        let g = random_sym(s.n(), &mut rng);
        let ds = reeig_backward(&s, REEIG_EPS, &g)?;
        let n_s = fd_sym(&s, h, |x| Ok(contract(&g, &reeig_forward(x, REEIG_EPS)?)))?;
        reports.push(layer("reeig", vec![tensor("input", &sym_pairs(ds.as_matrix()), &n_s)]));
    }

    // LogEig
    {
        let s = spd_with_spectrum(&[0.3, 0.45, 0.7, 1.0, 1.4, 2.0], &mut rng);
        let g = random_sym(s.n(), &mut rng);
        let ds = logeig_backward(&s, &g)?;
        let n_s = fd_sym(&s, h, |x| Ok(contract(&g, &logeig_forward(x)?)))?;
        reports.push(layer("logeig", vec![tensor("input", &sym_pairs(ds.as_matrix()), &n_s)]));
    }

    // halfvec
    {
        let s = random_sym(6, &mut rng);
        let g = random_vec(halfvec(&s).len(), &mut rng);
        let ds = halfvec_backward(&g, s.n())?;
        let n_s = fd_sym(&s, h, |x| Ok(crate::linalg::dot(&g, &halfvec(x))))?;
        reports.push(layer("halfvec", vec![tensor("input", &sym_pairs(ds.as_matrix()), &n_s)]));
    }

    let head_cfg = HeadConfig {
        bire_dims: vec![7, 4],
        mlp_widths: vec![12],
        ..HeadConfig::default()
    };

    // geometric head
    {
        let spectrum: Vec<f64> = (0..10).map(|i| 0.5 + 0.2 * i as f64).collect();
        let s0 = spd_with_spectrum(&spectrum, &mut rng);
        let head = GeometricHead::new(10, &head_cfg, &mut rng)?;
        let (_, cache) = head.forward(&s0)?;
        let mut grads = head.zero_grad();
        let ds = head.backward(&cache, 1.0, &mut grads)?;
        let mut tensors = vec![tensor(
            "input",
            &sym_pairs(ds.as_matrix()),
            &fd_sym(&s0, h, |x| Ok(head.forward(x)?.0))?,
        )];
        tensors.extend(check_params("", &head, &grads, h, |m: &GeometricHead| Ok(m.forward(&s0)?.0))?);
        reports.push(layer("geom_head", tensors));
    }

    // class-token head
    {
        let head = ClassTokenHead::new(12, &head_cfg, &mut rng)?;
        let x = random_vec(12, &mut rng);
        let (_, cache) = head.forward(&x)?;
        let mut grads = head.mlp.zeros_like();
        let dx = head.backward(&cache, 1.0, &mut grads);
        let mut tensors = vec![tensor("input", &dx, &fd_vec(&x, h, |v| Ok(head.forward(v)?.0))?)];
        tensors.extend(check_params("", &head, &grads, h, |m: &ClassTokenHead| Ok(m.forward(&x)?.0))?);
        reports.push(layer("cls_head", tensors));
    }

    // GAP head
    {
        let head = GapHead::new(5, &head_cfg, &mut rng)?;
        let x = Matrix::randn(6, 5, 1.0, &mut rng);
        let (_, cache) = head.forward(&x)?;
        let mut grads = head.mlp.zeros_like();
        let dx = head.backward(&cache, 1.0, &mut grads);
        let mut tensors = vec![tensor("input", dx.data(), &fd_matrix(&x, h, |m| Ok(head.forward(m)?.0))?)];
        tensors.extend(check_params("", &head, &grads, h, |m: &GapHead| Ok(m.forward(&x)?.0))?);
        reports.push(layer("gap_head", tensors));
    }

    // project_pair
    {
        let proj = Projections::new(9, 4, 6, &mut rng)?;
        let xi = random_vec(9, &mut rng);
        let xt = random_vec(4, &mut rng);
        let gi = random_vec(6, &mut rng);
        let gt = random_vec(6, &mut rng);
        let loss = |p: &Projections, a: &[f64], b: &[f64]| -> Result<f64> {
            let c = p.project_pair(a, b)?;
            Ok(crate::linalg::dot(&gi, c.w_image()) + crate::linalg::dot(&gt, c.w_text()))
        };
        let cache = proj.project_pair(&xi, &xt)?;
        let mut grads = proj.zeros_like();
        let (dxi, dxt) = proj.backward(&cache, &gi, &gt, &mut grads);
        let mut tensors = vec![
            tensor("image_cls", &dxi, &fd_vec(&xi, h, |v| loss(&proj, v, &xt))?),
            tensor("text_cls", &dxt, &fd_vec(&xt, h, |v| loss(&proj, &xi, v))?),
        ];
        tensors.extend(check_params("", &proj, &grads, h, |p: &Projections| loss(p, &xi, &xt))?);
        reports.push(layer("project_pair", tensors));
    }

    // InfoNCE
    {
        let wi = Matrix::randn(4, 6, 0.5, &mut rng);
        let wt = Matrix::randn(4, 6, 0.5, &mut rng);
        let tau = 0.5;
        let out = infonce_loss(&wi, &wt, tau)?;
        let n_i = fd_matrix(&wi, h, |m| Ok(infonce_loss(m, &wt, tau)?.loss))?;
        let n_t = fd_matrix(&wt, h, |m| Ok(infonce_loss(&wi, m, tau)?.loss))?;
        reports.push(layer(
            "infonce_loss",
            vec![tensor("w_image", out.d_image.data(), &n_i), tensor("w_text", out.d_text.data(), &n_t)],
        ));
    }

    // BCE
    {
        let mut tensors = Vec::new();
        for (logit, label) in [(-1.7, 0.0), (0.3, 1.0), (2.5, 0.0), (-0.4, 1.0)] {
            let (_, g) = bce_loss(logit, label);
            let n = fd_vec(&[logit], h, |v| Ok(bce_loss(v[0], label).0))?;
            tensors.push(tensor(&format!("logit({logit},{label})"), &[g], &n));
        }
        reports.push(layer("bce_loss", tensors));
    }

    Ok(reports)
}
