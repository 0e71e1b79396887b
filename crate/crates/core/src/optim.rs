//! Riemannian SGD on the Stiefel manifold and AdamW for Euclidean parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{thin_qr, Matrix};

/// Tolerance of the row-orthonormality invariant.
pub const STIEFEL_TOL: f64 = 1e-8;

/// A `p x n` weight with orthonormal rows (`p <= n`).
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelParam {
    w: Matrix,
}

impl StiefelParam {
    /// Wraps `w`, checking the orthonormality invariant.
    pub fn new(w: Matrix) -> Result<Self> {
        if w.rows() > w.cols() {
            return Err(Error::InvalidShape(format!(
                "Stiefel weight needs rows <= cols, got {}x{}",
                w.rows(),
                w.cols()
            )));
        }
        let err = w.row_orthonormality_error();
        if !(err <= STIEFEL_TOL) {
            return Err(Error::invalid(format!("rows are not orthonormal (||WW^T - I|| = {err:e})")));
        }
        Ok(Self { w })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    /// Output dimension `p`.
    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    /// Input dimension `n`.
    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub(crate) fn matrix_mut_unchecked(&mut self) -> &mut Matrix {
        &mut self.w
    }
}

/// Uniformly distributed point on the Stiefel manifold: Q factor of a Gaussian
/// matrix with the R diagonal made positive.
pub fn init_stiefel<R: Rng + ?Sized>(p: usize, n: usize, rng: &mut R) -> Result<StiefelParam> {
    if p > n || p == 0 {
        return Err(Error::InvalidShape(format!("cannot draw a {p}x{n} Stiefel matrix")));
    }
    let g = Matrix::randn(n, p, 1.0, rng);
    let (q, _) = thin_qr(&g);
    Ok(StiefelParam { w: q.transpose() })
}

/// Projects a Euclidean gradient onto the tangent space at `w`, returned in the
/// `n x p` column layout: with `X = W^T`, `G = grad^T`, `T = G - X sym(X^T G)`.
pub fn tangent_project(w: &StiefelParam, grad: &Matrix) -> Matrix {
    let x = w.w.transpose();
    let g = grad.transpose();
    let xtg = x.matmul_tn(&g).sym_part();
    g.sub(&x.matmul(&xtg))
}

/// One Riemannian SGD step with QR retraction.
pub fn stiefel_step(w: &StiefelParam, grad: &Matrix, lr: f64) -> Result<StiefelParam> {
    if grad.shape() != w.w.shape() {
        return Err(Error::InvalidShape(format!(
            "gradient is {}x{}, weight is {}x{}",
            grad.rows(),
            grad.cols(),
            w.w.rows(),
            w.w.cols()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::invalid("non-finite Stiefel gradient"));
    }
    let t = tangent_project(w, grad);
    let y = w.w.transpose().sub(&t.scale(lr));
    let (q, _) = thin_qr(&y);
    Ok(StiefelParam { w: q.transpose() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub euclid_lr: f64,
    pub stiefel_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps_adam: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            euclid_lr: 1e-4,
            stiefel_lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps_adam: 1e-8,
        }
    }
}

/// Moment accumulators for one Euclidean parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam update, in place.
/// `step` is the 1-based step count.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    moments: &mut AdamMoments,
    step: u64,
    cfg: &OptimConfig,
) -> Result<()> {
    if param.len() != grad.len() || moments.m.len() != param.len() {
        return Err(Error::DimMismatch {
            context: "adamw_step",
            expected: param.len(),
            got: grad.len(),
        });
    }
    if step == 0 {
        return Err(Error::invalid("adamw step counter starts at 1"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::invalid("non-finite gradient"));
    }
    let lr = cfg.euclid_lr;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..param.len() {
        let g = grad[i];
        param[i] *= decay;
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps_adam);
    }
    Ok(())
}

/// Optimizer state for a whole model: one moment buffer per Euclidean
/// parameter, in the model's parameter order.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: OptimConfig,
    moments: Vec<Option<AdamMoments>>,
    step: u64,
}

impl OptimState {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter. `params` and `grads` must come
    /// from the same model type so their orders agree.
    pub fn apply(&mut self, params: Vec<ParamMut<'_>>, grads: Vec<ParamRef<'_>>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::DimMismatch {
                context: "optimizer parameter list",
                expected: params.len(),
                got: grads.len(),
            });
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| match &p.value {
                    ParamValueMut::Euclidean(m) => Some(AdamMoments::zeros(m.data().len())),
                    ParamValueMut::Stiefel(_) => None,
                })
                .collect();
        }
        self.step += 1;
        for ((p, g), mom) in params.into_iter().zip(grads).zip(self.moments.iter_mut()) {
            let g = g.value.matrix();
            match (p.value, mom) {
                (ParamValueMut::Euclidean(m), Some(mom)) => {
                    adamw_step(m.data_mut(), g.data(), mom, self.step, &self.config)?;
                }
                (ParamValueMut::Stiefel(w), None) => {
                    *w = stiefel_step(w, g, self.config.stiefel_lr)?;
                }
                _ => return Err(Error::invalid(format!("parameter `{}` changed kind", p.name))),
            }
        }
        Ok(())
    }
}

pub enum ParamValue<'a> {
    Euclidean(&'a Matrix),
    Stiefel(&'a StiefelParam),
}

impl<'a> ParamValue<'a> {
    pub fn matrix(&self) -> &'a Matrix {
        match self {
            ParamValue::Euclidean(m) => m,
            ParamValue::Stiefel(w) => w.matrix(),
        }
    }
}

pub enum ParamValueMut<'a> {
    Euclidean(&'a mut Matrix),
    Stiefel(&'a mut StiefelParam),
}

pub struct ParamRef<'a> {
    pub name: String,
    pub value: ParamValue<'a>,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub value: ParamValueMut<'a>,
}

/// Models and their gradients expose parameters in a fixed declaration order.
pub trait Parameterized {
    fn params(&self) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self) -> Vec<ParamMut<'_>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.matrix().data().len()).sum()
    }
}

pub(crate) fn eref<'a>(name: impl Into<String>, m: &'a Matrix) -> ParamRef<'a> {
    ParamRef {
        name: name.into(),
        value: ParamValue::Euclidean(m),
    }
}

pub(crate) fn emut<'a>(name: impl Into<String>, m: &'a mut Matrix) -> ParamMut<'a> {
    ParamMut {
        name: name.into(),
        value: ParamValueMut::Euclidean(m),
    }
}
