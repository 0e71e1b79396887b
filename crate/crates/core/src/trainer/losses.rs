//! Binary cross-entropy, symmetric InfoNCE and the image/text projection pair.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::optim::{ParamMut, ParamRef, Parameterized};
use crate::spdnet::{Mlp, MlpCache};

/// Returns `(loss, dloss/dlogit)` for a single logit and a {0,1} label.
pub fn bce_loss(logit: f64, label: f64) -> (f64, f64) {
    // max(x,0) - x y + ln(1 + e^{-|x|})
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - label)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub d_image: Matrix,
    pub d_text: Matrix,
}

/// Symmetric InfoNCE over the `B x B` similarity logits `W_I W_T^T / tau`:
/// mean of the image-to-text and text-to-image cross-entropies with the
/// matching pair as the target.
pub fn infonce_loss(w_image: &Matrix, w_text: &Matrix, tau: f64) -> Result<InfoNceOutput> {
    let b = w_image.rows();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if w_text.shape() != w_image.shape() {
        return Err(Error::DimMismatch {
            context: "InfoNCE text batch",
            expected: b,
            got: w_text.rows(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let logits = w_image.matmul_nt(w_text).scale(1.0 / tau);
    let bf = b as f64;

    // d loss / d logits
    let mut g = Matrix::zeros(b, b);
    let mut loss = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let (lse, p) = softmax(row);
        loss += lse - row[i];
        for j in 0..b {
            g[(i, j)] += (p[j] - f64::from(u8::from(i == j))) / (2.0 * bf);
        }
    }
    let lt = logits.transpose();
    for j in 0..b {
        let col = lt.row(j);
        let (lse, p) = softmax(col);
        loss += lse - col[j];
        for i in 0..b {
            g[(i, j)] += (p[i] - f64::from(u8::from(i == j))) / (2.0 * bf);
        }
    }
    loss /= 2.0 * bf;

    let d_image = g.matmul(w_text).scale(1.0 / tau);
    let d_text = g.matmul_tn(w_image).scale(1.0 / tau);
    Ok(InfoNceOutput { loss, d_image, d_text })
}

/// Log-sum-exp and softmax of a row.
fn softmax(x: &[f64]) -> (f64, Vec<f64>) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (m + s.ln(), e.iter().map(|v| v / s).collect())
}

/// `x / ||x||` and its backward.
pub fn l2_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    (x.iter().map(|v| v / norm).collect(), norm)
}

pub fn l2_normalize_backward(y: &[f64], norm: f64, dy: &[f64]) -> Vec<f64> {
    let yd: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, di)| (di - yi * yd) / norm).collect()
}

/// Image and text projection MLPs; outputs are L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub image: Mlp,
    pub text: Mlp,
}

#[derive(Debug, Clone)]
pub struct ProjectionCache {
    image: (MlpCache, Vec<f64>, f64),
    text: (MlpCache, Vec<f64>, f64),
}

impl ProjectionCache {
    pub fn w_image(&self) -> &[f64] {
        &self.image.1
    }

    pub fn w_text(&self) -> &[f64] {
        &self.text.1
    }
}

impl Projections {
    /// `image_in` is the concatenated imaging class-token length, `text_in` the
    /// text class-token length; one hidden layer of width `proj_dim`.
    pub fn new<R: Rng + ?Sized>(image_in: usize, text_in: usize, proj_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            image: Mlp::new(&[image_in, proj_dim, proj_dim], rng)?,
            text: Mlp::new(&[text_in, proj_dim, proj_dim], rng)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            image: self.image.zeros_like(),
            text: self.text.zeros_like(),
        }
    }

    /// Returns unit vectors `(w_I, w_T)` with the cache for backward.
    pub fn project_pair(&self, image_cls: &[f64], text_cls: &[f64]) -> Result<ProjectionCache> {
        let (hi, ci) = self.image.forward(image_cls)?;
        let (ht, ct) = self.text.forward(text_cls)?;
        let (wi, ni) = l2_normalize(&hi);
        let (wt, nt) = l2_normalize(&ht);
        if !(ni > 0.0 && nt > 0.0) {
            return Err(Error::invalid("projection collapsed to the zero vector"));
        }
        Ok(ProjectionCache {
            image: (ci, wi, ni),
            text: (ct, wt, nt),
        })
    }

    /// Accumulates gradients; returns input gradients `(d image_cls, d text_cls)`.
    pub fn backward(
        &self,
        cache: &ProjectionCache,
        d_wi: &[f64],
        d_wt: &[f64],
        grads: &mut Projections,
    ) -> (Vec<f64>, Vec<f64>) {
        let dhi = l2_normalize_backward(&cache.image.1, cache.image.2, d_wi);
        let dht = l2_normalize_backward(&cache.text.1, cache.text.2, d_wt);
        let gi = self.image.backward(&cache.image.0, &dhi, &mut grads.image);
        let gt = self.text.backward(&cache.text.0, &dht, &mut grads.text);
        (gi, gt)
    }
}

impl Parameterized for Projections {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut v: Vec<ParamRef<'_>> = self
            .image
            .params()
            .into_iter()
            .map(|p| ParamRef {
                name: format!("proj_image.{}", p.name),
                ..p
            })
            .collect();
        v.extend(self.text.params().into_iter().map(|p| ParamRef {
            name: format!("proj_text.{}", p.name),
            ..p
        }));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v: Vec<ParamMut<'_>> = self
            .image
            .params_mut()
            .into_iter()
            .map(|p| ParamMut {
                name: format!("proj_image.{}", p.name),
                ..p
            })
            .collect();
        v.extend(self.text.params_mut().into_iter().map(|p| ParamMut {
            name: format!("proj_text.{}", p.name),
            ..p
        }));
        v
    }
}
