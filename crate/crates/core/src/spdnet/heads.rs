//! Classification heads: the geometric SPD head and the two Euclidean baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::DEFAULT_JITTER;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SymMatrix};
use crate::optim::{eref, init_stiefel, ParamMut, ParamRef, ParamValue, ParamValueMut, Parameterized, StiefelParam};

use super::layers::{
    bimap_backward, bimap_forward, halfvec, halfvec_backward, halfvec_len, logeig_backward, logeig_forward,
    reeig_backward, reeig_forward,
};
use super::mlp::{Mlp, MlpCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Output dimension of each BiRe block.
    pub bire_dims: Vec<usize>,
    /// ReEig threshold.
    pub eps: f64,
    /// Hidden widths of the classifier MLP.
    pub mlp_widths: Vec<usize>,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Width of the image/text projection MLPs.
    pub proj_dim: usize,
    /// Diagonal jitter added to the descriptor.
    pub jitter: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            bire_dims: vec![48, 24],
            eps: 1e-4,
            mlp_widths: vec![128],
            tau: 0.07,
            proj_dim: 128,
            jitter: DEFAULT_JITTER,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, n_in: usize) -> Result<()> {
        if self.bire_dims.is_empty() {
            return Err(Error::InvalidShape("at least one BiRe block required".into()));
        }
        let mut prev = n_in;
        for (k, &d) in self.bire_dims.iter().enumerate() {
            if d == 0 || d > prev || (k > 0 && d >= prev) {
                return Err(Error::InvalidShape(format!(
                    "BiRe dims {:?} must be strictly decreasing and start at most at N = {n_in}",
                    self.bire_dims
                )));
            }
            prev = d;
        }
        if !(self.eps > 0.0) || !(self.tau > 0.0) || self.jitter < 0.0 {
            return Err(Error::invalid("eps and tau must be positive, jitter non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Geom,
    Cls,
    Gap,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Geom => "geom",
            HeadKind::Cls => "cls",
            HeadKind::Gap => "gap",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geom" => Ok(HeadKind::Geom),
            "cls" => Ok(HeadKind::Cls),
            "gap" => Ok(HeadKind::Gap),
            other => Err(Error::invalid(format!("unknown head `{other}` (geom|cls|gap)"))),
        }
    }
}

/// BiMap followed by ReEig.
#[derive(Debug, Clone, PartialEq)]
pub struct BiReBlock {
    pub w: StiefelParam,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct GeomCache {
    /// (block input, BiMap output) per block.
    blocks: Vec<(SymMatrix, SymMatrix)>,
    /// Input of LogEig.
    rectified: SymMatrix,
    features: Vec<f64>,
    mlp: MlpCache,
}

impl GeomCache {
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Output of every ReEig, in order.
    pub fn rectified_outputs(&self) -> Vec<&SymMatrix> {
        let mut v: Vec<&SymMatrix> = self.blocks.iter().skip(1).map(|(x, _)| x).collect();
        v.push(&self.rectified);
        v
    }
}

/// BiRe blocks, LogEig, half-vectorization and an MLP producing one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricHead {
    pub blocks: Vec<BiReBlock>,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometricHeadGrad {
    pub w: Vec<Matrix>,
    pub mlp: Mlp,
}

impl GeometricHead {
    pub fn new<R: Rng + ?Sized>(n_in: usize, cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        cfg.validate(n_in)?;
        let mut blocks = Vec::with_capacity(cfg.bire_dims.len());
        let mut prev = n_in;
        for &d in &cfg.bire_dims {
            blocks.push(BiReBlock {
                w: init_stiefel(d, prev, rng)?,
                eps: cfg.eps,
            });
            prev = d;
        }
        let mut widths = vec![halfvec_len(prev)];
        widths.extend(&cfg.mlp_widths);
        widths.push(1);
        let mlp = Mlp::new(&widths, rng)?;
        Ok(Self { blocks, mlp })
    }

    pub fn in_dim(&self) -> usize {
        self.blocks[0].w.in_dim()
    }

    pub fn zero_grad(&self) -> GeometricHeadGrad {
        GeometricHeadGrad {
            w: self
                .blocks
                .iter()
                .map(|b| Matrix::zeros(b.w.out_dim(), b.w.in_dim()))
                .collect(),
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn forward(&self, s0: &SymMatrix) -> Result<(f64, GeomCache)> {
        if s0.n() != self.in_dim() {
            return Err(Error::DimMismatch {
                context: "geometric head input",
                expected: self.in_dim(),
                got: s0.n(),
            });
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut x = s0.clone();
        for b in &self.blocks {
            let y = bimap_forward(&x, &b.w)?;
            let z = reeig_forward(&y, b.eps)?;
            blocks.push((x, y));
            x = z;
        }
        let l = logeig_forward(&x)?;
        let features = halfvec(&l);
        let (out, mlp) = self.mlp.forward(&features)?;
        Ok((
            out[0],
            GeomCache {
                blocks,
                rectified: x,
                features,
                mlp,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads`; returns `dL/dS0`.
    pub fn backward(&self, cache: &GeomCache, d_logit: f64, grads: &mut GeometricHeadGrad) -> Result<SymMatrix> {
        let d_feat = self.mlp.backward(&cache.mlp, &[d_logit], &mut grads.mlp);
        let dl = halfvec_backward(&d_feat, cache.rectified.n())?;
        let mut dx = logeig_backward(&cache.rectified, &dl)?;
        for (k, b) in self.blocks.iter().enumerate().rev() {
            let (x, y) = &cache.blocks[k];
            let dy = reeig_backward(y, b.eps, &dx)?;
            let (dxin, dw) = bimap_backward(x, &b.w, &dy)?;
            grads.w[k].add_assign(&dw);
            dx = dxin;
        }
        Ok(dx)
    }
}

impl Parameterized for GeometricHead {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut v: Vec<ParamRef<'_>> = self
            .blocks
            .iter()
            .enumerate()
            .map(|(k, b)| ParamRef {
                name: format!("bire{k}.w"),
                value: ParamValue::Stiefel(&b.w),
            })
            .collect();
        v.extend(self.mlp.params().into_iter().map(|p| ParamRef {
            name: format!("mlp.{}", p.name),
            ..p
        }));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v: Vec<ParamMut<'_>> = self
            .blocks
            .iter_mut()
            .enumerate()
            .map(|(k, b)| ParamMut {
                name: format!("bire{k}.w"),
                value: ParamValueMut::Stiefel(&mut b.w),
            })
            .collect();
        v.extend(self.mlp.params_mut().into_iter().map(|p| ParamMut {
            name: format!("mlp.{}", p.name),
            ..p
        }));
        v
    }
}

impl Parameterized for GeometricHeadGrad {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut v: Vec<ParamRef<'_>> = self
            .w
            .iter()
            .enumerate()
            .map(|(k, w)| eref(format!("bire{k}.w"), w))
            .collect();
        v.extend(self.mlp.params().into_iter().map(|p| ParamRef {
            name: format!("mlp.{}", p.name),
            ..p
        }));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v: Vec<ParamMut<'_>> = self
            .w
            .iter_mut()
            .enumerate()
            .map(|(k, w)| crate::optim::emut(format!("bire{k}.w"), w))
            .collect();
        v.extend(self.mlp.params_mut().into_iter().map(|p| ParamMut {
            name: format!("mlp.{}", p.name),
            ..p
        }));
        v
    }
}

fn mlp_widths(input: usize, hidden: &[usize]) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(hidden);
    w.push(1);
    w
}

/// Baseline: MLP over the concatenated class tokens of the imaging branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTokenHead {
    pub mlp: Mlp,
}

impl ClassTokenHead {
    /// `input_dim` is the concatenated length (3 d for three branches).
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&mlp_widths(input_dim, &cfg.mlp_widths), rng)?,
        })
    }

    pub fn forward(&self, cls: &[f64]) -> Result<(f64, MlpCache)> {
        let (out, cache) = self.mlp.forward(cls)?;
        Ok((out[0], cache))
    }

    /// Accumulates parameter gradients; returns the gradient for the input vector.
    pub fn backward(&self, cache: &MlpCache, d_logit: f64, grads: &mut Mlp) -> Vec<f64> {
        self.mlp.backward(cache, &[d_logit], grads)
    }
}

/// Baseline: MLP over the mean of all content token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GapHead {
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct GapCache {
    rows: usize,
    mlp: MlpCache,
}

impl GapHead {
    pub fn new<R: Rng + ?Sized>(d: usize, cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&mlp_widths(d, &cfg.mlp_widths), rng)?,
        })
    }

    /// `patches` holds one content token embedding per row.
    pub fn forward(&self, patches: &Matrix) -> Result<(f64, GapCache)> {
        if patches.rows() == 0 {
            return Err(Error::invalid("no patch embeddings to pool"));
        }
        let pooled = mean_rows(patches);
        let (out, mlp) = self.mlp.forward(&pooled)?;
        Ok((
            out[0],
            GapCache {
                rows: patches.rows(),
                mlp,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient for every patch row.
    pub fn backward(&self, cache: &GapCache, d_logit: f64, grads: &mut Mlp) -> Matrix {
        let d_pooled = self.mlp.backward(&cache.mlp, &[d_logit], grads);
        let inv = 1.0 / cache.rows as f64;
        Matrix::from_fn(cache.rows, d_pooled.len(), |_, j| d_pooled[j] * inv)
    }
}

pub fn mean_rows(m: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (a, &x) in acc.iter_mut().zip(m.row(i)) {
            *a += x;
        }
    }
    let inv = 1.0 / m.rows() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

macro_rules! mlp_only_params {
    ($ty:ty) => {
        impl Parameterized for $ty {
            fn params(&self) -> Vec<ParamRef<'_>> {
                self.mlp
                    .params()
                    .into_iter()
                    .map(|p| ParamRef {
                        name: format!("mlp.{}", p.name),
                        ..p
                    })
                    .collect()
            }

            fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
                self.mlp
                    .params_mut()
                    .into_iter()
                    .map(|p| ParamMut {
                        name: format!("mlp.{}", p.name),
                        ..p
                    })
                    .collect()
            }
        }
    };
}

mlp_only_params!(ClassTokenHead);
mlp_only_params!(GapHead);
