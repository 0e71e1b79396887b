//! Mini-batch training of one head (plus the contrastive projections) on
//! precomputed case features.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::CaseFeatures;
use super::losses::{bce_loss, infonce_loss, sigmoid, ProjectionCache, Projections};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{auc_pr, auc_roc, fpr95, ScoredSet};
use crate::optim::{OptimConfig, OptimState, ParamMut, ParamRef, Parameterized};
use crate::spdnet::{
    ClassTokenHead, GapCache, GapHead, GeomCache, GeometricHead, GeometricHeadGrad, HeadConfig, HeadKind, Mlp,
    MlpCache,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub head: HeadConfig,
    pub optim: OptimConfig,
    pub encoder: EncoderConfig,
    /// Seed of the frozen encoder weights used for volume inputs.
    pub encoder_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Include the text branch and the contrastive loss.
    pub multimodal: bool,
    pub bce_weight: f64,
    pub infonce_weight: f64,
    /// Validate every this many epochs; the last epoch is always validated.
    pub val_every: usize,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            optim: OptimConfig::default(),
            encoder: EncoderConfig::default(),
            encoder_seed: 0,
            epochs: 50,
            batch_size: 16,
            multimodal: true,
            bce_weight: 1.0,
            infonce_weight: 1.0,
            val_every: 1,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::invalid("epochs, batch size and validation interval must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::invalid("at least two folds required"));
        }
        if !(self.bce_weight >= 0.0 && self.infonce_weight >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        self.encoder.validate()
    }
}

/// Input sizes a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Descriptor size `N`.
    pub n: usize,
    /// Token width `d`.
    pub d: usize,
    /// Concatenated imaging class-token length.
    pub image_cls: usize,
    /// Text class-token length; absent for imaging-only models.
    pub text_cls: Option<usize>,
}

impl ModelDims {
    pub fn of(f: &CaseFeatures) -> Self {
        Self {
            n: f.n(),
            d: f.dim(),
            image_cls: f.image_cls.len(),
            text_cls: f.text_cls.as_ref().map(Vec::len),
        }
    }

    fn check(&self, f: &CaseFeatures) -> Result<()> {
        let got = Self::of(f);
        if got != *self {
            return Err(Error::invalid(format!(
                "case {} has input sizes {got:?}, model expects {self:?}",
                f.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Geom(GeometricHead),
    Cls(ClassTokenHead),
    Gap(GapHead),
}

enum HeadCache {
    Geom(GeomCache),
    Cls(MlpCache),
    Gap(GapCache),
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadGrad {
    Geom(GeometricHeadGrad),
    Cls(ClassTokenHead),
    Gap(GapHead),
}

impl Parameterized for Head {
    fn params(&self) -> Vec<ParamRef<'_>> {
        match self {
            Head::Geom(h) => h.params(),
            Head::Cls(h) => h.params(),
            Head::Gap(h) => h.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        match self {
            Head::Geom(h) => h.params_mut(),
            Head::Cls(h) => h.params_mut(),
            Head::Gap(h) => h.params_mut(),
        }
    }
}

impl Parameterized for HeadGrad {
    fn params(&self) -> Vec<ParamRef<'_>> {
        match self {
            HeadGrad::Geom(h) => h.params(),
            HeadGrad::Cls(h) => h.params(),
            HeadGrad::Gap(h) => h.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        match self {
            HeadGrad::Geom(h) => h.params_mut(),
            HeadGrad::Cls(h) => h.params_mut(),
            HeadGrad::Gap(h) => h.params_mut(),
        }
    }
}

/// A classification head and, for multimodal runs, the projection pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: HeadKind,
    pub dims: ModelDims,
    pub head: Head,
    pub projections: Option<Projections>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub head: HeadGrad,
    pub projections: Option<Projections>,
}

fn chain<'a>(mut a: Vec<ParamRef<'a>>, b: Option<Vec<ParamRef<'a>>>) -> Vec<ParamRef<'a>> {
    a.extend(b.into_iter().flatten());
    a
}

fn chain_mut<'a>(mut a: Vec<ParamMut<'a>>, b: Option<Vec<ParamMut<'a>>>) -> Vec<ParamMut<'a>> {
    a.extend(b.into_iter().flatten());
    a
}

impl Parameterized for Model {
    fn params(&self) -> Vec<ParamRef<'_>> {
        chain(self.head.params(), self.projections.as_ref().map(Parameterized::params))
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        chain_mut(self.head.params_mut(), self.projections.as_mut().map(Parameterized::params_mut))
    }
}

impl Parameterized for ModelGrad {
    fn params(&self) -> Vec<ParamRef<'_>> {
        chain(self.head.params(), self.projections.as_ref().map(Parameterized::params))
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        chain_mut(self.head.params_mut(), self.projections.as_mut().map(Parameterized::params_mut))
    }
}

/// Independent RNG stream for a named purpose.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A 64-bit seed derived from `seed` for the given stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).next_u64()
}

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;

impl Model {
    /// Fresh model; initialization draws from a stream of `seed` distinct
    /// from the data-order stream.
    pub fn new(kind: HeadKind, dims: ModelDims, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, STREAM_INIT);
        let head = match kind {
            HeadKind::Geom => Head::Geom(GeometricHead::new(dims.n, &cfg.head, &mut rng)?),
            HeadKind::Cls => Head::Cls(ClassTokenHead::new(
                dims.image_cls + dims.text_cls.unwrap_or(0),
                &cfg.head,
                &mut rng,
            )?),
            HeadKind::Gap => Head::Gap(GapHead::new(dims.d, &cfg.head, &mut rng)?),
        };
        let projections = match (cfg.multimodal, dims.text_cls) {
            (true, Some(t)) => Some(Projections::new(dims.image_cls, t, cfg.head.proj_dim, &mut rng)?),
            (true, None) => return Err(Error::invalid("multimodal model needs text class tokens")),
            (false, _) => None,
        };
        Ok(Self {
            kind,
            dims,
            head,
            projections,
        })
    }

    pub fn zero_grad(&self) -> ModelGrad {
        let head = match &self.head {
            Head::Geom(h) => HeadGrad::Geom(h.zero_grad()),
            Head::Cls(h) => HeadGrad::Cls(ClassTokenHead { mlp: h.mlp.zeros_like() }),
            Head::Gap(h) => HeadGrad::Gap(GapHead { mlp: h.mlp.zeros_like() }),
        };
        ModelGrad {
            head,
            projections: self.projections.as_ref().map(Projections::zeros_like),
        }
    }

    fn forward(&self, f: &CaseFeatures) -> Result<(f64, HeadCache)> {
        self.dims.check(f)?;
        Ok(match &self.head {
            Head::Geom(h) => {
                let (l, c) = h.forward(&f.s0)?;
                (l, HeadCache::Geom(c))
            }
            Head::Cls(h) => {
                let (l, c) = h.forward(&f.cls_input())?;
                (l, HeadCache::Cls(c))
            }
            Head::Gap(h) => {
                let (l, c) = h.forward(f.tokens.matrix())?;
                (l, HeadCache::Gap(c))
            }
        })
    }

    fn backward(&self, cache: &HeadCache, d_logit: f64, grads: &mut ModelGrad) -> Result<()> {
        match (&self.head, cache, &mut grads.head) {
            (Head::Geom(h), HeadCache::Geom(c), HeadGrad::Geom(g)) => {
                h.backward(c, d_logit, g)?;
            }
            (Head::Cls(h), HeadCache::Cls(c), HeadGrad::Cls(g)) => {
                h.backward(c, d_logit, &mut g.mlp);
            }
            (Head::Gap(h), HeadCache::Gap(c), HeadGrad::Gap(g)) => {
                h.backward(c, d_logit, &mut g.mlp);
            }
            _ => return Err(Error::invalid("head, cache and gradient kinds disagree")),
        }
        Ok(())
    }

    /// Classification logit.
    pub fn logit(&self, f: &CaseFeatures) -> Result<f64> {
        Ok(self.forward(f)?.0)
    }

    /// Probability of class 1.
    pub fn predict(&self, f: &CaseFeatures) -> Result<f64> {
        Ok(sigmoid(self.logit(f)?))
    }

    /// Smallest eigenvalue over every ReEig output, for diagnostics.
    fn min_rectified_eigenvalue(&self, f: &CaseFeatures) -> Option<f64> {
        match (&self.head, self.forward(f).ok()?.1) {
            (Head::Geom(_), HeadCache::Geom(c)) => c
                .rectified_outputs()
                .iter()
                .filter_map(|s| s.eig().ok().map(|e| e.min_eigenvalue()))
                .reduce(f64::min),
            _ => None,
        }
    }
}

/// Loss of one mini-batch and the accumulated (batch-mean) gradients.
pub fn batch_loss_and_grad(
    model: &Model,
    cfg: &TrainConfig,
    batch: &[&CaseFeatures],
    grads: &mut ModelGrad,
) -> Result<f64> {
    let b = batch.len() as f64;
    let mut loss = 0.0;
    for f in batch {
        let (logit, cache) = model.forward(f)?;
        let (l, dl) = bce_loss(logit, f64::from(f.label));
        loss += cfg.bce_weight * l / b;
        model.backward(&cache, cfg.bce_weight * dl / b, grads)?;
    }
    if let (Some(p), Some(pg)) = (&model.projections, grads.projections.as_mut()) {
        if batch.len() >= 2 && cfg.infonce_weight > 0.0 {
            let caches: Vec<ProjectionCache> = batch
                .iter()
                .map(|f| {
                    let text = f
                        .text_cls
                        .as_deref()
                        .ok_or_else(|| Error::invalid(format!("case {} lacks text class token", f.id)))?;
                    p.project_pair(&f.image_cls, text)
                })
                .collect::<Result<_>>()?;
            let rows = |get: fn(&ProjectionCache) -> &[f64]| {
                let d = get(&caches[0]).len();
                let data = caches.iter().flat_map(|c| get(c).iter().copied()).collect();
                Matrix::new(caches.len(), d, data)
            };
            let wi = rows(ProjectionCache::w_image)?;
            let wt = rows(ProjectionCache::w_text)?;
            let out = infonce_loss(&wi, &wt, cfg.head.tau)?;
            loss += cfg.infonce_weight * out.loss;
            let w = cfg.infonce_weight;
            for (k, c) in caches.iter().enumerate() {
                let di: Vec<f64> = out.d_image.row(k).iter().map(|v| v * w).collect();
                let dt: Vec<f64> = out.d_text.row(k).iter().map(|v| v * w).collect();
                p.backward(c, &di, &dt, pg);
            }
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when validation was skipped or undefined.
    pub val_auc_pr: Option<f64>,
    pub val_fpr95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub positives: usize,
    pub auc_pr: Option<f64>,
    pub auc_roc: Option<f64>,
    pub fpr95: Option<f64>,
}

/// Probabilities for every case, in order.
pub fn predict_all(model: &Model, cases: &[&CaseFeatures]) -> Result<Vec<f64>> {
    cases.iter().map(|f| model.predict(f)).collect()
}

pub fn evaluate(model: &Model, cases: &[&CaseFeatures]) -> Result<EvalMetrics> {
    let scores = predict_all(model, cases)?;
    let labels: Vec<u8> = cases.iter().map(|f| f.label).collect();
    score_metrics(scores, labels)
}

/// Metrics of arbitrary scores; undefined metrics are `None`.
pub fn score_metrics(scores: Vec<f64>, labels: Vec<u8>) -> Result<EvalMetrics> {
    let set = ScoredSet::new(scores, labels)?;
    Ok(EvalMetrics {
        n: set.len(),
        positives: set.positives(),
        auc_pr: auc_pr(&set).ok(),
        auc_roc: auc_roc(&set).ok(),
        fpr95: fpr95(&set).ok(),
    })
}

fn grad_norm(g: &ModelGrad) -> f64 {
    g.params()
        .iter()
        .map(|p| p.value.matrix().frobenius_norm().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Trains a fresh model. `seed` fixes both the initialization and the data
/// order; the order stream does not depend on the head kind, so heads trained
/// with the same seed see identical batches.
pub fn train(
    kind: HeadKind,
    train_set: &[&CaseFeatures],
    val_set: &[&CaseFeatures],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let first = train_set.first().ok_or_else(|| Error::invalid("empty training set"))?;
    let dims = ModelDims::of(first);
    let mut model = Model::new(kind, dims, cfg, seed)?;
    let mut opt = OptimState::new(cfg.optim.clone());
    let mut order_rng = stream_rng(seed, STREAM_ORDER);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&CaseFeatures> = chunk.iter().map(|&i| train_set[i]).collect();
            let mut grads = model.zero_grad();
            let loss = batch_loss_and_grad(&model, cfg, &batch, &mut grads)
                .map_err(|e| nan_context(e, &model, &batch, epoch, bi))?;
            let gn = grad_norm(&grads);
            if !loss.is_finite() || !gn.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    diagnostics: diagnostics(&model, &batch, loss, gn),
                });
            }
            total += loss * batch.len() as f64;
            opt.apply(model.params_mut(), grads.params())?;
        }
        let validate = !val_set.is_empty() && (epoch % cfg.val_every == 0 || epoch == cfg.epochs);
        let (val_auc_pr, val_fpr95) = if validate {
            let m = evaluate(&model, val_set)?;
            (m.auc_pr, m.fpr95)
        } else {
            (None, None)
        };
        history.push(EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_auc_pr,
            val_fpr95,
        });
    }
    Ok(TrainOutput { model, history })
}

fn diagnostics(model: &Model, batch: &[&CaseFeatures], loss: f64, grad_norm: f64) -> String {
    let eigs: Vec<String> = batch
        .iter()
        .filter_map(|f| model.min_rectified_eigenvalue(f).map(|e| format!("{}={e:e}", f.id)))
        .collect();
    let per_param: Vec<String> = model
        .params()
        .iter()
        .map(|p| format!("{}={:e}", p.name, p.value.matrix().frobenius_norm()))
        .collect();
    format!(
        "loss={loss}, grad_norm={grad_norm:e}, min_eig[{}], param_norms[{}]",
        eigs.join(" "),
        per_param.join(" ")
    )
}

/// Wraps numerical failures inside a batch as a non-finite loss with context.
fn nan_context(e: Error, model: &Model, batch: &[&CaseFeatures], epoch: usize, bi: usize) -> Error {
    match e {
        Error::NotPositiveDefinite { .. } | Error::ConvergenceFailure { .. } => Error::NonFiniteLoss {
            epoch,
            batch: bi,
            diagnostics: format!("{e}; {}", diagnostics(model, batch, f64::NAN, f64::NAN)),
        },
        other => other,
    }
}

/// The classifier MLP at the end of any head.
pub fn head_mlp(model: &Model) -> &Mlp {
    match &model.head {
        Head::Geom(h) => &h.mlp,
        Head::Cls(h) => &h.mlp,
        Head::Gap(h) => &h.mlp,
    }
}
