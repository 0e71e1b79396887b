//! Losses, data splitting, synthetic data and the training loop.

mod data;
mod kfold;
mod losses;
mod synth;
mod train;

pub use data::{CaseFeatures, CaseInputs, CaseRecord, Embeddings, Encoders, SubTag, VolumeInputs};
pub use kfold::{stratified_kfold, stratified_subsample};
pub use losses::{
    bce_loss, infonce_loss, l2_normalize, l2_normalize_backward, sigmoid, InfoNceOutput, ProjectionCache,
    Projections,
};
pub use synth::{gen_synth, SynthConfig};
pub use train::{
    batch_loss_and_grad, derive_seed, evaluate, head_mlp, predict_all, score_metrics, stream_rng, train, EpochRecord,
    EvalMetrics, Head, HeadGrad, Model, ModelDims, ModelGrad, TrainConfig, TrainOutput,
};
