//! Training-fraction sweep over k folds with paired head comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{wilcoxon_signed_rank, WilcoxonResult};
use crate::spdnet::HeadKind;
use crate::trainer::{
    derive_seed, predict_all, score_metrics, stratified_subsample, train, CaseFeatures, EvalMetrics, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub fractions: Vec<f64>,
    /// The first head is the reference of every Wilcoxon comparison.
    pub heads: Vec<HeadKind>,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            heads: vec![HeadKind::Geom, HeadKind::Cls, HeadKind::Gap],
            seed: 7,
            train: TrainConfig {
                epochs: 10,
                val_every: usize::MAX,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fraction: f64,
    pub head: HeadKind,
    pub fold: usize,
    pub n_train: usize,
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: HeadKind,
    pub result: WilcoxonResult,
}

/// Metrics of the out-of-fold predictions pooled over all folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledResult {
    pub fraction: f64,
    pub head: HeadKind,
    pub metrics: EvalMetrics,
    /// Mean of the per-fold AUC-PR values.
    pub fold_mean_auc_pr: Option<f64>,
    /// Paired test of the probability given to the true class, this head
    /// against the reference head, case by case.
    pub comparison: Option<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub folds: Vec<FoldResult>,
    pub pooled: Vec<PooledResult>,
    pub prevalence: f64,
}

impl BenchResult {
    pub fn pooled_for(&self, fraction: f64, head: HeadKind) -> Option<&PooledResult> {
        self.pooled.iter().find(|p| p.fraction == fraction && p.head == head)
    }
}

/// Runs every (fraction, fold, head) combination. `folds[i]` is the fold of
/// case `i`. All heads of a fold share the training subset and the training
/// seed, hence the batch order.
pub fn run_bench(
    cases: &[CaseFeatures],
    folds: &[usize],
    cfg: &BenchConfig,
    mut progress: impl FnMut(&FoldResult),
) -> Result<BenchResult> {
    if cases.len() != folds.len() || cases.is_empty() {
        return Err(Error::invalid("every case needs a fold assignment"));
    }
    if cfg.heads.is_empty() || cfg.fractions.is_empty() {
        return Err(Error::invalid("bench needs at least one head and one fraction"));
    }
    let k = folds.iter().max().map_or(0, |m| m + 1);
    let strata: Vec<_> = cases.iter().map(|c| (c.label, c.subtag)).collect();
    let labels: Vec<u8> = cases.iter().map(|c| c.label).collect();
    let mut fold_results = Vec::new();
    let mut pooled = Vec::new();

    for (fi, &fraction) in cfg.fractions.iter().enumerate() {
        // oof[h][i]: out-of-fold probability of case i under head h
        let mut oof = vec![vec![f64::NAN; cases.len()]; cfg.heads.len()];
        let mut per_fold_ap: Vec<Vec<f64>> = vec![Vec::new(); cfg.heads.len()];
        for fold in 0..k {
            let held: Vec<usize> = (0..cases.len()).filter(|&i| folds[i] == fold).collect();
            let pool: Vec<usize> = (0..cases.len()).filter(|&i| folds[i] != fold).collect();
            if held.is_empty() || pool.is_empty() {
                return Err(Error::invalid(format!("fold {fold} is empty or covers every case")));
            }
            let sub_seed = derive_seed(cfg.seed, 1_000 + (fold as u64) * 100 + fi as u64);
            let train_idx = stratified_subsample(&pool, &strata, fraction, sub_seed)?;
            let train_set: Vec<&CaseFeatures> = train_idx.iter().map(|&i| &cases[i]).collect();
            let eval_set: Vec<&CaseFeatures> = held.iter().map(|&i| &cases[i]).collect();
            let train_seed = derive_seed(cfg.seed, fold as u64);
            for (hi, &head) in cfg.heads.iter().enumerate() {
                let out = train(head, &train_set, &[], &cfg.train, train_seed)?;
                let probs = predict_all(&out.model, &eval_set)?;
                for (&i, &p) in held.iter().zip(&probs) {
                    oof[hi][i] = p;
                }
                let metrics = score_metrics(probs, held.iter().map(|&i| labels[i]).collect())?;
                if let Some(ap) = metrics.auc_pr {
                    per_fold_ap[hi].push(ap);
                }
                let r = FoldResult {
                    fraction,
                    head,
                    fold,
                    n_train: train_idx.len(),
                    metrics,
                };
                progress(&r);
                fold_results.push(r);
            }
        }
        let p_true = |h: usize| -> Vec<f64> {
            oof[h]
                .iter()
                .zip(&labels)
                .map(|(&p, &y)| if y == 1 { p } else { 1.0 - p })
                .collect()
        };
        let reference = p_true(0);
        for (hi, &head) in cfg.heads.iter().enumerate() {
            let comparison = if hi == 0 {
                None
            } else {
                match wilcoxon_signed_rank(&reference, &p_true(hi)) {
                    Ok(result) => Some(Comparison {
                        reference: cfg.heads[0],
                        result,
                    }),
                    Err(Error::DegeneratePairs) => None,
                    Err(e) => return Err(e),
                }
            };
            let aps = &per_fold_ap[hi];
            pooled.push(PooledResult {
                fraction,
                head,
                metrics: score_metrics(oof[hi].clone(), labels.clone())?,
                fold_mean_auc_pr: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
                comparison,
            });
        }
    }
    let prevalence = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
    Ok(BenchResult {
        folds: fold_results,
        pooled,
        prevalence,
    })
}
