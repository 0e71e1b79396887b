//! Ranking metrics for imbalanced binary classification and the paired
//! Wilcoxon signed-rank test.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size for which the Wilcoxon p-value is computed exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 20;

/// Scores paired by index with {0,1} labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(Error::invalid(format!(
                "scores ({}) and labels ({}) must have equal non-zero length",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("non-finite score"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// `(positives, total)` per tie group, in descending score order.
    fn tie_groups(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap_or(Ordering::Equal));
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut prev = f64::NAN;
        for i in idx {
            if self.scores[i] != prev {
                groups.push((0, 0));
                prev = self.scores[i];
            }
            let g = groups.last_mut().expect("group pushed above");
            g.0 += usize::from(self.labels[i]);
            g.1 += 1;
        }
        groups
    }
}

/// Average precision with tied scores treated as one threshold.
pub fn auc_pr(s: &ScoredSet) -> Result<f64> {
    let p = s.positives();
    if p == 0 {
        return Err(Error::Undefined("AUC-PR needs at least one positive"));
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for (gp, gn) in s.tie_groups() {
        tp += gp;
        seen += gn;
        if gp > 0 {
            ap += gp as f64 / p as f64 * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Smallest FPR over thresholds whose TPR is at least 0.95.
pub fn fpr95(s: &ScoredSet) -> Result<f64> {
    let (p, n) = (s.positives(), s.negatives());
    if p == 0 || n == 0 {
        return Err(Error::Undefined("FPR95 needs positives and negatives"));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    for (gp, gn) in s.tie_groups() {
        tp += gp;
        fp += gn - gp;
        // TPR >= 0.95 in integer arithmetic; FPR only grows from here on.
        if 100 * tp >= 95 * p {
            return Ok(fp as f64 / n as f64);
        }
    }
    unreachable!("accept-all threshold always reaches TPR 1")
}

/// Mann-Whitney U over `n_pos * n_neg`, ties counted one half.
pub fn auc_roc(s: &ScoredSet) -> Result<f64> {
    let (p, n) = (s.positives(), s.negatives());
    if p == 0 || n == 0 {
        return Err(Error::Undefined("AUC-ROC needs positives and negatives"));
    }
    // Walk groups from the lowest score up.
    let mut negs_below = 0usize;
    let mut twice_u = 0usize;
    for (gp, gn) in s.tie_groups().into_iter().rev() {
        let gneg = gn - gp;
        twice_u += gp * (2 * negs_below + gneg);
        negs_below += gneg;
    }
    Ok(twice_u as f64 / (2.0 * p as f64 * n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Average ranks of `|d|`, 1-based, doubled so tied ranks stay integral.
fn doubled_ranks(abs: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..abs.len()).collect();
    idx.sort_by(|&a, &b| abs[a].partial_cmp(&abs[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0u64; abs.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && abs[idx[j + 1]] == abs[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, doubled
        let r2 = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            ranks[k] = r2;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(x, y, WILCOXON_EXACT_MAX_N)
}

/// As [`wilcoxon_signed_rank`], with the exact distribution used up to
/// `exact_max_n` non-zero differences (at most 60).
pub fn wilcoxon_signed_rank_with(x: &[f64], y: &[f64], exact_max_n: usize) -> Result<WilcoxonResult> {
    if exact_max_n > 60 {
        return Err(Error::invalid("exact Wilcoxon is limited to n <= 60"));
    }
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            context: "Wilcoxon pairs",
            expected: x.len(),
            got: y.len(),
        });
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite paired difference"));
    }
    if d.is_empty() {
        return Err(Error::DegeneratePairs);
    }
    let n = d.len();
    if n < 5 {
        return Err(Error::invalid(format!("Wilcoxon needs at least 5 non-zero differences, got {n}")));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (r2, ties) = doubled_ranks(&abs);
    let w_plus2: u64 = d.iter().zip(&r2).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total2: u64 = r2.iter().sum();
    let stat2 = w_plus2.min(total2 - w_plus2);
    let statistic = stat2 as f64 / 2.0;

    if n <= exact_max_n {
        // counts[s] = number of sign assignments whose doubled positive-rank sum is s
        let mut counts = vec![0u64; total2 as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &r2 {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] > 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let tail: u64 = counts[..=stat2 as usize].iter().sum();
        let p = (2.0 * tail as f64 / (1u64 << n) as f64).min(1.0);
        return Ok(WilcoxonResult {
            statistic,
            p_value: p,
            n,
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * normal.sf(z)).min(1.0);
    Ok(WilcoxonResult {
        statistic,
        p_value: p,
        n,
        exact: false,
    })
}
