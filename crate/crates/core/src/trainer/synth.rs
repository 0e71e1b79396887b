//! Synthetic multimodal embedding datasets with a planted cross-modal signal.
//!
//! Class-0 tokens are i.i.d. `N(0, sigma^2)`. In a class-1 case a latent
//! `u ~ N(0, I_d)` is shared by a few central patches of every imaging branch
//! and by the PSAD and zone slots of the text branch, each planted token being
//! `sqrt(1 - rho^2) noise + rho u`. Class tokens of class-1 cases carry only
//! `rho / 4` of the latent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::data::{CaseInputs, CaseRecord, Embeddings, SubTag};
use super::kfold::stratified_kfold;
use crate::descriptor::{EmbeddingSequence, Modality};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::report::{ClinicalVars, PSAD_SLOT, ZONE_SLOT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_cases: usize,
    /// Fraction of class-1 cases.
    pub positive_fraction: f64,
    /// Share of class-1 cases in the high-malignancy group.
    pub hm_fraction: f64,
    pub rho: f64,
    pub sigma: f64,
    pub seed: u64,
    /// `N_I`, patch tokens per imaging branch.
    pub n_patches: usize,
    /// `N_T`, text tokens including the class token.
    pub text_len: usize,
    pub d: usize,
    /// Planted patches per imaging branch, nearest the grid center.
    pub planted_patches: usize,
    pub folds: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 600,
            positive_fraction: 0.33,
            hm_fraction: 84.0 / 415.0,
            rho: 0.8,
            sigma: 1.0,
            seed: 7,
            n_patches: 16,
            text_len: 32,
            d: 64,
            planted_patches: 4,
            folds: 5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) || !(0.0..=1.0).contains(&self.hm_fraction) {
            return Err(Error::invalid("class fractions must lie in [0, 1]"));
        }
        if self.d == 0 || self.n_patches == 0 || self.planted_patches > self.n_patches {
            return Err(Error::InvalidShape("need d, N_I > 0 and planted patches <= N_I".into()));
        }
        if self.text_len <= ZONE_SLOT.max(PSAD_SLOT) + 1 {
            return Err(Error::InvalidShape(format!(
                "text length {} does not reach the planted report slots",
                self.text_len
            )));
        }
        if self.n_cases < self.folds.max(2) {
            return Err(Error::invalid("too few cases for the fold count"));
        }
        Ok(())
    }

    /// Sequence indices (class token at 0) of the planted imaging patches.
    pub fn planted_patch_indices(&self) -> Vec<usize> {
        let side = (self.n_patches as f64).sqrt().round() as usize;
        let (rows, cols) = if side * side == self.n_patches {
            (side, side)
        } else {
            (1, self.n_patches)
        };
        let cy = (rows as f64 - 1.0) / 2.0;
        let cx = (cols as f64 - 1.0) / 2.0;
        let mut idx: Vec<usize> = (0..self.n_patches).collect();
        let dist = |i: usize| ((i / cols) as f64 - cy).powi(2) + ((i % cols) as f64 - cx).powi(2);
        idx.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        let mut out: Vec<usize> = idx[..self.planted_patches].iter().map(|i| i + 1).collect();
        out.sort_unstable();
        out
    }

    /// Sequence indices of the planted text tokens.
    pub fn planted_text_indices(&self) -> Vec<usize> {
        vec![PSAD_SLOT + 1, ZONE_SLOT + 1]
    }
}

/// Rounds to 32-bit precision so in-memory data matches what the binary
/// embedding files hold.
fn to_f32_grid(m: &mut Matrix) {
    for v in m.data_mut() {
        *v = f64::from(*v as f32);
    }
}

fn plant(tokens: &mut Matrix, rows: &[usize], u: &[f64], weight: f64) {
    let keep = (1.0 - weight * weight).sqrt();
    for &r in rows {
        for (t, ui) in tokens.row_mut(r).iter_mut().zip(u) {
            *t = keep * *t + weight * ui;
        }
    }
}

fn synth_clinical<R: Rng + ?Sized>(rng: &mut R) -> ClinicalVars {
    let psa: f64 = LogNormal::new(8f64.ln(), 0.6).expect("valid lognormal").sample(rng);
    let pv: f64 = rng.random_range(20.0..100.0);
    let r2 = |x: f64| (x * 100.0).round() / 100.0;
    ClinicalVars {
        age: Some(rng.random_range(45.0f64..80.0).round()),
        psa: Some(r2(psa)),
        psad: Some(r2(psa / pv)),
        pv: Some(r2(pv)),
    }
}

pub fn gen_synth(cfg: &SynthConfig) -> Result<Vec<CaseRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_pos = (cfg.n_cases as f64 * cfg.positive_fraction).round() as usize;
    let n_hm = (n_pos as f64 * cfg.hm_fraction).round() as usize;
    let mut labels: Vec<(u8, Option<SubTag>)> = (0..cfg.n_cases)
        .map(|i| match i {
            i if i < n_hm => (1, Some(SubTag::Hm)),
            i if i < n_pos => (1, Some(SubTag::Im)),
            _ => (0, None),
        })
        .collect();
    labels.shuffle(&mut rng);

    let planted_img = cfg.planted_patch_indices();
    let planted_txt = cfg.planted_text_indices();
    let mut cases = Vec::with_capacity(cfg.n_cases);
    for (i, &(label, subtag)) in labels.iter().enumerate() {
        let u = Matrix::randn(1, cfg.d, 1.0, &mut rng).into_data();
        let mut seqs = Vec::with_capacity(4);
        for modality in Modality::ALL {
            let len = if modality == Modality::Text {
                cfg.text_len
            } else {
                cfg.n_patches + 1
            };
            let mut tokens = Matrix::randn(len, cfg.d, cfg.sigma, &mut rng);
            if label == 1 {
                let rows = if modality == Modality::Text {
                    &planted_txt
                } else {
                    &planted_img
                };
                plant(&mut tokens, rows, &u, cfg.rho);
                plant(&mut tokens, &[0], &u, cfg.rho / 4.0);
            }
            to_f32_grid(&mut tokens);
            seqs.push(EmbeddingSequence::new(tokens, modality, Some(0))?);
        }
        let clinical = synth_clinical(&mut rng);
        let text = seqs.pop();
        let dwi = seqs.pop().expect("four sequences");
        let adc = seqs.pop().expect("four sequences");
        let t2w = seqs.pop().expect("four sequences");
        cases.push(CaseRecord {
            id: format!("case{i:04}"),
            label,
            subtag,
            inputs: CaseInputs::Embeddings(Embeddings { t2w, adc, dwi, text }),
            clinical: Some(clinical),
            fold: None,
        });
    }
    let strata: Vec<_> = cases.iter().map(CaseRecord::stratum).collect();
    let folds = stratified_kfold(&strata, cfg.folds, cfg.seed)?;
    for (c, f) in cases.iter_mut().zip(folds) {
        c.fold = Some(f);
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{concat_multimodal, spd_descriptor};

    fn small(rho: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_cases: 40,
            rho,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn planted_indices() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.planted_patch_indices(), vec![6, 7, 10, 11]);
        assert_eq!(cfg.planted_text_indices(), vec![9, 21]);
    }

    #[test]
    fn shapes_labels_and_folds() {
        let cases = gen_synth(&small(0.8, 1)).unwrap();
        assert_eq!(cases.len(), 40);
        assert_eq!(cases.iter().filter(|c| c.label == 1).count(), 13);
        let CaseInputs::Embeddings(e) = &cases[0].inputs else {
            panic!("embedding case expected")
        };
        let m = concat_multimodal(&e.t2w, &e.adc, &e.dwi, e.text.as_ref().unwrap()).unwrap();
        assert_eq!((m.n(), m.dim()), (79, 64));
        assert!(cases.iter().all(|c| c.fold.is_some_and(|f| f < 5)));
        assert!(cases.iter().all(|c| (c.label == 1) == c.subtag.is_some()));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = gen_synth(&small(0.5, 3)).unwrap();
        assert_eq!(a, gen_synth(&small(0.5, 3)).unwrap());
        assert_ne!(a, gen_synth(&small(0.5, 4)).unwrap());
    }

    #[test]
    fn invalid_configs() {
        assert!(gen_synth(&SynthConfig {
            rho: 1.5,
            ..small(0.0, 0)
        })
        .is_err());
        assert!(gen_synth(&SynthConfig {
            sigma: 0.0,
            ..small(0.0, 0)
        })
        .is_err());
    }

    /// Planted-pair descriptor entries average `rho^2 E|u|^2 / d^2 = rho^2 / d`;
    /// unplanted pairs average zero.
    #[test]
    fn planted_block_covariance() {
        let cfg = SynthConfig {
            n_cases: 3000,
            positive_fraction: 1.0,
            rho: 1.0,
            sigma: 0.05,
            d: 16,
            ..SynthConfig::default()
        };
        let cases = gen_synth(&cfg).unwrap();
        // rows 5 and 6 are the second and third planted T2W patches (content order)
        let (mut planted, mut free) = (0.0, 0.0);
        for c in &cases {
            let CaseInputs::Embeddings(e) = &c.inputs else { unreachable!() };
            let s = spd_descriptor(&concat_multimodal(&e.t2w, &e.adc, &e.dwi, e.text.as_ref().unwrap()).unwrap(), 0.0)
                .unwrap();
            planted += s.get(5, 6);
            free += s.get(0, 1);
        }
        let n = cases.len() as f64;
        let expect = 1.0 / 16.0;
        // per-case sd of u.u / d^2 is sqrt(2 d) / d^2
        let tol = 4.0 * (32f64).sqrt() / 256.0 / n.sqrt();
        assert!((planted / n - expect).abs() < tol, "{}", planted / n);
        assert!((free / n).abs() < tol);
    }
}
