//! In-memory cases and the per-case features each head consumes.

use serde::{Deserialize, Serialize};

use crate::descriptor::{concat_imaging, concat_multimodal, spd_descriptor, EmbeddingSequence, MultimodalMatrix};
use super::train::stream_rng;
use crate::encoder::{EncoderConfig, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::report::{build_report, sphere_zone_fractions, ClinicalVars, Vocabulary, ZoneFractions, DEFAULT_RADIUS_MM};
use crate::volume::Volume;

/// Malignancy group of a positive case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SubTag {
    Im,
    Hm,
}

/// Token embeddings of one case, class token at index 0 of every sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub t2w: EmbeddingSequence,
    pub adc: EmbeddingSequence,
    pub dwi: EmbeddingSequence,
    pub text: Option<EmbeddingSequence>,
}

impl Embeddings {
    pub fn imaging(&self) -> [&EmbeddingSequence; 3] {
        [&self.t2w, &self.adc, &self.dwi]
    }
}

/// Raw inputs for the toy encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeInputs {
    pub t2w: Volume,
    pub adc: Volume,
    pub dwi: Volume,
    pub pz_mask: Option<Volume>,
    pub cz_mask: Option<Volume>,
    pub centroid_mm: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CaseInputs {
    Embeddings(Embeddings),
    Volumes(Box<VolumeInputs>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    /// 1 for clinically significant cancer.
    pub label: u8,
    pub subtag: Option<SubTag>,
    pub inputs: CaseInputs,
    pub clinical: Option<ClinicalVars>,
    pub fold: Option<usize>,
}

impl CaseRecord {
    /// Stratum key used by the k-fold split.
    pub fn stratum(&self) -> (u8, Option<SubTag>) {
        (self.label, self.subtag)
    }
}

/// The frozen encoders plus the vocabulary used for the text branch.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub vocab: Vocabulary,
}

impl Encoders {
    /// Frozen encoders drawn from `seed`: image weights from stream 0, text from stream 1.
    pub fn new(cfg: &EncoderConfig, seed: u64, vocab: Vocabulary) -> Result<Self> {
        let image = ImageEncoder::new(cfg, &mut stream_rng(seed, 0))?;
        let text = TextEncoder::new(cfg, vocab.len(), vocab.pad_id(), &mut stream_rng(seed, 1))?;
        Ok(Self { image, text, vocab })
    }

    /// Report text for a volume case: zone fractions from the masks when
    /// present, otherwise a peripheral-zone default.
    pub fn report_for(&self, v: &VolumeInputs, clinical: &ClinicalVars) -> Result<String> {
        let zf = match (&v.pz_mask, &v.cz_mask, v.centroid_mm) {
            (Some(pz), Some(cz), Some(c)) => sphere_zone_fractions(c, DEFAULT_RADIUS_MM, pz, cz)?,
            _ => ZoneFractions {
                p_pz: 1.0,
                p_cz: 0.0,
                p_out: 0.0,
            },
        };
        Ok(build_report(clinical, &zf))
    }

    pub fn embed(&self, v: &VolumeInputs, clinical: Option<&ClinicalVars>) -> Result<Embeddings> {
        use crate::descriptor::Modality;
        let text = match clinical {
            Some(c) => {
                let ids = self.vocab.tokenize(&self.report_for(v, c)?);
                Some(self.text.encode(&ids)?)
            }
            None => None,
        };
        Ok(Embeddings {
            t2w: self.image.encode(&v.t2w, Modality::T2w)?,
            adc: self.image.encode(&v.adc, Modality::Adc)?,
            dwi: self.image.encode(&v.dwi, Modality::Dwi)?,
            text,
        })
    }
}

/// Precomputed head inputs for one case. Encoders are frozen, so these are
/// computed once per dataset.
#[derive(Debug, Clone)]
pub struct CaseFeatures {
    pub id: String,
    pub label: u8,
    pub subtag: Option<SubTag>,
    /// Geometric descriptor.
    pub s0: SymMatrix,
    /// Content tokens in descriptor row order, pooled by the GAP head.
    pub tokens: MultimodalMatrix,
    /// Concatenated imaging class tokens.
    pub image_cls: Vec<f64>,
    pub text_cls: Option<Vec<f64>>,
}

impl CaseFeatures {
    /// `multimodal` includes the text branch; it requires text embeddings.
    pub fn from_embeddings(
        id: &str,
        label: u8,
        subtag: Option<SubTag>,
        e: &Embeddings,
        multimodal: bool,
        jitter: f64,
    ) -> Result<Self> {
        let tokens = if multimodal {
            let text = e
                .text
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("case {id} has no text embeddings")))?;
            concat_multimodal(&e.t2w, &e.adc, &e.dwi, text)?
        } else {
            concat_imaging(&e.t2w, &e.adc, &e.dwi)?
        };
        let mut image_cls = Vec::with_capacity(3 * e.t2w.dim());
        for s in e.imaging() {
            image_cls.extend_from_slice(
                s.class_token()
                    .ok_or_else(|| Error::invalid(format!("case {id}: {} has no class token", s.modality())))?,
            );
        }
        let text_cls = if multimodal {
            e.text.as_ref().and_then(|t| t.class_token()).map(<[f64]>::to_vec)
        } else {
            None
        };
        if multimodal && text_cls.is_none() {
            return Err(Error::invalid(format!("case {id}: text sequence has no class token")));
        }
        Ok(Self {
            id: id.to_string(),
            label,
            subtag,
            s0: spd_descriptor(&tokens, jitter)?,
            tokens,
            image_cls,
            text_cls,
        })
    }

    /// Input of the class-token head: imaging class tokens, then the text one.
    pub fn cls_input(&self) -> Vec<f64> {
        let mut v = self.image_cls.clone();
        if let Some(t) = &self.text_cls {
            v.extend_from_slice(t);
        }
        v
    }

    pub fn n(&self) -> usize {
        self.s0.n()
    }

    pub fn dim(&self) -> usize {
        self.tokens.dim()
    }
}
