//! Multimodal token sequences and the Gram-style SPD descriptor built from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SymMatrix};

/// Default diagonal jitter added to the descriptor.
pub const DEFAULT_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T2w,
    Adc,
    Dwi,
    Text,
}

impl Modality {
    pub const IMAGING: [Modality; 3] = [Modality::T2w, Modality::Adc, Modality::Dwi];
    pub const ALL: [Modality; 4] = [Modality::T2w, Modality::Adc, Modality::Dwi, Modality::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::T2w => "t2w",
            Modality::Adc => "adc",
            Modality::Dwi => "dwi",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t2w" => Ok(Modality::T2w),
            "adc" => Ok(Modality::Adc),
            "dwi" => Ok(Modality::Dwi),
            "text" => Ok(Modality::Text),
            other => Err(Error::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

/// Output tokens of one encoder branch; row `i` of `tokens` is token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    tokens: Matrix,
    modality: Modality,
    class_index: Option<usize>,
}

impl EmbeddingSequence {
    pub fn new(tokens: Matrix, modality: Modality, class_index: Option<usize>) -> Result<Self> {
        if tokens.cols() == 0 {
            return Err(Error::invalid("embedding dimension must be >= 1"));
        }
        if tokens.rows() == 0 {
            return Err(Error::invalid(format!("{modality} sequence is empty")));
        }
        if let Some(c) = class_index {
            if c >= tokens.rows() {
                return Err(Error::invalid(format!(
                    "class index {c} out of range for {} tokens",
                    tokens.rows()
                )));
            }
        }
        Ok(Self {
            tokens,
            modality,
            class_index,
        })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn class_index(&self) -> Option<usize> {
        self.class_index
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn class_token(&self) -> Option<&[f64]> {
        self.class_index.map(|c| self.tokens.row(c))
    }

    /// Rows other than the class token, in order.
    pub fn content_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.len())
            .filter(move |&i| Some(i) != self.class_index)
            .map(move |i| self.tokens.row(i))
    }

    pub fn content_len(&self) -> usize {
        self.len() - usize::from(self.class_index.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub modality: Modality,
    pub offset: usize,
    pub len: usize,
}

/// Stacked non-class tokens of several branches.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalMatrix {
    m: Matrix,
    spans: Vec<Span>,
}

impl MultimodalMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn n(&self) -> usize {
        self.m.rows()
    }

    pub fn dim(&self) -> usize {
        self.m.cols()
    }

    pub fn span(&self, modality: Modality) -> Option<Span> {
        self.spans.iter().copied().find(|s| s.modality == modality)
    }

    /// Rows belonging to the imaging modalities, in order.
    pub fn imaging_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.spans
            .iter()
            .filter(|s| s.modality != Modality::Text)
            .flat_map(move |s| (s.offset..s.offset + s.len).map(move |i| self.m.row(i)))
    }
}

/// Stacks the non-class tokens of `seqs` in the given order.
pub fn stack_content(seqs: &[&EmbeddingSequence]) -> Result<MultimodalMatrix> {
    let first = seqs.first().ok_or_else(|| Error::invalid("no sequences to stack"))?;
    let d = first.dim();
    for s in seqs {
        if s.dim() != d {
            return Err(Error::DimMismatch {
                context: "multimodal concatenation",
                expected: d,
                got: s.dim(),
            });
        }
        if s.content_len() == 0 {
            return Err(Error::invalid(format!("{} sequence has no content tokens", s.modality())));
        }
    }
    let n: usize = seqs.iter().map(|s| s.content_len()).sum();
    let mut data = Vec::with_capacity(n * d);
    let mut spans = Vec::with_capacity(seqs.len());
    let mut offset = 0;
    for s in seqs {
        for row in s.content_rows() {
            data.extend_from_slice(row);
        }
        spans.push(Span {
            modality: s.modality(),
            offset,
            len: s.content_len(),
        });
        offset += s.content_len();
    }
    Ok(MultimodalMatrix {
        m: Matrix::new(n, d, data)?,
        spans,
    })
}

/// Rows ordered T2W patches, ADC patches, DWI patches, text tokens, with every
/// class token dropped: `3 N_I + N_T - 1` rows.
pub fn concat_multimodal(
    t2w: &EmbeddingSequence,
    adc: &EmbeddingSequence,
    dwi: &EmbeddingSequence,
    text: &EmbeddingSequence,
) -> Result<MultimodalMatrix> {
    stack_content(&[t2w, adc, dwi, text])
}

/// Imaging-only variant: `3 N_I` rows.
pub fn concat_imaging(
    t2w: &EmbeddingSequence,
    adc: &EmbeddingSequence,
    dwi: &EmbeddingSequence,
) -> Result<MultimodalMatrix> {
    stack_content(&[t2w, adc, dwi])
}

/// `M M^T / d^2 + jitter * I`.
pub fn spd_descriptor(m: &MultimodalMatrix, jitter: f64) -> Result<SymMatrix> {
    gram_descriptor(m.matrix(), jitter)
}

pub fn gram_descriptor(m: &Matrix, jitter: f64) -> Result<SymMatrix> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::invalid("descriptor needs N >= 1 and d >= 1"));
    }
    if !m.is_finite() {
        return Err(Error::invalid("non-finite token embedding"));
    }
    let d = m.cols() as f64;
    let mut g = m.matmul_nt(m);
    g.scale_assign(1.0 / (d * d));
    for i in 0..g.rows() {
        g[(i, i)] += jitter;
    }
    SymMatrix::from_matrix(&g)
}
