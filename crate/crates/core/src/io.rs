//! Binary and text file formats: embedding sequences, raw grids, the
//! dataset manifest, and model checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::descriptor::{EmbeddingSequence, Modality};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::optim::{ParamValueMut, Parameterized, StiefelParam};
use crate::report::ClinicalVars;
use crate::spdnet::HeadKind;
use crate::trainer::{
    CaseInputs, CaseRecord, Embeddings, Encoders, Model, ModelDims, SubTag, TrainConfig, VolumeInputs,
};
use crate::volume::{GridHeader, Volume};

pub const ESEQ_MAGIC: &[u8; 4] = b"ESQ1";
pub const ESEQ_VERSION: u32 = 1;
pub const CKPT_MAGIC: &[u8; 4] = b"SPDG";
pub const CKPT_VERSION: u32 = 1;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Splits `magic | u32 LE length | JSON header | payload` and returns the
/// header bytes and the payload offset.
fn split_framed<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(&'a [u8], usize)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(parse_err(0, format!("expected magic {:?}", String::from_utf8_lossy(magic))));
    }
    if bytes.len() < 8 {
        return Err(parse_err(4, "truncated header length"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
    let end = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse_err(8, format!("header of {hlen} bytes runs past end of file ({} bytes)", bytes.len())))?;
    Ok((&bytes[8..end], end))
}

fn framed(magic: &[u8; 4], header: &[u8], payload: &[u8]) -> Result<Vec<u8>> {
    let hlen = u32::try_from(header.len()).map_err(|_| Error::invalid("header too large"))?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&hlen.to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EseqHeader {
    pub version: u32,
    pub n_tokens: usize,
    pub dim: usize,
    pub dtype: String,
    pub modality: Modality,
    pub class_token_index: Option<usize>,
}

pub fn encode_eseq(seq: &EmbeddingSequence) -> Result<Vec<u8>> {
    let header = EseqHeader {
        version: ESEQ_VERSION,
        n_tokens: seq.len(),
        dim: seq.dim(),
        dtype: "f32le".into(),
        modality: seq.modality(),
        class_token_index: seq.class_index(),
    };
    let payload: Vec<u8> = seq
        .tokens()
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    framed(ESEQ_MAGIC, &serde_json::to_vec(&header)?, &payload)
}

pub fn decode_eseq(bytes: &[u8]) -> Result<EmbeddingSequence> {
    let (hbytes, start) = split_framed(bytes, ESEQ_MAGIC)?;
    let h: EseqHeader = serde_json::from_slice(hbytes).map_err(|e| parse_err(8, format!("bad header JSON: {e}")))?;
    if h.version != ESEQ_VERSION {
        return Err(parse_err(8, format!("unsupported version {}", h.version)));
    }
    if h.dtype != "f32le" {
        return Err(parse_err(8, format!("unsupported dtype `{}`", h.dtype)));
    }
    if h.n_tokens == 0 || h.dim == 0 {
        return Err(parse_err(8, format!("empty shape {}x{}", h.n_tokens, h.dim)));
    }
    let need = h
        .n_tokens
        .checked_mul(h.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| parse_err(8, "payload size overflows"))?;
    let have = bytes.len() - start;
    if have < need {
        return Err(parse_err(
            bytes.len(),
            format!("payload truncated: expected {need} bytes from offset {start}, found {have}"),
        ));
    }
    if have > need {
        return Err(parse_err(start + need, format!("{} trailing bytes after payload", have - need)));
    }
    let data: Vec<f64> = bytes[start..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))))
        .collect();
    EmbeddingSequence::new(Matrix::new(h.n_tokens, h.dim, data)?, h.modality, h.class_token_index)
}

pub fn write_eseq(path: &Path, seq: &EmbeddingSequence) -> Result<()> {
    fs::write(path, encode_eseq(seq)?)?;
    Ok(())
}

pub fn read_eseq(path: &Path) -> Result<EmbeddingSequence> {
    decode_eseq(&fs::read(path)?)
}

/// Sidecar path of a raw grid: the same path with a `.json` extension.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Writes 32-bit little-endian voxels plus the JSON sidecar.
pub fn write_volume(raw: &Path, vol: &Volume) -> Result<()> {
    let bytes: Vec<u8> = vol.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(raw, bytes)?;
    fs::write(sidecar_path(raw), serde_json::to_vec(vol.header())?)?;
    Ok(())
}

pub fn read_volume(raw: &Path) -> Result<Volume> {
    let header: GridHeader = serde_json::from_slice(&fs::read(sidecar_path(raw))?)?;
    header.validate()?;
    let bytes = fs::read(raw)?;
    let need = header.voxels() * 4;
    if bytes.len() != need {
        return Err(parse_err(
            bytes.len().min(need),
            format!("raw grid has {} bytes, sidecar implies {need}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))))
        .collect();
    Volume::new(header, data)
}

/// File paths of one case, relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputPaths {
    Embeddings {
        t2w: PathBuf,
        adc: PathBuf,
        dwi: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<PathBuf>,
    },
    Volumes {
        t2w: PathBuf,
        adc: PathBuf,
        dwi: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pz_mask: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cz_mask: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        centroid_mm: Option<[f64; 3]>,
    },
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtag: Option<SubTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clinical: Option<ClinicalVars>,
    pub inputs: InputPaths,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let e: ManifestEntry = serde_json::from_str(trimmed)
                .map_err(|err| parse_err(offset, format!("manifest line: {err}")))?;
            if e.label > 1 {
                return Err(parse_err(offset, format!("case {} has label {}", e.id, e.label)));
            }
            out.push(e);
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Loads every file a manifest entry points to.
pub fn load_case(entry: &ManifestEntry, base: &Path) -> Result<CaseRecord> {
    let inputs = match &entry.inputs {
        InputPaths::Embeddings { t2w, adc, dwi, text } => CaseInputs::Embeddings(Embeddings {
            t2w: read_eseq(&base.join(t2w))?,
            adc: read_eseq(&base.join(adc))?,
            dwi: read_eseq(&base.join(dwi))?,
            text: text.as_ref().map(|p| read_eseq(&base.join(p))).transpose()?,
        }),
        InputPaths::Volumes {
            t2w,
            adc,
            dwi,
            pz_mask,
            cz_mask,
            centroid_mm,
        } => CaseInputs::Volumes(Box::new(VolumeInputs {
            t2w: read_volume(&base.join(t2w))?,
            adc: read_volume(&base.join(adc))?,
            dwi: read_volume(&base.join(dwi))?,
            pz_mask: pz_mask.as_ref().map(|p| read_volume(&base.join(p))).transpose()?,
            cz_mask: cz_mask.as_ref().map(|p| read_volume(&base.join(p))).transpose()?,
            centroid_mm: *centroid_mm,
        })),
    };
    Ok(CaseRecord {
        id: entry.id.clone(),
        label: entry.label,
        subtag: entry.subtag,
        inputs,
        clinical: entry.clinical,
        fold: entry.fold,
    })
}

/// Reads a manifest and every case it lists.
pub fn load_dataset(manifest: &Path) -> Result<Vec<CaseRecord>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?.iter().map(|e| load_case(e, base)).collect()
}

/// Writes embedding cases as ESEQ files under `dir/emb/` plus `dir/manifest.jsonl`.
pub fn write_dataset(dir: &Path, cases: &[CaseRecord]) -> Result<PathBuf> {
    let emb = dir.join("emb");
    fs::create_dir_all(&emb)?;
    let mut entries = Vec::with_capacity(cases.len());
    for c in cases {
        let CaseInputs::Embeddings(e) = &c.inputs else {
            return Err(Error::invalid(format!("case {} has no embeddings to write", c.id)));
        };
        let rel = |m: &str, s: &EmbeddingSequence| -> Result<PathBuf> {
            let r = PathBuf::from("emb").join(format!("{}_{m}.eseq", c.id));
            write_eseq(&dir.join(&r), s)?;
            Ok(r)
        };
        let inputs = InputPaths::Embeddings {
            t2w: rel("t2w", &e.t2w)?,
            adc: rel("adc", &e.adc)?,
            dwi: rel("dwi", &e.dwi)?,
            text: e.text.as_ref().map(|t| rel("text", t)).transpose()?,
        };
        entries.push(ManifestEntry {
            id: c.id.clone(),
            label: c.label,
            subtag: c.subtag,
            fold: c.fold,
            clinical: c.clinical,
            inputs,
        });
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &entries)?;
    Ok(path)
}

/// Embeddings of a case, running the frozen encoders for volume inputs.
pub fn case_embeddings(case: &CaseRecord, encoders: &Encoders) -> Result<Embeddings> {
    match &case.inputs {
        CaseInputs::Embeddings(e) => Ok(e.clone()),
        CaseInputs::Volumes(v) => encoders.embed(v, case.clinical.as_ref()),
    }
}

/// Hex SHA-256 of the canonical JSON form of a training config.
pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(cfg)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub stiefel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub head: HeadKind,
    pub dims: ModelDims,
    pub seed: u64,
    pub fold: Option<usize>,
    pub config_hash: String,
    pub config: TrainConfig,
    pub params: Vec<ParamSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

pub fn encode_checkpoint(model: &Model, cfg: &TrainConfig, seed: u64, fold: Option<usize>) -> Result<Vec<u8>> {
    let params = model.params();
    let header = CheckpointHeader {
        version: CKPT_VERSION,
        head: model.kind,
        dims: model.dims,
        seed,
        fold,
        config_hash: config_hash(cfg)?,
        config: cfg.clone(),
        params: params
            .iter()
            .map(|p| {
                let m = p.value.matrix();
                ParamSpec {
                    name: p.name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                    stiefel: matches!(p.value, crate::optim::ParamValue::Stiefel(_)),
                }
            })
            .collect(),
    };
    let payload: Vec<u8> = params
        .iter()
        .flat_map(|p| p.value.matrix().data().iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    framed(CKPT_MAGIC, &serde_json::to_vec(&header)?, &payload)
}

/// Parses a checkpoint. When `expected` is given its hash must match the
/// stored one; the stored config must always match its own hash.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&TrainConfig>) -> Result<Checkpoint> {
    let (hbytes, start) = split_framed(bytes, CKPT_MAGIC)?;
    let header: CheckpointHeader =
        serde_json::from_slice(hbytes).map_err(|e| parse_err(8, format!("bad header JSON: {e}")))?;
    if header.version != CKPT_VERSION {
        return Err(parse_err(8, format!("unsupported checkpoint version {}", header.version)));
    }
    let stored_hash = config_hash(&header.config)?;
    if stored_hash != header.config_hash {
        return Err(Error::ConfigHashMismatch {
            stored: header.config_hash.clone(),
            expected: stored_hash,
        });
    }
    if let Some(cfg) = expected {
        let want = config_hash(cfg)?;
        if want != header.config_hash {
            return Err(Error::ConfigHashMismatch {
                stored: header.config_hash.clone(),
                expected: want,
            });
        }
    }
    let mut model = Model::new(header.head, header.dims, &header.config, 0)?;
    let mut offset = start;
    {
        let slots = model.params_mut();
        if slots.len() != header.params.len() {
            return Err(parse_err(8, format!(
                "header lists {} parameters, model has {}",
                header.params.len(),
                slots.len()
            )));
        }
        for (slot, entry) in slots.into_iter().zip(&header.params) {
            let n = entry.rows * entry.cols;
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(parse_err(bytes.len(), format!("payload truncated inside `{}`", entry.name)));
            }
            let data: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            let m = Matrix::new(entry.rows, entry.cols, data)?;
            if slot.name != entry.name {
                return Err(parse_err(offset, format!("expected parameter `{}`, found `{}`", slot.name, entry.name)));
            }
            match slot.value {
                ParamValueMut::Euclidean(dst) if !entry.stiefel && dst.shape() == m.shape() => *dst = m,
                ParamValueMut::Stiefel(dst) if entry.stiefel && dst.matrix().shape() == m.shape() => {
                    *dst = StiefelParam::new(m)?
                }
                _ => return Err(parse_err(offset, format!("parameter `{}` has wrong shape or kind", entry.name))),
            }
            offset = end;
        }
    }
    if offset != bytes.len() {
        return Err(parse_err(offset, format!("{} trailing bytes after payload", bytes.len() - offset)));
    }
    Ok(Checkpoint { header, model })
}

pub fn save_checkpoint(path: &Path, model: &Model, cfg: &TrainConfig, seed: u64, fold: Option<usize>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, cfg, seed, fold)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{gen_synth, train, CaseFeatures, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: usize, dim: usize, seed: u64) -> EmbeddingSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::randn(rows, dim, 1.0, &mut rng);
        for v in m.data_mut() {
            *v = f64::from(*v as f32);
        }
        EmbeddingSequence::new(m, Modality::Dwi, Some(0)).unwrap()
    }

    #[test]
    fn eseq_roundtrip_and_layout() {
        let s = seq(5, 3, 1);
        let bytes = encode_eseq(&s).unwrap();
        assert_eq!(&bytes[..4], b"ESQ1");
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + hlen + 4 * 15);
        let h: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(h["dtype"], "f32le");
        assert_eq!(h["modality"], "dwi");
        assert_eq!(h["class_token_index"], 0);
        assert_eq!(decode_eseq(&bytes).unwrap(), s);
    }

    #[test]
    fn eseq_truncated_payload_reports_offset() {
        let bytes = encode_eseq(&seq(4, 2, 2)).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode_eseq(cut) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset as usize, cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn eseq_rejects_bad_magic_and_zero_dim() {
        let mut bytes = encode_eseq(&seq(2, 2, 3)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_eseq(&bytes), Err(Error::Parse { offset: 0, .. })));
        let header = br#"{"version":1,"n_tokens":4,"dim":0,"dtype":"f32le","modality":"t2w","class_token_index":null}"#;
        let bytes = framed(ESEQ_MAGIC, header, &[]).unwrap();
        assert!(matches!(decode_eseq(&bytes), Err(Error::Parse { offset: 8, .. })));
    }

    #[test]
    fn volume_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_fn(4, 6, 2, [0.5, 0.5, 3.0], |y, x, z| (y + 2 * x + 3 * z) as f64 / 20.0).unwrap();
        let p = dir.path().join("v.raw");
        write_volume(&p, &v).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 4 * 48);
        let sidecar: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("v.json")).unwrap()).unwrap();
        assert_eq!(sidecar["H"], 4);
        assert_eq!(sidecar["spacing"][2], 3.0);
        let back = read_volume(&p).unwrap();
        for (a, b) in back.data().iter().zip(v.data()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }

    #[test]
    fn dataset_and_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cases = gen_synth(&SynthConfig {
            n_cases: 20,
            ..SynthConfig::default()
        })
        .unwrap();
        let manifest = write_dataset(dir.path(), &cases).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded, cases);

        let feats: Vec<CaseFeatures> = loaded
            .iter()
            .map(|c| {
                let CaseInputs::Embeddings(e) = &c.inputs else { unreachable!() };
                CaseFeatures::from_embeddings(&c.id, c.label, c.subtag, e, true, 1e-6).unwrap()
            })
            .collect();
        let refs: Vec<&CaseFeatures> = feats.iter().collect();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(HeadKind::Geom, &refs, &[], &cfg, 3).unwrap();
        let bytes = encode_checkpoint(&out.model, &cfg, 3, Some(1)).unwrap();
        assert_eq!(&bytes[..4], b"SPDG");
        let ck = decode_checkpoint(&bytes, Some(&cfg)).unwrap();
        assert_eq!(ck.model, out.model);
        assert_eq!(ck.header.fold, Some(1));
        assert_eq!(encode_checkpoint(&ck.model, &cfg, 3, Some(1)).unwrap(), bytes);

        let other = TrainConfig {
            epochs: 2,
            ..cfg.clone()
        };
        assert!(matches!(
            decode_checkpoint(&bytes, Some(&other)),
            Err(Error::ConfigHashMismatch { .. })
        ));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], None).is_err());
    }

    #[test]
    fn manifest_parse_error_has_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "\n{not json}\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Parse { offset: 1, .. })));
    }
}
