//! Small frozen transformer encoders standing in for a pretrained
//! vision-language model: 3D patch embedding with inflated 2D kernels, a
//! template-vocabulary text encoder, and class-token attention maps.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::descriptor::{EmbeddingSequence, Modality};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::volume::Volume;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Embedding width.
    pub d: usize,
    /// Patch side in voxels.
    pub patch: usize,
    /// Kernel depth; equals the volume depth.
    pub depth: usize,
    /// Volume height and width.
    pub height: usize,
    pub width: usize,
    /// Transformer blocks.
    pub layers: usize,
    pub heads: usize,
    /// Text sequence length including the class token.
    pub max_text_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            patch: 16,
            depth: 8,
            height: 64,
            width: 64,
            layers: 2,
            heads: 4,
            max_text_len: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::InvalidShape(format!(
                "embedding width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::InvalidShape(format!(
                "patch side {} must divide {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if self.depth == 0 || self.layers == 0 || self.max_text_len < 2 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidShape("depth, layers and sizes must be positive".into()));
        }
        Ok(())
    }

    /// Number of image patches `N_I`.
    pub fn n_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.depth
    }
}

/// Replicates each `P x P` kernel (one row of `k2d`, row-major) across `depth`
/// slices and divides by `depth`. Output columns are ordered `(y, x, z)` with
/// `z` fastest, matching [`patchify3d`].
pub fn inflate_kernel(k2d: &Matrix, depth: usize) -> Result<Matrix> {
    if depth < 1 {
        return Err(Error::invalid("inflation depth must be at least 1"));
    }
    let inv = 1.0 / depth as f64;
    let cols = k2d.cols();
    Ok(Matrix::from_fn(k2d.rows(), cols * depth, |k, j| k2d[(k, j / depth)] * inv))
}

/// `N_I x (P P D)` patch matrix, patches scanned y-outer, x-inner.
pub fn patchify3d(vol: &Volume, cfg: &EncoderConfig) -> Result<Matrix> {
    let (h, w, d) = vol.dims();
    if (h, w, d) != (cfg.height, cfg.width, cfg.depth) {
        return Err(Error::InvalidShape(format!(
            "volume is {h}x{w}x{d}, encoder expects {}x{}x{}",
            cfg.height, cfg.width, cfg.depth
        )));
    }
    let p = cfg.patch;
    let (gy, gx) = (h / p, w / p);
    let mut out = Matrix::zeros(gy * gx, cfg.patch_len());
    for py in 0..gy {
        for px in 0..gx {
            let row = out.row_mut(py * gx + px);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for z in 0..d {
                        row[k] = vol.get(py * p + y, px * p + x, z);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-slice 2D patch matrix for slice `z`: `N_I x (P P)`.
pub fn patchify2d(vol: &Volume, cfg: &EncoderConfig, z: usize) -> Result<Matrix> {
    let (h, w, d) = vol.dims();
    if z >= d || h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(Error::invalid(format!("slice {z} or grid {h}x{w} incompatible with patch {}", cfg.patch)));
    }
    let p = cfg.patch;
    let (gy, gx) = (h / p, w / p);
    Ok(Matrix::from_fn(gy * gx, p * p, |i, j| {
        let (py, px) = (i / gx, i % gx);
        vol.get(py * p + j / p, px * p + j % p, z)
    }))
}

fn randn_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::randn(rows, cols, INIT_STD, rng)
}

#[derive(Debug, Clone, PartialEq)]
struct LayerNorm {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let d = x.cols() as f64;
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gain).zip(&self.bias) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    /// `out x in`.
    w: Matrix,
    b: Vec<f64>,
}

impl Linear {
    fn new<R: Rng + ?Sized>(inp: usize, out: usize, rng: &mut R) -> Self {
        Self {
            w: randn_init(out, inp, rng),
            b: vec![0.0; out],
        }
    }

    /// Row-wise `x W^T + b`.
    fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul_nt(&self.w);
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        y
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Pre-norm block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            o: Linear::new(d, d, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, 4 * d, rng),
            fc2: Linear::new(4 * d, d, rng),
        }
    }

    /// Returns the block output and the per-head attention matrices.
    fn forward(&self, x: &Matrix, heads: usize, key_mask: &[bool]) -> (Matrix, Vec<Matrix>) {
        let n = x.rows();
        let d = x.cols();
        let dh = d / heads;
        let h = self.ln1.apply(x);
        let (q, k, v) = (self.q.apply(&h), self.k.apply(&h), self.v.apply(&h));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Matrix::zeros(n, d);
        let mut attn = Vec::with_capacity(heads);
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                let row = a.row_mut(i);
                let mut m = f64::NEG_INFINITY;
                for j in 0..n {
                    row[j] = if key_mask[j] {
                        dot(qi, &k.row(j)[cols.clone()]) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                    m = m.max(row[j]);
                }
                let mut s = 0.0;
                for r in row.iter_mut() {
                    *r = if r.is_finite() { (*r - m).exp() } else { 0.0 };
                    s += *r;
                }
                for r in row.iter_mut() {
                    *r /= s;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let aij = a[(i, j)];
                    if aij == 0.0 {
                        continue;
                    }
                    let vj = &v.row(j)[cols.clone()];
                    for (c, vv) in ctx.row_mut(i)[cols.clone()].iter_mut().zip(vj) {
                        *c += aij * vv;
                    }
                }
            }
            attn.push(a);
        }
        let x1 = x.add(&self.o.apply(&ctx));
        let mut hidden = self.fc1.apply(&self.ln2.apply(&x1));
        for v in hidden.data_mut() {
            *v = gelu(*v);
        }
        (x1.add(&self.fc2.apply(&hidden)), attn)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Trunk {
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    heads: usize,
}

impl Trunk {
    fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            blocks: (0..cfg.layers).map(|_| Block::new(cfg.d, rng)).collect(),
            ln_final: LayerNorm::new(cfg.d),
            heads: cfg.heads,
        }
    }

    /// Output tokens and the head-mean attention of the last block.
    fn forward(&self, mut x: Matrix, key_mask: &[bool]) -> (Matrix, Matrix) {
        let n = x.rows();
        let mut last = Matrix::zeros(n, n);
        for b in &self.blocks {
            let (y, attn) = b.forward(&x, self.heads, key_mask);
            x = y;
            last = Matrix::zeros(n, n);
            for a in &attn {
                last.add_assign(a);
            }
            last.scale_assign(1.0 / self.heads as f64);
        }
        (self.ln_final.apply(&x), last)
    }
}

/// Frozen image encoder shared by the three imaging modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    cfg: EncoderConfig,
    /// 2D kernels `d x (P P)` before inflation.
    kernel2d: Matrix,
    kernel3d: Matrix,
    patch_bias: Vec<f64>,
    class_token: Vec<f64>,
    pos: Matrix,
    trunk: Trunk,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let kernel2d = randn_init(cfg.d, cfg.patch * cfg.patch, rng);
        let kernel3d = inflate_kernel(&kernel2d, cfg.depth)?;
        Ok(Self {
            cfg: *cfg,
            kernel2d,
            kernel3d,
            patch_bias: vec![0.0; cfg.d],
            class_token: randn_init(1, cfg.d, rng).into_data(),
            pos: randn_init(cfg.n_patches() + 1, cfg.d, rng),
            trunk: Trunk::new(cfg, rng),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn kernel2d(&self) -> &Matrix {
        &self.kernel2d
    }

    /// Patch embeddings `N_I x d` before the class token and positions.
    pub fn patch_embed(&self, vol: &Volume) -> Result<Matrix> {
        let p = patchify3d(vol, &self.cfg)?;
        Ok(project_patches(&p, &self.kernel3d, &self.patch_bias))
    }

    pub fn set_class_token(&mut self, c: &[f64]) -> Result<()> {
        if c.len() != self.cfg.d {
            return Err(Error::DimMismatch {
                context: "class token",
                expected: self.cfg.d,
                got: c.len(),
            });
        }
        self.class_token = c.to_vec();
        Ok(())
    }

    pub fn zero_positions(&mut self) {
        self.pos.fill(0.0);
    }

    fn run(&self, vol: &Volume) -> Result<(Matrix, Matrix)> {
        let patches = self.patch_embed(vol)?;
        let n = patches.rows() + 1;
        let mut x = Matrix::zeros(n, self.cfg.d);
        x.row_mut(0).copy_from_slice(&self.class_token);
        for i in 1..n {
            x.row_mut(i).copy_from_slice(patches.row(i - 1));
        }
        x.add_assign(&self.pos);
        Ok(self.trunk.forward(x, &vec![true; n]))
    }

    /// `N_I + 1` tokens with the class token at index 0.
    pub fn encode(&self, vol: &Volume, modality: Modality) -> Result<EmbeddingSequence> {
        if modality == Modality::Text {
            return Err(Error::invalid("image encoder cannot produce text sequences"));
        }
        let (tokens, _) = self.run(vol)?;
        EmbeddingSequence::new(tokens, modality, Some(0))
    }

    /// Class-token attention over the patch tokens of the last block.
    pub fn attention_map(&self, vol: &Volume) -> Result<Vec<f64>> {
        let (_, attn) = self.run(vol)?;
        Ok(class_row(&attn))
    }
}

/// Row-wise `patches K^T + b`.
pub fn project_patches(patches: &Matrix, kernel: &Matrix, bias: &[f64]) -> Matrix {
    let mut y = patches.matmul_nt(kernel);
    for i in 0..y.rows() {
        for (v, b) in y.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
    y
}

fn class_row(attn: &Matrix) -> Vec<f64> {
    attn.row(0)[1..].to_vec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    cfg: EncoderConfig,
    embed: Matrix,
    pad_id: u32,
    class_token: Vec<f64>,
    pos: Matrix,
    trunk: Trunk,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, vocab_len: usize, pad_id: u32, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if pad_id as usize >= vocab_len {
            return Err(Error::invalid("pad id outside vocabulary"));
        }
        Ok(Self {
            cfg: *cfg,
            embed: randn_init(vocab_len, cfg.d, rng),
            pad_id,
            class_token: randn_init(1, cfg.d, rng).into_data(),
            pos: randn_init(cfg.max_text_len, cfg.d, rng),
            trunk: Trunk::new(cfg, rng),
        })
    }

    fn run(&self, ids: &[u32]) -> Result<(Matrix, Matrix)> {
        let n = self.cfg.max_text_len;
        let mut x = Matrix::zeros(n, self.cfg.d);
        let mut mask = vec![false; n];
        x.row_mut(0).copy_from_slice(&self.class_token);
        mask[0] = true;
        for i in 1..n {
            let id = match ids.get(i - 1) {
                Some(&id) => {
                    mask[i] = true;
                    id
                }
                None => self.pad_id,
            };
            if id as usize >= self.embed.rows() {
                return Err(Error::invalid(format!("token id {id} outside vocabulary")));
            }
            x.row_mut(i).copy_from_slice(self.embed.row(id as usize));
        }
        x.add_assign(&self.pos);
        Ok(self.trunk.forward(x, &mask))
    }

    /// `max_text_len` tokens: class token, then the ids truncated or padded.
    pub fn encode(&self, ids: &[u32]) -> Result<EmbeddingSequence> {
        let (tokens, _) = self.run(ids)?;
        EmbeddingSequence::new(tokens, Modality::Text, Some(0))
    }

    /// Class-token attention over the text positions of the last block;
    /// padding positions receive zero weight.
    pub fn attention_map(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let (_, attn) = self.run(ids)?;
        Ok(class_row(&attn))
    }
}

/// Head-mean attention row of the class token for an arbitrary token matrix
/// passed through one fresh block; exposed for property tests.
pub fn single_block_attention(tokens: &Matrix, heads: usize, seed: u64) -> Result<Vec<f64>> {
    use rand::SeedableRng;
    let d = tokens.cols();
    if d == 0 || heads == 0 || d % heads != 0 {
        return Err(Error::InvalidShape(format!("width {d} not divisible by {heads} heads")));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let block = Block::new(d, &mut rng);
    let (_, attn) = block.forward(tokens, heads, &vec![true; tokens.rows()]);
    let mut mean = Matrix::zeros(tokens.rows(), tokens.rows());
    for a in &attn {
        mean.add_assign(a);
    }
    mean.scale_assign(1.0 / heads as f64);
    Ok(class_row(&mean))
}
