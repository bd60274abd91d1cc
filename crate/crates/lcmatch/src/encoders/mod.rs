//! Toy-scale text and vision transformers producing pooled embeddings in a
//! shared projected space.
//!
//! The text tower runs bidirectional attention restricted by the window's
//! padding mask and pools the hidden state at the end-of-text position (after
//! optional 1-D average pooling along the token axis). The vision tower is a
//! patch-projection ViT pooled at its class token. Both towers project into
//! the same `embed_dim` space; similarity is an inner product after
//! normalization.

mod layers;
pub mod checkpoint;

use crate::data::PixelImage;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub(crate) use layers::MASK_BIAS;
use layers::{tower_bw, tower_fw, TowerCache, TowerGrads};

/// Hidden size of the MLP inside every transformer block, as a multiple of
/// the tower width.
const MLP_RATIO: usize = 4;

pub const LOG_TEMP_INIT: f64 = 2.6592600369327783; // ln(1/0.07)
pub const LOG_TEMP_MIN: f64 = -4.605170185988091; // ln(1/100)
pub const LOG_TEMP_MAX: f64 = 4.605170185988091; // ln(100)

// ------------------------------------------------------------------- config

/// Architecture hyperparameters for both towers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub context_len: usize,
    pub vocab_size: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_width: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub image_layers: usize,
    pub image_heads: usize,
    pub image_width: usize,
    pub embed_dim: usize,
    pub pool_kernel: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, width 128, 64-dim shared
    /// space, 32x32 images in 8x8 patches, 77-token context, no pooling.
    pub fn toy_defaults(vocab_size: usize) -> Self {
        EncoderConfig {
            context_len: 77,
            vocab_size,
            text_layers: 2,
            text_heads: 4,
            text_width: 128,
            image_size: 32,
            patch_size: 8,
            image_layers: 2,
            image_heads: 4,
            image_width: 128,
            embed_dim: 64,
            pool_kernel: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len < 3 {
            return Err(Error::config("context_len", "must be at least 3"));
        }
        if self.vocab_size < 4 {
            return Err(Error::config("vocab_size", "must cover at least one content token plus specials"));
        }
        if self.text_layers == 0 || self.image_layers == 0 {
            return Err(Error::config("text_layers/image_layers", "must be at least 1"));
        }
        if self.text_width == 0 || self.text_heads == 0 || self.text_width % self.text_heads != 0 {
            return Err(Error::config("text_width", "must be a positive multiple of text_heads"));
        }
        if self.image_width == 0 || self.image_heads == 0 || self.image_width % self.image_heads != 0
        {
            return Err(Error::config("image_width", "must be a positive multiple of image_heads"));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config("image_size", "must be a positive multiple of patch_size"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        if !matches!(self.pool_kernel, 1 | 3 | 5 | 7) {
            return Err(Error::config("pool_kernel", "must be one of 1, 3, 5, 7"));
        }
        Ok(())
    }

    pub fn content_capacity(&self) -> usize {
        self.context_len - 2
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn image_seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

// ------------------------------------------------------------------- params

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextTowerParams {
    pub token_embedding: Tensor,
    pub pos_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_final: LayerNormParams,
    pub projection: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTowerParams {
    pub patch_projection: Tensor,
    pub class_token: Tensor,
    pub pos_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_final: LayerNormParams,
    pub projection: Tensor,
}

/// Every trainable tensor of both towers plus the loss temperature (stored
/// as its logarithm). The same structure doubles as the container for
/// gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub text: TextTowerParams,
    pub image: ImageTowerParams,
    pub log_temperature: Tensor,
}

enum ParamKind {
    Weight,
    Bias,
    Gain,
    /// Positional tables start near zero so early window geometry is driven
    /// by content tokens; they are trained like any other tensor.
    PosEmbed,
}

fn build_params(cfg: &EncoderConfig, make: &mut impl FnMut(&[usize], ParamKind) -> Tensor) -> ModelParams {
    use ParamKind::*;
    fn block(width: usize, make: &mut impl FnMut(&[usize], ParamKind) -> Tensor) -> BlockParams {
        BlockParams {
            ln1: LayerNormParams { gamma: make(&[width], Gain), beta: make(&[width], Bias) },
            attn: AttentionParams {
                wq: make(&[width, width], Weight),
                bq: make(&[width], Bias),
                wk: make(&[width, width], Weight),
                bk: make(&[width], Bias),
                wv: make(&[width, width], Weight),
                bv: make(&[width], Bias),
                wo: make(&[width, width], Weight),
                bo: make(&[width], Bias),
            },
            ln2: LayerNormParams { gamma: make(&[width], Gain), beta: make(&[width], Bias) },
            mlp: MlpParams {
                w1: make(&[width, MLP_RATIO * width], Weight),
                b1: make(&[MLP_RATIO * width], Bias),
                w2: make(&[MLP_RATIO * width, width], Weight),
                b2: make(&[width], Bias),
            },
        }
    }
    let text = TextTowerParams {
        token_embedding: make(&[cfg.vocab_size, cfg.text_width], Weight),
        pos_embedding: make(&[cfg.context_len, cfg.text_width], PosEmbed),
        blocks: (0..cfg.text_layers).map(|_| block(cfg.text_width, make)).collect(),
        ln_final: LayerNormParams {
            gamma: make(&[cfg.text_width], Gain),
            beta: make(&[cfg.text_width], Bias),
        },
        projection: make(&[cfg.text_width, cfg.embed_dim], Weight),
    };
    let image = ImageTowerParams {
        patch_projection: make(&[cfg.patch_dim(), cfg.image_width], Weight),
        class_token: make(&[cfg.image_width], Weight),
        pos_embedding: make(&[cfg.image_seq_len(), cfg.image_width], PosEmbed),
        blocks: (0..cfg.image_layers).map(|_| block(cfg.image_width, make)).collect(),
        ln_final: LayerNormParams {
            gamma: make(&[cfg.image_width], Gain),
            beta: make(&[cfg.image_width], Bias),
        },
        projection: make(&[cfg.image_width, cfg.embed_dim], Weight),
    };
    ModelParams { text, image, log_temperature: Tensor::scalar(0.0) }
}

impl ModelParams {
    /// Random init: normal(0, 0.02) weights, zero biases, unit layer-norm
    /// gains, temperature at 1/0.07.
    ///
    /// The class token and the token-table rows of the three special tokens
    /// (the last three vocabulary ids) start at a reduced scale: they carry
    /// no content, and a full-scale start plants the same vector into every
    /// window's pooled residual stream, leaving all captions nearly
    /// collinear at init. All stay trainable.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut params = build_params(cfg, &mut |dims, kind| match kind {
            ParamKind::Weight => Tensor::randn(dims, 0.02, &mut rng),
            ParamKind::Bias => Tensor::zeros(dims),
            ParamKind::Gain => Tensor::full(dims, 1.0),
            ParamKind::PosEmbed => Tensor::randn(dims, 0.002, &mut rng),
        });
        params.log_temperature.set_item(LOG_TEMP_INIT);
        let width = cfg.text_width;
        let table = params.text.token_embedding.data_mut();
        for v in table[(cfg.vocab_size - 3) * width..].iter_mut() {
            *v *= 0.5;
        }
        for v in params.image.class_token.data_mut().iter_mut() {
            *v *= 0.5;
        }
        params
    }

    /// All-zero container with the same shapes: gradients, moments.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        build_params(cfg, &mut |dims, _| Tensor::zeros(dims))
    }

    pub fn zeros_like(&self) -> Self {
        let mut copy = self.clone();
        for (_, t) in copy.named_tensors_mut() {
            t.fill(0.0);
        }
        copy
    }

    pub fn log_temp(&self) -> f64 {
        self.log_temperature.item()
    }

    pub fn clamp_log_temperature(&mut self) {
        let v = self.log_temperature.item().clamp(LOG_TEMP_MIN, LOG_TEMP_MAX);
        self.log_temperature.set_item(v);
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Tensors in canonical order under stable names; the checkpoint format
    /// and the optimizer both walk this.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        fn blocks<'a>(prefix: &str, blocks: &'a [BlockParams], out: &mut Vec<(String, &'a Tensor)>) {
            for (i, b) in blocks.iter().enumerate() {
                out.push((format!("{prefix}.layers.{i}.ln1.gamma"), &b.ln1.gamma));
                out.push((format!("{prefix}.layers.{i}.ln1.beta"), &b.ln1.beta));
                out.push((format!("{prefix}.layers.{i}.attn.wq"), &b.attn.wq));
                out.push((format!("{prefix}.layers.{i}.attn.bq"), &b.attn.bq));
                out.push((format!("{prefix}.layers.{i}.attn.wk"), &b.attn.wk));
                out.push((format!("{prefix}.layers.{i}.attn.bk"), &b.attn.bk));
                out.push((format!("{prefix}.layers.{i}.attn.wv"), &b.attn.wv));
                out.push((format!("{prefix}.layers.{i}.attn.bv"), &b.attn.bv));
                out.push((format!("{prefix}.layers.{i}.attn.wo"), &b.attn.wo));
                out.push((format!("{prefix}.layers.{i}.attn.bo"), &b.attn.bo));
                out.push((format!("{prefix}.layers.{i}.ln2.gamma"), &b.ln2.gamma));
                out.push((format!("{prefix}.layers.{i}.ln2.beta"), &b.ln2.beta));
                out.push((format!("{prefix}.layers.{i}.mlp.w1"), &b.mlp.w1));
                out.push((format!("{prefix}.layers.{i}.mlp.b1"), &b.mlp.b1));
                out.push((format!("{prefix}.layers.{i}.mlp.w2"), &b.mlp.w2));
                out.push((format!("{prefix}.layers.{i}.mlp.b2"), &b.mlp.b2));
            }
        }
        out.push(("text.token_embedding".into(), &self.text.token_embedding));
        out.push(("text.pos_embedding".into(), &self.text.pos_embedding));
        blocks("text", &self.text.blocks, &mut out);
        out.push(("text.ln_final.gamma".into(), &self.text.ln_final.gamma));
        out.push(("text.ln_final.beta".into(), &self.text.ln_final.beta));
        out.push(("text.projection".into(), &self.text.projection));
        out.push(("image.patch_projection".into(), &self.image.patch_projection));
        out.push(("image.class_token".into(), &self.image.class_token));
        out.push(("image.pos_embedding".into(), &self.image.pos_embedding));
        blocks("image", &self.image.blocks, &mut out);
        out.push(("image.ln_final.gamma".into(), &self.image.ln_final.gamma));
        out.push(("image.ln_final.beta".into(), &self.image.ln_final.beta));
        out.push(("image.projection".into(), &self.image.projection));
        out.push(("log_temperature".into(), &self.log_temperature));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        fn blocks<'a>(prefix: &str, blocks: &'a mut [BlockParams], out: &mut Vec<(String, &'a mut Tensor)>) {
            for (i, b) in blocks.iter_mut().enumerate() {
                out.push((format!("{prefix}.layers.{i}.ln1.gamma"), &mut b.ln1.gamma));
                out.push((format!("{prefix}.layers.{i}.ln1.beta"), &mut b.ln1.beta));
                out.push((format!("{prefix}.layers.{i}.attn.wq"), &mut b.attn.wq));
                out.push((format!("{prefix}.layers.{i}.attn.bq"), &mut b.attn.bq));
                out.push((format!("{prefix}.layers.{i}.attn.wk"), &mut b.attn.wk));
                out.push((format!("{prefix}.layers.{i}.attn.bk"), &mut b.attn.bk));
                out.push((format!("{prefix}.layers.{i}.attn.wv"), &mut b.attn.wv));
                out.push((format!("{prefix}.layers.{i}.attn.bv"), &mut b.attn.bv));
                out.push((format!("{prefix}.layers.{i}.attn.wo"), &mut b.attn.wo));
                out.push((format!("{prefix}.layers.{i}.attn.bo"), &mut b.attn.bo));
                out.push((format!("{prefix}.layers.{i}.ln2.gamma"), &mut b.ln2.gamma));
                out.push((format!("{prefix}.layers.{i}.ln2.beta"), &mut b.ln2.beta));
                out.push((format!("{prefix}.layers.{i}.mlp.w1"), &mut b.mlp.w1));
                out.push((format!("{prefix}.layers.{i}.mlp.b1"), &mut b.mlp.b1));
                out.push((format!("{prefix}.layers.{i}.mlp.w2"), &mut b.mlp.w2));
                out.push((format!("{prefix}.layers.{i}.mlp.b2"), &mut b.mlp.b2));
            }
        }
        out.push(("text.token_embedding".into(), &mut self.text.token_embedding));
        out.push(("text.pos_embedding".into(), &mut self.text.pos_embedding));
        blocks("text", &mut self.text.blocks, &mut out);
        out.push(("text.ln_final.gamma".into(), &mut self.text.ln_final.gamma));
        out.push(("text.ln_final.beta".into(), &mut self.text.ln_final.beta));
        out.push(("text.projection".into(), &mut self.text.projection));
        out.push(("image.patch_projection".into(), &mut self.image.patch_projection));
        out.push(("image.class_token".into(), &mut self.image.class_token));
        out.push(("image.pos_embedding".into(), &mut self.image.pos_embedding));
        blocks("image", &mut self.image.blocks, &mut out);
        out.push(("image.ln_final.gamma".into(), &mut self.image.ln_final.gamma));
        out.push(("image.ln_final.beta".into(), &mut self.image.ln_final.beta));
        out.push(("image.projection".into(), &mut self.image.projection));
        out.push(("log_temperature".into(), &mut self.log_temperature));
        out
    }
}

// ---------------------------------------------------------------- embedding

/// Vector in the shared image-text space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn from_values(values: Vec<f64>) -> Self {
        Embedding { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Scales to unit Euclidean norm.
pub fn normalize(e: &Embedding) -> Result<Embedding> {
    let norm = e.norm();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(Embedding { values: e.values.iter().map(|v| v / norm).collect() })
}

/// d/dx of normalize at raw vector `x`, applied to upstream gradient `dn`:
/// (dn - u (u . dn)) / |x| with u = x/|x|.
pub(crate) fn normalize_bw(raw: &[f64], dn: &[f64]) -> Vec<f64> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let inner: f64 = u.iter().zip(dn).map(|(a, b)| a * b).sum();
    u.iter().zip(dn).map(|(uv, dv)| (dv - uv * inner) / norm).collect()
}

// -------------------------------------------------------- sequence pooling

/// Non-overlapping mean over groups of `kernel` consecutive positions along
/// the sequence axis; the final partial group averages over its actual size.
/// `kernel == 1` is the identity.
pub fn avg_pool_sequence(hidden: &[f64], seq_len: usize, width: usize, kernel: usize) -> Result<Vec<f64>> {
    if hidden.len() != seq_len * width {
        return Err(Error::shape(format!(
            "hidden buffer holds {} values, expected {seq_len} x {width}",
            hidden.len()
        )));
    }
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::InvalidKernel { kernel, reason: "kernel must be odd and positive".into() });
    }
    if kernel > seq_len {
        return Err(Error::InvalidKernel {
            kernel,
            reason: format!("kernel exceeds sequence length {seq_len}"),
        });
    }
    if kernel == 1 {
        return Ok(hidden.to_vec());
    }
    let groups = seq_len.div_ceil(kernel);
    let mut out = vec![0.0; groups * width];
    for g in 0..groups {
        let start = g * kernel;
        let end = (start + kernel).min(seq_len);
        let size = (end - start) as f64;
        let orow = &mut out[g * width..(g + 1) * width];
        for row in start..end {
            let hrow = &hidden[row * width..(row + 1) * width];
            for (o, &h) in orow.iter_mut().zip(hrow) {
                *o += h;
            }
        }
        for o in orow.iter_mut() {
            *o /= size;
        }
    }
    Ok(out)
}

/// Number of pooled positions for a sequence length and kernel.
pub fn pooled_len(seq_len: usize, kernel: usize) -> usize {
    seq_len.div_ceil(kernel)
}

/// Pooled-axis index holding original position `pos`.
pub fn pooled_position(pos: usize, kernel: usize) -> usize {
    pos / kernel
}

// ------------------------------------------------------------- text forward

/// Everything the backward pass needs about one window forward.
pub(crate) struct TextWindowTrace {
    ids: Vec<u32>,
    mask: Vec<u8>,
    tower: TowerCache,
    /// Row of the pooled hidden states fed to the projection.
    pooled_row: Vec<f64>,
    /// Original positions averaged into that row.
    group_start: usize,
    group_len: usize,
    pub embedding: Embedding,
}

/// Encodes one fixed-width window row: transformer with mask-restricted
/// bidirectional attention, pad states zeroed, optional token-axis average
/// pooling, end-of-text pooling, text projection. Not normalized.
pub fn encode_text_window(
    row: &[u32],
    mask: &[u8],
    params: &ModelParams,
    cfg: &EncoderConfig,
) -> Result<Embedding> {
    Ok(text_window_forward(row, mask, params, cfg)?.embedding)
}

pub(crate) fn text_window_forward(
    row: &[u32],
    mask: &[u8],
    params: &ModelParams,
    cfg: &EncoderConfig,
) -> Result<TextWindowTrace> {
    let seq = cfg.context_len;
    let width = cfg.text_width;
    if row.len() != seq {
        return Err(Error::shape(format!("window row has {} tokens, context is {seq}", row.len())));
    }
    if mask.len() != seq {
        return Err(Error::shape(format!("mask has {} entries, context is {seq}", mask.len())));
    }
    if let Some(&bad) = row.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::shape(format!("token id {bad} exceeds vocabulary size {}", cfg.vocab_size)));
    }
    let eot = match mask.iter().rposition(|&m| m == 1) {
        Some(pos) => pos,
        None => return Err(Error::shape("mask marks no valid positions".to_string())),
    };

    // token + positional embeddings
    let mut x0 = vec![0.0; seq * width];
    for (i, &id) in row.iter().enumerate() {
        let tok = params.text.token_embedding.row(id as usize);
        let pos = params.text.pos_embedding.row(i);
        let dst = &mut x0[i * width..(i + 1) * width];
        for j in 0..width {
            dst[j] = tok[j] + pos[j];
        }
    }

    let key_bias: Vec<f64> = mask.iter().map(|&m| if m == 1 { 0.0 } else { MASK_BIAS }).collect();
    let (h, tower) = tower_fw(
        &x0,
        seq,
        width,
        cfg.text_heads,
        &params.text.blocks,
        &params.text.ln_final,
        Some(&key_bias),
    );

    // zero pad-position states so pooling groups cannot leak pad content
    let mut h_masked = h;
    for (i, &m) in mask.iter().enumerate() {
        if m == 0 {
            h_masked[i * width..(i + 1) * width].fill(0.0);
        }
    }

    let pooled = avg_pool_sequence(&h_masked, seq, width, cfg.pool_kernel)?;
    let group = pooled_position(eot, cfg.pool_kernel);
    let group_start = group * cfg.pool_kernel;
    let group_len = (group_start + cfg.pool_kernel).min(seq) - group_start;
    let pooled_row = pooled[group * width..(group + 1) * width].to_vec();

    // project into the shared space
    let proj = &params.text.projection;
    let d = cfg.embed_dim;
    let mut values = vec![0.0; d];
    for (k, &p) in pooled_row.iter().enumerate() {
        let wrow = proj.row(k);
        for j in 0..d {
            values[j] += p * wrow[j];
        }
    }

    Ok(TextWindowTrace {
        ids: row.to_vec(),
        mask: mask.to_vec(),
        tower,
        pooled_row,
        group_start,
        group_len,
        embedding: Embedding { values },
    })
}

/// Accumulates gradients for one window given d(loss)/d(raw embedding).
pub(crate) fn text_window_bw(
    trace: &TextWindowTrace,
    d_emb: &[f64],
    params: &ModelParams,
    cfg: &EncoderConfig,
    grads: &mut ModelParams,
) {
    let seq = cfg.context_len;
    let width = cfg.text_width;
    let d = cfg.embed_dim;

    // projection: e = pooled_row . W
    let dproj = grads.text.projection.data_mut();
    let mut d_pooled_row = vec![0.0; width];
    for k in 0..width {
        let wrow = params.text.projection.row(k);
        let mut acc = 0.0;
        for j in 0..d {
            acc += wrow[j] * d_emb[j];
            dproj[k * d + j] += trace.pooled_row[k] * d_emb[j];
        }
        d_pooled_row[k] = acc;
    }

    // pooling: only the end-of-text group receives gradient; pad positions
    // were zeroed in the forward pass, so they get none.
    let mut dh = vec![0.0; seq * width];
    let scale = 1.0 / trace.group_len as f64;
    for pos in trace.group_start..trace.group_start + trace.group_len {
        if trace.mask[pos] == 1 {
            let row = &mut dh[pos * width..(pos + 1) * width];
            for (r, &g) in row.iter_mut().zip(&d_pooled_row) {
                *r = g * scale;
            }
        }
    }

    let dx0 = tower_bw(
        &dh,
        seq,
        width,
        cfg.text_heads,
        &params.text.blocks,
        &params.text.ln_final,
        &trace.tower,
        TowerGrads { blocks: &mut grads.text.blocks, ln_final: &mut grads.text.ln_final },
    );

    let dtok = grads.text.token_embedding.data_mut();
    for (i, &id) in trace.ids.iter().enumerate() {
        let src = &dx0[i * width..(i + 1) * width];
        let dst = &mut dtok[id as usize * width..(id as usize + 1) * width];
        for (a, &b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }
    let dpos = grads.text.pos_embedding.data_mut();
    for (a, &b) in dpos.iter_mut().zip(&dx0) {
        *a += b;
    }
}

// ------------------------------------------------------------ image forward

pub(crate) struct ImageTrace {
    /// Flattened patches, [num_patches, patch_dim].
    patches: Vec<f64>,
    tower: TowerCache,
    /// Class-token hidden state fed to the projection.
    cls_row: Vec<f64>,
    pub embedding: Embedding,
}

/// Patchify, project, prepend class token, run the tower, pool the class
/// token, project into the shared space. Not normalized. The image must
/// already be `image_size` square; no implicit resizing here.
pub fn encode_image(pixels: &PixelImage, params: &ModelParams, cfg: &EncoderConfig) -> Result<Embedding> {
    Ok(image_forward(pixels, params, cfg)?.embedding)
}

pub(crate) fn image_forward(
    pixels: &PixelImage,
    params: &ModelParams,
    cfg: &EncoderConfig,
) -> Result<ImageTrace> {
    if pixels.height != cfg.image_size || pixels.width != cfg.image_size {
        return Err(Error::shape(format!(
            "image is {}x{}, encoder expects {}x{}",
            pixels.height, pixels.width, cfg.image_size, cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let per_side = cfg.image_size / p;
    let np = cfg.num_patches();
    let pd = cfg.patch_dim();
    let width = cfg.image_width;
    let seq = cfg.image_seq_len();

    // flatten patches row-major: grid (gy, gx), then (py, px, channel);
    // pixels are shifted to [-0.5, 0.5] so the shared brightness level does
    // not project the same direction into every image embedding
    let mut patches = vec![0.0; np * pd];
    for gy in 0..per_side {
        for gx in 0..per_side {
            let patch = &mut patches[(gy * per_side + gx) * pd..(gy * per_side + gx + 1) * pd];
            let mut idx = 0;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        patch[idx] = pixels.pixel(gy * p + py, gx * p + px, c) as f64 - 0.5;
                        idx += 1;
                    }
                }
            }
        }
    }

    // patch projection (no bias), class token, positional embeddings
    let projected = crate::tensor::matmul(&patches, params.image.patch_projection.data(), np, pd, width);
    let mut x0 = vec![0.0; seq * width];
    {
        let cls = params.image.class_token.data();
        let pos0 = params.image.pos_embedding.row(0);
        let dst = &mut x0[..width];
        for j in 0..width {
            dst[j] = cls[j] + pos0[j];
        }
    }
    for i in 0..np {
        let src = &projected[i * width..(i + 1) * width];
        let pos = params.image.pos_embedding.row(i + 1);
        let dst = &mut x0[(i + 1) * width..(i + 2) * width];
        for j in 0..width {
            dst[j] = src[j] + pos[j];
        }
    }

    let (h, tower) = tower_fw(
        &x0,
        seq,
        width,
        cfg.image_heads,
        &params.image.blocks,
        &params.image.ln_final,
        None,
    );
    let cls_row = h[..width].to_vec();

    let proj = &params.image.projection;
    let d = cfg.embed_dim;
    let mut values = vec![0.0; d];
    for (k, &hv) in cls_row.iter().enumerate() {
        let wrow = proj.row(k);
        for j in 0..d {
            values[j] += hv * wrow[j];
        }
    }

    Ok(ImageTrace { patches, tower, cls_row, embedding: Embedding { values } })
}

pub(crate) fn image_bw(
    trace: &ImageTrace,
    d_emb: &[f64],
    params: &ModelParams,
    cfg: &EncoderConfig,
    grads: &mut ModelParams,
) {
    let width = cfg.image_width;
    let d = cfg.embed_dim;
    let np = cfg.num_patches();
    let pd = cfg.patch_dim();
    let seq = cfg.image_seq_len();

    let dproj = grads.image.projection.data_mut();
    let mut d_cls = vec![0.0; width];
    for k in 0..width {
        let wrow = params.image.projection.row(k);
        let mut acc = 0.0;
        for j in 0..d {
            acc += wrow[j] * d_emb[j];
            dproj[k * d + j] += trace.cls_row[k] * d_emb[j];
        }
        d_cls[k] = acc;
    }

    let mut dh = vec![0.0; seq * width];
    dh[..width].copy_from_slice(&d_cls);

    let dx0 = tower_bw(
        &dh,
        seq,
        width,
        cfg.image_heads,
        &params.image.blocks,
        &params.image.ln_final,
        &trace.tower,
        TowerGrads { blocks: &mut grads.image.blocks, ln_final: &mut grads.image.ln_final },
    );

    // class token and positional embeddings
    {
        let dcls = grads.image.class_token.data_mut();
        for (a, &b) in dcls.iter_mut().zip(&dx0[..width]) {
            *a += b;
        }
        let dpos = grads.image.pos_embedding.data_mut();
        for (a, &b) in dpos.iter_mut().zip(&dx0) {
            *a += b;
        }
    }

    // patch projection: projected = patches . W
    crate::tensor::matmul_tn_acc(
        grads.image.patch_projection.data_mut(),
        &trace.patches,
        &dx0[width..],
        np,
        pd,
        width,
    );
}
