//! Symmetric contrastive objective, manual backpropagation through both
//! towers and the window-mean aggregation, Adam, and the epoch loop.

use std::time::Instant;

use crate::data::{PixelImage, Sample};
use crate::encoders::{
    image_bw, image_forward, normalize, normalize_bw, Embedding, EncoderConfig, ModelParams,
};
use crate::error::{Error, Result};
use crate::longcap::{long_text_bw, long_text_forward, LongTextConfig};
use crate::rng::Rng;
use crate::textpipe::{tokenize, TokenSequence, Vocabulary};

/// Which parameters the optimizer updates. Gradients are always computed
/// for every tensor; the scope only masks the update step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Update both towers, the projections, and the temperature.
    All,
    /// Freeze the image tower: its random-init features act as fixed
    /// anchors while the text tower and temperature learn to match them.
    TextOnly,
}

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub scope: TrainScope,
}

impl TrainConfig {
    /// The published fine-tuning recipe: Adam at 1e-6 for 10 epochs with
    /// batches of 50. Desk-scale runs from random init override the learning
    /// rate in their config files.
    pub fn paper_defaults(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            epochs: 10,
            batch_size: 50,
            seed,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            scope: TrainScope::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "contrastive training needs at least 2"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("adam_beta1/adam_beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Parameters plus Adam moments and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub epoch_losses: Vec<f64>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let m = params.zeros_like();
        let v = params.zeros_like();
        TrainState { params, m, v, step: 0, epoch_losses: Vec::new() }
    }
}

/// One training pair with the caption already tokenized.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub image: PixelImage,
    pub tokens: TokenSequence,
}

pub fn prepare_examples(samples: &[Sample], vocab: &Vocabulary) -> Vec<TrainExample> {
    samples
        .iter()
        .map(|s| TrainExample {
            id: s.id.clone(),
            image: s.image.clone(),
            tokens: tokenize(&s.caption, vocab),
        })
        .collect()
}

// ------------------------------------------------------------ contrastive

/// Symmetric InfoNCE over a batch of matched pairs. logits[i][j] =
/// exp(log_temperature) * <image_i, text_j>; the loss averages the row-wise
/// and column-wise softmax cross-entropies with the diagonal as labels.
/// Returns (loss, row-major N x N logits).
pub fn contrastive_loss(
    image_embs: &[Embedding],
    text_embs: &[Embedding],
    log_temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    let detail = contrastive_loss_grads(image_embs, text_embs, log_temperature)?;
    Ok((detail.loss, detail.logits))
}

pub(crate) struct ContrastiveGrads {
    pub loss: f64,
    pub logits: Vec<f64>,
    /// d loss / d image_embs[i], one vector per pair.
    pub d_image: Vec<Vec<f64>>,
    pub d_text: Vec<Vec<f64>>,
    pub d_log_temperature: f64,
}

pub(crate) fn contrastive_loss_grads(
    image_embs: &[Embedding],
    text_embs: &[Embedding],
    log_temperature: f64,
) -> Result<ContrastiveGrads> {
    let n = image_embs.len();
    if n != text_embs.len() {
        return Err(Error::shape(format!(
            "{n} image embeddings vs {} text embeddings",
            text_embs.len()
        )));
    }
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let dim = image_embs[0].dim();
    if image_embs.iter().chain(text_embs).any(|e| e.dim() != dim) {
        return Err(Error::shape("embedding dimensions disagree within the batch"));
    }

    let temp = log_temperature.exp();
    let mut logits = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            logits[i * n + j] = temp * crate::tensor::dot(image_embs[i].values(), text_embs[j].values());
        }
    }

    // row-wise and column-wise softmax with the log-sum-exp trick
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; n * n];
    for i in 0..n {
        let row = &logits[i * n..(i + 1) * n];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[i];
        for j in 0..n {
            let p = (row[j] - lse).exp();
            dlogits[i * n + j] += p - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| logits[i * n + j]).collect();
        let max = col.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + col.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - col[j];
        for i in 0..n {
            let p = (col[i] - lse).exp();
            dlogits[i * n + j] += p - if i == j { 1.0 } else { 0.0 };
        }
    }
    let scale = 1.0 / (2.0 * n as f64);
    loss *= scale;
    for d in dlogits.iter_mut() {
        *d *= scale;
    }

    let mut d_image = vec![vec![0.0; dim]; n];
    let mut d_text = vec![vec![0.0; dim]; n];
    let mut d_log_temperature = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = dlogits[i * n + j];
            d_log_temperature += d * logits[i * n + j];
            let img = image_embs[i].values();
            let txt = text_embs[j].values();
            for k in 0..dim {
                d_image[i][k] += d * temp * txt[k];
                d_text[j][k] += d * temp * img[k];
            }
        }
    }

    Ok(ContrastiveGrads { loss, logits, d_image, d_text, d_log_temperature })
}

// ----------------------------------------------------------------- forward

fn batch_embeddings(
    batch: &[&TrainExample],
    params: &ModelParams,
    enc_cfg: &EncoderConfig,
    ltc: &LongTextConfig,
    vocab: &Vocabulary,
) -> Result<(
    Vec<crate::encoders::ImageTrace>,
    Vec<crate::longcap::LongTextTrace>,
    Vec<Embedding>,
    Vec<Embedding>,
)> {
    let mut image_traces = Vec::with_capacity(batch.len());
    let mut text_traces = Vec::with_capacity(batch.len());
    let mut image_norm = Vec::with_capacity(batch.len());
    let mut text_norm = Vec::with_capacity(batch.len());
    for example in batch {
        let itrace = image_forward(&example.image, params, enc_cfg)?;
        image_norm.push(normalize(&itrace.embedding)?);
        image_traces.push(itrace);
        let ttrace = long_text_forward(&example.tokens, vocab, params, enc_cfg, ltc)?;
        text_norm.push(ttrace.normalized.clone());
        text_traces.push(ttrace);
    }
    Ok((image_traces, text_traces, image_norm, text_norm))
}

/// Loss of one batch without touching gradients; shares the exact forward
/// path of `compute_gradients`, which the finite-difference oracle relies on.
pub fn batch_loss(
    batch: &[&TrainExample],
    params: &ModelParams,
    enc_cfg: &EncoderConfig,
    ltc: &LongTextConfig,
    vocab: &Vocabulary,
) -> Result<f64> {
    let (_, _, image_norm, text_norm) = batch_embeddings(batch, params, enc_cfg, ltc, vocab)?;
    let (loss, _) = contrastive_loss(&image_norm, &text_norm, params.log_temp())?;
    Ok(loss)
}

/// Full backward pass: loss over the batch plus gradients for every tensor
/// in `params`. The gradient of the window mean hands 1/window_count of the
/// caption gradient to each window's backward path.
pub fn compute_gradients(
    batch: &[&TrainExample],
    params: &ModelParams,
    enc_cfg: &EncoderConfig,
    ltc: &LongTextConfig,
    vocab: &Vocabulary,
) -> Result<(ModelParams, f64)> {
    let (image_traces, text_traces, image_norm, text_norm) =
        batch_embeddings(batch, params, enc_cfg, ltc, vocab)?;
    let detail = contrastive_loss_grads(&image_norm, &text_norm, params.log_temp())?;
    if !detail.loss.is_finite() {
        return Err(Error::TrainingDiverged);
    }

    let mut grads = params.zeros_like();
    grads.log_temperature.set_item(detail.d_log_temperature);
    // fixed accumulation order: batch items in order, image tower then text
    for (i, (itrace, ttrace)) in image_traces.iter().zip(&text_traces).enumerate() {
        let d_raw_image = normalize_bw(itrace.embedding.values(), &detail.d_image[i]);
        image_bw(itrace, &d_raw_image, params, enc_cfg, &mut grads);
        long_text_bw(ttrace, &detail.d_text[i], params, enc_cfg, &mut grads);
    }
    Ok((grads, detail.loss))
}

// -------------------------------------------------------------------- adam

/// Standard Adam update with bias correction; the temperature is clamped
/// afterwards per the model invariant.
pub fn adam_step(state: &mut TrainState, grads: &ModelParams, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let (b1, b2, lr, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate, cfg.adam_eps);

    let params = state.params.named_tensors_mut();
    let ms = state.m.named_tensors_mut();
    let vs = state.v.named_tensors_mut();
    let gs = grads.named_tensors();
    debug_assert_eq!(params.len(), gs.len());
    for (((pt, mt), vt), gt) in params.into_iter().zip(ms).zip(vs).zip(gs) {
        debug_assert_eq!(pt.0, gt.0, "tensor order must agree");
        let p = pt.1.data_mut();
        let m = mt.1.data_mut();
        let v = vt.1.data_mut();
        let g = gt.1.data();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.params.clamp_log_temperature();
}

// -------------------------------------------------------------- epoch loop

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

/// Runs the full loop: per epoch, a seeded shuffle (seed + epoch index),
/// batches of `batch_size` with a final batch smaller than 2 dropped, one
/// optimizer step per batch. Divergence aborts with the state still at the
/// last finite step.
pub fn train(
    examples: &[TrainExample],
    state: &mut TrainState,
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    ltc: &LongTextConfig,
    vocab: &Vocabulary,
    mut on_epoch: impl FnMut(EpochStats),
) -> Result<()> {
    cfg.validate()?;
    enc_cfg.validate()?;
    let n = examples.len();
    if n < 2 {
        return Err(Error::DatasetTooSmall(format!(
            "training needs at least 2 examples, got {n}"
        )));
    }
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        Rng::new(cfg.seed.wrapping_add(epoch as u64)).shuffle(&mut order);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // a lone trailing sample has no negatives
            }
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (mut grads, loss) = compute_gradients(&batch, &state.params, enc_cfg, ltc, vocab)?;
            if cfg.scope == TrainScope::TextOnly {
                for (name, tensor) in grads.named_tensors_mut() {
                    if name.starts_with("image.") {
                        tensor.fill(0.0);
                    }
                }
            }
            adam_step(state, &grads, cfg);
            losses.push(loss);
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        state.epoch_losses.push(mean_loss);
        on_epoch(EpochStats { epoch, mean_loss, seconds: start.elapsed().as_secs_f64() });
    }
    Ok(())
}
