//! Long-caption encoding: encode every sliding window of a token sequence
//! and average the per-window embeddings into one caption embedding.

use crate::encoders::{
    normalize, normalize_bw, text_window_bw, text_window_forward, Embedding, EncoderConfig,
    ModelParams, TextWindowTrace,
};
use crate::error::{Error, Result};
use crate::textpipe::{make_windows, TokenSequence, Vocabulary};

/// Windowing and aggregation settings. Aggregation is the arithmetic mean of
/// the per-window embeddings; `normalize_before_mean` controls whether each
/// window embedding is scaled to unit norm before averaging (off by default,
/// so window magnitudes act as implicit weights).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LongTextConfig {
    pub context_len: usize,
    pub stride: usize,
    pub normalize_before_mean: bool,
}

impl LongTextConfig {
    /// Stride defaults to half the content capacity (50% overlap).
    pub fn defaults_for(cfg: &EncoderConfig) -> Self {
        LongTextConfig {
            context_len: cfg.context_len,
            stride: (cfg.content_capacity() / 2).max(1),
            normalize_before_mean: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len < 3 {
            return Err(Error::InvalidContext { context_len: self.context_len });
        }
        let capacity = self.context_len - 2;
        if self.stride < 1 || self.stride > capacity {
            return Err(Error::InvalidStride { stride: self.stride, content_capacity: capacity });
        }
        Ok(())
    }
}

pub(crate) struct LongTextTrace {
    pub window_traces: Vec<TextWindowTrace>,
    /// Per-window embedding after the optional per-window normalization,
    /// i.e. exactly the vectors that were averaged.
    pub averaged_inputs: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub normalized: Embedding,
    pub normalize_before_mean: bool,
}

pub(crate) fn long_text_forward(
    seq: &TokenSequence,
    vocab: &Vocabulary,
    params: &ModelParams,
    cfg: &EncoderConfig,
    ltc: &LongTextConfig,
) -> Result<LongTextTrace> {
    ltc.validate()?;
    if ltc.context_len != cfg.context_len {
        return Err(Error::shape(format!(
            "window context {} does not match encoder context {}",
            ltc.context_len, cfg.context_len
        )));
    }
    let batch = make_windows(seq, vocab, ltc.context_len, ltc.stride)?;
    let count = batch.len();
    let mut window_traces = Vec::with_capacity(count);
    let mut averaged_inputs = Vec::with_capacity(count);
    let mut mean = vec![0.0; cfg.embed_dim];
    // fixed sequential reduction over windows keeps results bit-reproducible
    for (row, mask) in batch.windows.iter().zip(&batch.masks) {
        let trace = text_window_forward(row, mask, params, cfg)?;
        let contribution = if ltc.normalize_before_mean {
            normalize(&trace.embedding)?.values().to_vec()
        } else {
            trace.embedding.values().to_vec()
        };
        for (m, &c) in mean.iter_mut().zip(&contribution) {
            *m += c;
        }
        averaged_inputs.push(contribution);
        window_traces.push(trace);
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let normalized = normalize(&Embedding::from_values(mean.clone()))?;
    Ok(LongTextTrace {
        window_traces,
        averaged_inputs,
        mean,
        normalized,
        normalize_before_mean: ltc.normalize_before_mean,
    })
}

/// Accumulates gradients through mean aggregation and all window forwards,
/// given d(loss)/d(normalized caption embedding).
pub(crate) fn long_text_bw(
    trace: &LongTextTrace,
    d_normalized: &[f64],
    params: &ModelParams,
    cfg: &EncoderConfig,
    grads: &mut ModelParams,
) {
    let count = trace.window_traces.len() as f64;
    let d_mean = normalize_bw(&trace.mean, d_normalized);
    for (wtrace, averaged) in trace.window_traces.iter().zip(&trace.averaged_inputs) {
        let d_contribution: Vec<f64> = d_mean.iter().map(|&g| g / count).collect();
        let d_raw = if trace.normalize_before_mean {
            normalize_bw(wtrace.embedding.values(), &d_contribution)
        } else {
            d_contribution
        };
        let _ = averaged;
        text_window_bw(wtrace, &d_raw, params, cfg, grads);
    }
}

/// Unit-norm embedding of a caption of any length: windows are encoded
/// independently and averaged, then the mean is normalized.
pub fn encode_long_text(
    seq: &TokenSequence,
    vocab: &Vocabulary,
    params: &ModelParams,
    cfg: &EncoderConfig,
    ltc: &LongTextConfig,
) -> Result<Embedding> {
    Ok(long_text_forward(seq, vocab, params, cfg, ltc)?.normalized)
}

/// Maps `encode_long_text` over the batch, preserving order; an error on
/// item `i` is reported with that index.
pub fn encode_caption_batch(
    seqs: &[TokenSequence],
    vocab: &Vocabulary,
    params: &ModelParams,
    cfg: &EncoderConfig,
    ltc: &LongTextConfig,
) -> Result<Vec<Embedding>> {
    seqs.iter()
        .enumerate()
        .map(|(index, seq)| {
            encode_long_text(seq, vocab, params, cfg, ltc)
                .map_err(|e| Error::BatchItem { index, source: Box::new(e) })
        })
        .collect()
}
