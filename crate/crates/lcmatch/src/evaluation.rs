//! Retrieval evaluation: sample pairs, rank by cosine similarity, compute
//! Recall@K, aggregate over seeds with standard error.

use serde::{Deserialize, Serialize};

use crate::encoders::{encode_image, normalize, Embedding, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::longcap::{encode_long_text, LongTextConfig};
use crate::rng::Rng;
use crate::textpipe::Vocabulary;
use crate::training::TrainExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "image-to-text")]
    ImageToText,
    #[serde(rename = "text-to-image")]
    TextToImage,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::ImageToText => "image-to-text",
            Direction::TextToImage => "text-to-image",
        }
    }

    pub fn parse(s: &str) -> Result<Direction> {
        match s {
            "image-to-text" => Ok(Direction::ImageToText),
            "text-to-image" => Ok(Direction::TextToImage),
            other => Err(Error::config("direction", format!("unknown direction {other:?}"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row i holds query i's inner products against all candidates.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub values: Vec<f64>,
    pub n: usize,
    pub direction: Direction,
}

impl SimilarityMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Inner products of every query against every candidate; queries are images
/// for image-to-text and captions for text-to-image.
pub fn similarity_matrix(
    image_embs: &[Embedding],
    text_embs: &[Embedding],
    direction: Direction,
) -> Result<SimilarityMatrix> {
    if image_embs.len() != text_embs.len() {
        return Err(Error::shape(format!(
            "{} image embeddings vs {} text embeddings",
            image_embs.len(),
            text_embs.len()
        )));
    }
    let n = image_embs.len();
    let (queries, candidates) = match direction {
        Direction::ImageToText => (image_embs, text_embs),
        Direction::TextToImage => (text_embs, image_embs),
    };
    let mut values = vec![0.0; n * n];
    for (i, q) in queries.iter().enumerate() {
        if q.dim() != candidates.first().map_or(q.dim(), |c| c.dim()) {
            return Err(Error::shape("embedding dimensions disagree"));
        }
        for (j, c) in candidates.iter().enumerate() {
            values[i * n + j] = crate::tensor::dot(q.values(), c.values());
        }
    }
    Ok(SimilarityMatrix { values, n, direction })
}

/// Fraction of queries whose true match ranks inside the top k. Ties break
/// toward the lower candidate index, so results are deterministic.
pub fn recall_at_k(sim: &SimilarityMatrix, k: usize) -> Result<f64> {
    let n = sim.n;
    if k < 1 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let mut hits = 0usize;
    for i in 0..n {
        let own = sim.at(i, i);
        let mut rank = 0usize; // candidates ranked strictly above the true match
        for j in 0..n {
            if j == i {
                continue;
            }
            let v = sim.at(i, j);
            if v > own || (v == own && j < i) {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Mean and standard error over per-seed values: sample standard deviation
/// (n-1 denominator) divided by sqrt(n); a single seed has stderr 0.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0, "no values to aggregate");
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerK {
    pub k: usize,
    pub mean: f64,
    pub stderr: f64,
    pub per_seed: Vec<f64>,
}

/// Recall@K aggregated over seeds, plus the run metadata needed to reproduce
/// it. Serializes to the stable report JSON schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub dataset: String,
    pub direction: Direction,
    pub sample_size: usize,
    pub seeds: Vec<u64>,
    pub k_values: Vec<usize>,
    pub per_k: Vec<PerK>,
    pub notes: Vec<String>,
}

/// Published reference scores (percent, with standard error), kept for
/// context in rendered reports. These come from GPU-scale fine-tuning runs on
/// licensed datasets and are not reproducible here; they are never asserted.
pub const REFERENCE_ROWS: &[(&str, &str, [(usize, f64, f64); 4])] = &[
    ("PubMedCLIP/RN50", "ROCO", [(1, 7.1, 0.11), (5, 21.0, 0.21), (10, 32.0, 0.24), (20, 45.0, 0.15)]),
    ("PubMedCLIP/RN50x4", "ROCO", [(1, 7.7, 0.12), (5, 23.0, 0.25), (10, 34.0, 0.55), (20, 48.0, 0.43)]),
    ("PubMedCLIP/ViT32", "ROCO", [(1, 8.5, 0.17), (5, 26.0, 0.32), (10, 38.0, 0.22), (20, 53.0, 0.45)]),
    ("MedICaT-SciBERT", "ROCO", [(1, 7.6, 0.59), (5, 26.0, 1.6), (10, 41.0, 1.6), (20, 58.0, 1.3)]),
    ("ClipMD", "ROCO", [(1, 17.0, 0.35), (5, 40.0, 0.44), (10, 54.0, 0.37), (20, 68.0, 0.49)]),
    ("CLIP/ViT32", "MedICaT", [(1, 3.2, 0.19), (5, 9.0, 0.19), (10, 13.0, 0.11), (20, 19.0, 0.16)]),
    ("ClipMD", "MedICaT", [(1, 29.0, 0.43), (5, 57.0, 0.44), (10, 69.0, 0.44), (20, 79.0, 0.58)]),
];

/// Options for `evaluate` beyond the protocol parameters themselves.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub dataset_name: String,
    pub direction: Direction,
    pub sample_size: usize,
    pub seeds: Vec<u64>,
    pub k_values: Vec<usize>,
    pub threads: usize,
}

/// Runs the full protocol: per seed, sample `min(sample_size, split size)`
/// pairs without replacement, embed them, rank within the sampled pool, and
/// compute recall for every K; aggregate mean and stderr over seeds.
///
/// Per-pair embeddings are pure functions of the parameters, so they are
/// computed once per distinct pair and shared across seeds; results are
/// identical to re-embedding per seed.
pub fn evaluate(
    examples: &[TrainExample],
    vocab: &Vocabulary,
    params: &ModelParams,
    enc_cfg: &EncoderConfig,
    ltc: &LongTextConfig,
    opts: &EvalOptions,
) -> Result<RecallReport> {
    let n = examples.len();
    if n == 0 {
        return Err(Error::DatasetTooSmall("evaluation split is empty".into()));
    }
    if opts.k_values.is_empty() {
        return Err(Error::config("k_values", "must not be empty"));
    }
    if opts.seeds.is_empty() {
        return Err(Error::config("seeds", "must not be empty"));
    }
    let max_k = *opts.k_values.iter().max().unwrap();
    let pool = opts.sample_size.min(n);
    if pool < max_k {
        return Err(Error::DatasetTooSmall(format!(
            "pool of {pool} pairs cannot rank top-{max_k}"
        )));
    }

    // indices sampled per seed, then the union embedded once
    let per_seed_indices: Vec<Vec<usize>> = opts
        .seeds
        .iter()
        .map(|&seed| Rng::new(seed).sample_indices(n, pool))
        .collect();
    let mut needed: Vec<usize> = per_seed_indices.iter().flatten().copied().collect();
    needed.sort_unstable();
    needed.dedup();

    let embed_one = |&idx: &usize| -> Result<(usize, Embedding, Embedding)> {
        let example = &examples[idx];
        let image = normalize(&encode_image(&example.image, params, enc_cfg)?)?;
        let text = encode_long_text(&example.tokens, vocab, params, enc_cfg, ltc)?;
        Ok((idx, image, text))
    };
    let embedded: Vec<(usize, Embedding, Embedding)> =
        crate::parallel::map(&needed, opts.threads, embed_one)?;
    let mut image_by_idx: Vec<Option<Embedding>> = vec![None; n];
    let mut text_by_idx: Vec<Option<Embedding>> = vec![None; n];
    for (idx, image, text) in embedded {
        image_by_idx[idx] = Some(image);
        text_by_idx[idx] = Some(text);
    }

    let mut per_seed_recalls: Vec<Vec<f64>> = vec![Vec::new(); opts.k_values.len()];
    for indices in &per_seed_indices {
        let image_embs: Vec<Embedding> =
            indices.iter().map(|&i| image_by_idx[i].clone().unwrap()).collect();
        let text_embs: Vec<Embedding> =
            indices.iter().map(|&i| text_by_idx[i].clone().unwrap()).collect();
        let sim = similarity_matrix(&image_embs, &text_embs, opts.direction)?;
        for (slot, &k) in per_seed_recalls.iter_mut().zip(&opts.k_values) {
            slot.push(recall_at_k(&sim, k)?);
        }
    }

    let per_k = opts
        .k_values
        .iter()
        .zip(&per_seed_recalls)
        .map(|(&k, values)| {
            let (mean, stderr) = mean_and_stderr(values);
            PerK { k, mean, stderr, per_seed: values.clone() }
        })
        .collect();

    let mut notes = vec![
        format!("candidate pool is the sampled pairs themselves (pool size {pool})"),
        "stderr is the sample standard deviation (n-1) over seeds divided by sqrt(n)".to_string(),
    ];
    if opts.seeds.len() == 1 {
        notes.push("single seed: stderr defined as 0".to_string());
    }

    Ok(RecallReport {
        dataset: opts.dataset_name.clone(),
        direction: opts.direction,
        sample_size: pool,
        seeds: opts.seeds.clone(),
        k_values: opts.k_values.clone(),
        per_k,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

/// "17.0±0.35" style cell: percent mean to one decimal, percent stderr to
/// two decimals.
fn cell(mean_pct: f64, err_pct: f64) -> String {
    format!("{:.1}\u{b1}{:.2}", mean_pct, err_pct)
}

/// Renders the report. The table mirrors the usual Recall@K comparison
/// layout (one row per model, one column per K, mean with stderr); the JSON
/// schema is stable: dataset, direction, sample_size, seeds, k_values,
/// per_k: {k, mean, stderr, per_seed[]}, notes.
pub fn render_report(report: &RecallReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).expect("report serializes") + "\n"
        }
        ReportFormat::Table => {
            let mut out = String::new();
            out.push_str(&format!(
                "Recall@K comparison on {} ({}, pool {}, {} seeds)\n",
                report.dataset,
                report.direction,
                report.sample_size,
                report.seeds.len()
            ));
            let name_w = 22usize;
            out.push_str(&format!("{:<name_w$}", "Name"));
            for k in &report.k_values {
                out.push_str(&format!("{:>12}", format!("R@{k}")));
            }
            out.push('\n');
            out.push_str(&format!("{:<name_w$}", "this-run"));
            for pk in &report.per_k {
                out.push_str(&format!("{:>12}", cell(pk.mean * 100.0, pk.stderr * 100.0)));
            }
            out.push('\n');
            for note in &report.notes {
                out.push_str(&format!("note: {note}\n"));
            }
            out.push('\n');
            out.push_str("published reference results (different datasets and scale, not reproduced here):\n");
            for dataset in ["ROCO", "MedICaT"] {
                out.push_str(&format!("  {dataset}:\n"));
                out.push_str(&format!("  {:<20}", "Name"));
                for k in [1, 5, 10, 20] {
                    out.push_str(&format!("{:>12}", format!("R@{k}")));
                }
                out.push('\n');
                for (model, ds, cells) in REFERENCE_ROWS {
                    if *ds != dataset {
                        continue;
                    }
                    out.push_str(&format!("  {model:<20}"));
                    for (_, mean, err) in cells {
                        out.push_str(&format!("{:>12}", cell(*mean, *err)));
                    }
                    out.push('\n');
                }
            }
            out
        }
    }
}

pub fn parse_report_json(text: &str) -> Result<RecallReport> {
    serde_json::from_str(text).map_err(|e| Error::Parse { line: 0, message: e.to_string() })
}
