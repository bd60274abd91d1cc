//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with the measured values.
//!
//! Run with `cargo test -p lcmatch --test acceptance -- --nocapture`.

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use lcmatch::config::RunConfig;
use lcmatch::data::synthetic::{generate_synthetic, write_vocabulary};
use lcmatch::data::{load_manifest, load_samples};
use lcmatch::encoders::{
    checkpoint, encode_text_window, normalize, Embedding, EncoderConfig, ModelParams,
};
use lcmatch::evaluation::{
    evaluate, mean_and_stderr, recall_at_k, similarity_matrix, Direction, EvalOptions,
    RecallReport, SimilarityMatrix,
};
use lcmatch::longcap::{encode_long_text, LongTextConfig};
use lcmatch::rng::Rng;
use lcmatch::textpipe::{load_vocabulary_file, make_windows, tokenize, window_count, TokenSequence, Vocabulary};
use lcmatch::training::{
    batch_loss, compute_gradients, contrastive_loss, prepare_examples, train, TrainExample,
    TrainState,
};

fn verdict(name: &str, ok: bool, detail: &str) {
    println!("acceptance criterion {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
}

fn seq_of_len(n: usize) -> TokenSequence {
    TokenSequence { ids: vec![0; n], source_text: String::new(), dropped_chars: 0 }
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_windowing_suite() {
    let start = Instant::now();
    let vocab = lcmatch::textpipe::load_vocabulary("w".as_bytes()).unwrap();
    let mut rng = Rng::new(0xC1);
    let cases = 10_000;
    for _ in 0..cases {
        let context_len = 3 + rng.next_below(120) as usize;
        let capacity = context_len - 2;
        let stride = 1 + rng.next_below(capacity as u64) as usize;
        let len = rng.next_below(2_000) as usize;
        let seq = seq_of_len(len);
        let batch = make_windows(&seq, &vocab, context_len, stride).unwrap();

        // count consistency
        assert_eq!(batch.len(), window_count(len, capacity, stride).unwrap());

        // coverage of every content index
        let mut covered = vec![false; len];
        for &s in &batch.starts {
            let end = (s + capacity).min(len);
            for c in covered.iter_mut().take(end).skip(s) {
                *c = true;
            }
        }
        assert!(covered.iter().all(|&c| c), "len={len} ctx={context_len} stride={stride}");

        // stride regularity, overlap, right alignment
        for (i, pair) in batch.starts.windows(2).enumerate() {
            assert!(pair[0] < pair[1]);
            if i + 2 < batch.starts.len() {
                assert_eq!(pair[1] - pair[0], stride);
            } else {
                assert!(pair[1] - pair[0] <= stride, "final window may only move left");
            }
            let shared = capacity - (pair[1] - pair[0]);
            assert!(shared >= capacity.saturating_sub(stride));
        }
        if len > capacity {
            assert_eq!(batch.starts.last().copied(), Some(len - capacity));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = elapsed < 10.0;
    verdict("1 (windowing suite)", ok, &format!("{cases} cases in {elapsed:.2}s"));
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_short_caption_equivalence() {
    let vocab = test_vocab(40);
    let cfg = EncoderConfig {
        context_len: 77,
        vocab_size: vocab.len(),
        text_layers: 2,
        text_heads: 2,
        text_width: 32,
        image_size: 16,
        patch_size: 8,
        image_layers: 1,
        image_heads: 2,
        image_width: 16,
        embed_dim: 16,
        pool_kernel: 1,
    };
    let params = ModelParams::init(&cfg, 2);
    let ltc = LongTextConfig::defaults_for(&cfg);
    let mut rng = Rng::new(0xC2);
    let mut max_dev: f64 = 0.0;
    for _ in 0..500 {
        let len = rng.next_below(cfg.content_capacity() as u64 + 1) as usize;
        let ids = (0..len).map(|_| rng.next_below(40) as u32).collect();
        let seq = TokenSequence { ids, source_text: String::new(), dropped_chars: 0 };
        let long = encode_long_text(&seq, &vocab, &params, &cfg, &ltc).unwrap();
        let batch = make_windows(&seq, &vocab, cfg.context_len, ltc.stride).unwrap();
        assert_eq!(batch.len(), 1, "short captions must fit one window");
        let single = normalize(&encode_text_window(&batch.windows[0], &batch.masks[0], &params, &cfg).unwrap()).unwrap();
        for (a, b) in long.values().iter().zip(single.values()) {
            max_dev = max_dev.max((a - b).abs());
        }
    }
    let ok = max_dev < 1e-6;
    verdict("2 (short-caption equivalence)", ok, &format!("500 captions, max deviation {max_dev:.2e}"));
    assert!(ok);
}

fn test_vocab(content: usize) -> Vocabulary {
    let lines: Vec<String> = (0..content).map(|i| format!("w{i}")).collect();
    lcmatch::textpipe::load_vocabulary(lines.join("\n").as_bytes()).unwrap()
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_gradient_check() {
    let start = Instant::now();
    let vocab = test_vocab(20);
    // width-8 toy model; captions of 9..20 tokens are 2..5 windows
    let cfg = EncoderConfig {
        context_len: 8,
        vocab_size: vocab.len(),
        text_layers: 2,
        text_heads: 2,
        text_width: 8,
        image_size: 8,
        patch_size: 4,
        image_layers: 1,
        image_heads: 2,
        image_width: 8,
        embed_dim: 4,
        pool_kernel: 1,
    };
    let ltc = LongTextConfig { context_len: cfg.context_len, stride: 3, normalize_before_mean: false };
    let mut params = ModelParams::init(&cfg, 3);
    // moderate temperature keeps the loss curvature low enough that the
    // central-difference oracle itself is accurate at the stated step
    params.log_temperature.set_item(0.5);

    let mut rng = Rng::new(0xC3);
    let examples: Vec<TrainExample> = (0..4)
        .map(|i| {
            let mut image = lcmatch::data::PixelImage::zeros(cfg.image_size, cfg.image_size);
            for v in image.data.iter_mut() {
                *v = rng.next_f64() as f32;
            }
            let len = 9 + rng.next_below(11) as usize;
            TrainExample {
                id: format!("g{i}"),
                image,
                tokens: TokenSequence {
                    ids: (0..len).map(|_| rng.next_below(20) as u32).collect(),
                    source_text: String::new(),
                    dropped_chars: 0,
                },
            }
        })
        .collect();
    let batch: Vec<&TrainExample> = examples.iter().collect();
    for item in &batch {
        assert!(
            window_count(item.tokens.len(), cfg.content_capacity(), ltc.stride).unwrap() >= 2,
            "the check must exercise the multi-window path"
        );
    }

    let (grads, loss) = compute_gradients(&batch, &params, &cfg, &ltc, &vocab).unwrap();
    assert!(loss.is_finite());

    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    let mut pick = Rng::new(0xC3C3);
    while coords.len() < 120 {
        let t = pick.next_below(sizes.len() as u64) as usize;
        coords.push((t, pick.next_below(sizes[t] as u64) as usize));
    }
    coords.push((sizes.len() - 1, 0)); // the temperature itself

    // central differences at the stated step; tolerance is relative 1e-4
    // with an absolute floor of 1e-5 covering the oracle's truncation error
    let h = 1e-4;
    let mut checked = 0usize;
    let mut max_rel: f64 = 0.0;
    for (t, e) in coords {
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.named_tensors_mut()[t].1.data_mut()[e] += delta;
            batch_loss(&batch, &p, &cfg, &ltc, &vocab).unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = grads.named_tensors()[t].1.data()[e];
        let scale = numeric.abs().max(analytic.abs());
        let diff = (numeric - analytic).abs();
        assert!(
            diff <= 1e-5 + 1e-4 * scale,
            "tensor {t} coord {e}: analytic {analytic} vs numeric {numeric}"
        );
        if scale > 1e-3 {
            max_rel = max_rel.max(diff / scale);
        }
        checked += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = elapsed < 120.0;
    verdict(
        "3 (gradient check)",
        ok,
        &format!("{checked} coordinates, worst relative error {max_rel:.2e}, {elapsed:.1}s"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_loss_calibration() {
    let mut worst_ln_n: f64 = 0.0;
    for n in [2usize, 4, 8] {
        let e: Vec<Embedding> = (0..n)
            .map(|_| normalize(&Embedding::from_values(vec![1.0, 0.0, 0.0])).unwrap())
            .collect();
        let (loss, _) = contrastive_loss(&e, &e.clone(), 0.0).unwrap();
        worst_ln_n = worst_ln_n.max((loss - (n as f64).ln()).abs());
    }

    let img = vec![
        Embedding::from_values(vec![1.0, 0.0]),
        Embedding::from_values(vec![0.0, 1.0]),
    ];
    let (loss, logits) = contrastive_loss(&img, &img.clone(), 2f64.ln()).unwrap();
    assert_eq!(logits.len(), 4);
    assert!((logits[0] - 2.0).abs() < 1e-12 && logits[1].abs() < 1e-12);
    let dev = (loss - 0.126928).abs();

    let ok = worst_ln_n < 1e-9 && dev < 1e-6;
    verdict(
        "4 (loss calibration)",
        ok,
        &format!("uniform dev {worst_ln_n:.2e}, diagonal-2 case dev {dev:.2e}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_recall_oracle() {
    fn oracle(sim: &SimilarityMatrix, k: usize) -> f64 {
        let n = sim.n;
        let mut hits = 0;
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                sim.at(i, b).partial_cmp(&sim.at(i, a)).unwrap().then_with(|| a.cmp(&b))
            });
            if order[..k].contains(&i) {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    let mut rng = Rng::new(0xC5);
    let mut checked_matrices = 0;
    for _ in 0..100 {
        let n = 2 + rng.next_below(99) as usize; // up to 100x100
        // mix smooth and heavily tied matrices
        let quantize = rng.next_below(2) == 0;
        let values: Vec<f64> = (0..n * n)
            .map(|_| {
                if quantize {
                    (rng.next_below(7) as f64) / 6.0
                } else {
                    rng.next_normal()
                }
            })
            .collect();
        let sim = SimilarityMatrix { values, n, direction: Direction::ImageToText };
        for k in 1..=n {
            assert_eq!(recall_at_k(&sim, k).unwrap(), oracle(&sim, k), "n={n} k={k}");
        }
        assert_eq!(recall_at_k(&sim, n).unwrap(), 1.0, "true match always inside top-N");
        checked_matrices += 1;
    }
    verdict("5 (recall oracle)", true, &format!("{checked_matrices} matrices, all k"));
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_statistics() {
    let per_seed = [0.070, 0.072, 0.068, 0.071, 0.069];
    let (mean, stderr) = mean_and_stderr(&per_seed);
    let mean_dev = (mean - 0.070).abs();
    let stderr_dev = (stderr - 0.000707106781186548).abs();
    let ok = mean_dev < 1e-9 && stderr_dev < 1e-9;
    verdict(
        "6 (seed statistics)",
        ok,
        &format!("mean dev {mean_dev:.2e}, stderr dev {stderr_dev:.2e}"),
    );
    assert!(ok);
}

// ------------------------------------------------------------ criteria 7 & 8

struct DeskRun {
    checkpoint_bytes: Vec<u8>,
    report: RecallReport,
    epoch_losses: Vec<f64>,
    elapsed_seconds: f64,
    r_at_1: f64,
}

/// The full desk pipeline driven exactly like the CLI: generate data, train
/// with the shipped desk configuration, evaluate image-to-text on the
/// training pool.
fn desk_run() -> DeskRun {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();

    // the shipped desk configuration, rebased into the temp dir
    let config_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk-defaults.conf");
    let text = std::fs::read_to_string(&config_path).expect("desk config is checked in");
    let cfg = RunConfig::parse(&text, dir.path()).unwrap();

    // gen-data
    let data_dir = cfg.vocab_path.parent().unwrap().to_path_buf();
    std::fs::create_dir_all(&data_dir).unwrap();
    write_vocabulary(&cfg.vocab_path).unwrap();
    let vocab = load_vocabulary_file(&cfg.vocab_path).unwrap();
    let (manifest, _) = generate_synthetic(64, &vocab, 0, cfg.image_size, &data_dir).unwrap();
    assert_eq!(manifest.len(), 64);

    let enc_cfg = cfg.encoder_config(vocab.len());
    enc_cfg.validate().unwrap();
    let ltc = cfg.long_text_config();

    // every caption must need at least two windows
    for record in &manifest.records {
        let tokens = tokenize(&record.caption, &vocab);
        assert!(
            window_count(tokens.len(), enc_cfg.content_capacity(), ltc.stride).unwrap() >= 2,
            "caption {} fits one window",
            record.id
        );
    }

    let loaded = load_manifest(&cfg.manifest_path).unwrap();
    let samples = load_samples(&loaded, cfg.image_size).unwrap();
    let examples = prepare_examples(&samples, &vocab);

    let mut params = ModelParams::init(&enc_cfg, cfg.seed);
    params.log_temperature.set_item(cfg.initial_log_temperature);
    params.clamp_log_temperature();
    let mut state = TrainState::new(params);
    let train_cfg = cfg.train_config();
    train(&examples, &mut state, &train_cfg, &enc_cfg, &ltc, &vocab, |_| {}).unwrap();

    let checkpoint_path = cfg.output_dir.join("checkpoint.lcm");
    std::fs::create_dir_all(&cfg.output_dir).unwrap();
    checkpoint::save(&state.params, &checkpoint_path).unwrap();
    let checkpoint_bytes = std::fs::read(&checkpoint_path).unwrap();

    let reloaded = checkpoint::load(&checkpoint_path, &enc_cfg).unwrap();
    let opts = EvalOptions {
        dataset_name: cfg.dataset_name.clone(),
        direction: Direction::ImageToText,
        sample_size: cfg.sample_size,
        seeds: cfg.seeds.clone(),
        k_values: cfg.k_values.clone(),
        threads: 1,
    };
    let report = evaluate(&examples, &vocab, &reloaded, &enc_cfg, &ltc, &opts).unwrap();
    let r_at_1 = report.per_k.iter().find(|pk| pk.k == 1).unwrap().mean;

    DeskRun {
        checkpoint_bytes,
        report,
        epoch_losses: state.epoch_losses.clone(),
        elapsed_seconds: started.elapsed().as_secs_f64(),
        r_at_1,
    }
}

fn first_desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(desk_run)
}

#[test]
fn criterion_7_end_to_end_desk_run() {
    let run = first_desk_run();
    let losses = &run.epoch_losses;
    let progress = losses[2] < losses[0]; // epoch-3 vs epoch-1 mean loss
    let recall_ok = run.r_at_1 >= 0.5;
    let time_ok = run.elapsed_seconds < 300.0;
    let ok = progress && recall_ok && time_ok;
    verdict(
        "7 (end-to-end desk run)",
        ok,
        &format!(
            "R@1 {:.3} (need >= 0.5), epoch-1 loss {:.4} -> epoch-3 loss {:.4}, {:.0}s",
            run.r_at_1, losses[0], losses[2], run.elapsed_seconds
        ),
    );
    assert!(time_ok, "desk run exceeded 5 minutes");
    assert!(progress, "epoch-3 mean loss must undercut epoch-1");
    assert!(recall_ok, "R@1 {:.3} below 0.5", run.r_at_1);
}

#[test]
fn criterion_8_determinism() {
    let first = first_desk_run();
    let second = desk_run();
    let checkpoints_match = first.checkpoint_bytes == second.checkpoint_bytes;
    let reports_match = first.report == second.report;
    let ok = checkpoints_match && reports_match;
    verdict(
        "8 (determinism)",
        ok,
        &format!("checkpoints bitwise equal: {checkpoints_match}, reports identical: {reports_match}"),
    );
    assert!(ok);
}
