//! Temporary diagnostics for desk-run training dynamics. Run explicitly:
//! cargo test -p lcmatch --test diag -- --ignored --nocapture

use lcmatch::config::RunConfig;
use lcmatch::data::synthetic::{generate_synthetic, write_vocabulary};
use lcmatch::data::{load_manifest, load_samples};
use lcmatch::encoders::{encode_image, normalize, ModelParams};
use lcmatch::longcap::{encode_long_text, LongTextConfig};
use lcmatch::textpipe::load_vocabulary_file;
use lcmatch::training::{compute_gradients, prepare_examples, train, TrainState};

fn sim_stats(embs: &[Vec<f64>]) -> (f64, f64, f64) {
    let n = embs.len();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| a * b).sum();
            min = min.min(s);
            max = max.max(s);
            sum += s;
            count += 1;
        }
    }
    (min, sum / count as f64, max)
}

fn recall1(image: &[Vec<f64>], text: &[Vec<f64>]) -> usize {
    let n = image.len();
    let mut hits = 0;
    for i in 0..n {
        let own: f64 = image[i].iter().zip(&text[i]).map(|(a, b)| a * b).sum();
        let mut rank = 0;
        for (j, t) in text.iter().enumerate() {
            if j == i {
                continue;
            }
            let s: f64 = image[i].iter().zip(t).map(|(a, b)| a * b).sum();
            if s > own || (s == own && j < i) {
                rank += 1;
            }
        }
        if rank < 1 {
            hits += 1;
        }
    }
    hits
}

#[test]
#[ignore]
fn measure_embedding_spread() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    std::fs::create_dir_all(&out).unwrap();
    let vocab_path = out.join("vocab.txt");
    write_vocabulary(&vocab_path).unwrap();
    let vocab = load_vocabulary_file(&vocab_path).unwrap();
    generate_synthetic(64, &vocab, 0, 32, &out).unwrap();
    let manifest = load_manifest(&out.join("manifest.jsonl")).unwrap();
    let samples = load_samples(&manifest, 32).unwrap();
    let examples = prepare_examples(&samples, &vocab);

    let run_cfg = RunConfig::default();
    let enc_cfg = run_cfg.encoder_config(vocab.len());
    let ltc = run_cfg.long_text_config();
    let params = ModelParams::init(&enc_cfg, 0);

    let embed_all = |p: &ModelParams| {
        let text: Vec<Vec<f64>> = examples
            .iter()
            .map(|e| encode_long_text(&e.tokens, &vocab, p, &enc_cfg, &ltc).unwrap().values().to_vec())
            .collect();
        let image: Vec<Vec<f64>> = examples
            .iter()
            .map(|e| normalize(&encode_image(&e.image, p, &enc_cfg).unwrap()).unwrap().values().to_vec())
            .collect();
        (text, image)
    };

    let (text, image) = embed_all(&params);
    println!("init text offdiag cos (min/mean/max): {:?}", sim_stats(&text));
    println!("init image offdiag cos (min/mean/max): {:?}", sim_stats(&image));

    let ltc = LongTextConfig { normalize_before_mean: true, ..ltc };
    let (lt_init, eps) = (2.0, 1e-3);
    for train_seed in [2u64, 0] {
        let mut p = ModelParams::init(&enc_cfg, train_seed);
        p.log_temperature.set_item(lt_init);
        let mut state = TrainState::new(p);
        let mut tc = run_cfg.train_config();
        tc.learning_rate = 1e-3;
        tc.epochs = 1;
        tc.batch_size = 16;
        tc.adam_eps = eps;
        tc.scope = lcmatch::training::TrainScope::TextOnly;
        for epoch_group in 0..10 {
            tc.seed = train_seed.wrapping_add(epoch_group); // seed + epoch derivation
            let mut loss = 0.0;
            train(&examples, &mut state, &tc, &enc_cfg, &ltc, &vocab, |s| {
                loss = s.mean_loss;
            })
            .unwrap();
            let (text, image) = embed_all(&state.params);
            println!(
                "lt={lt_init:.2} eps={eps:.0e} seed={train_seed} epoch {epoch_group}: loss={loss:.4} R@1={} text_mean={:.3} img_mean={:.3}",
                recall1(&image, &text),
                sim_stats(&text).1,
                sim_stats(&image).1,
            );
        }
    }
}
