//! Command-line interface: reproducible runs driven by a config file plus a
//! handful of inspection subcommands.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{DirectionChoice, RunConfig, SplitChoice};
use crate::data::{load_manifest, load_samples, split_dataset, DatasetManifest};
use crate::encoders::{checkpoint, encode_image, normalize};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, render_report, EvalOptions, ReportFormat};
use crate::longcap::encode_long_text;
use crate::textpipe::{load_vocabulary_file, make_windows, tokenize};
use crate::training::{prepare_examples, train, TrainState};

const USAGE: &str = "\
lcmatch - dual-encoder image-text matching with sliding-window caption encoding

Usage: lcmatch <command> [options]

Commands:
  tokenize     --vocab <file> <text>           print token ids
  windows      --vocab <file> [--context-len N] [--stride N] <text>
                                               print window count and starts
  encode-text  --config <file> --checkpoint <file> <text>
                                               print the caption embedding
  encode-image --config <file> --checkpoint <file> <image>
                                               print the image embedding
  train        --config <file> [--threads N]  train; writes checkpoint + log
  eval         --config <file> --checkpoint <file> [--direction D] [--threads N]
                                               write Recall@K reports
  gen-data     --out <dir> --count N [--seed S] [--image-size N]
                                               generate a synthetic dataset
  report       --json <file> [--format table|json]
                                               render a stored report

Run `lcmatch <command> --help` for details. Exit codes: 0 ok, 1 usage/config
error, 2 runtime error.
";

pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{USAGE}");
            1
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult = std::result::Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn dispatch(args: &[String]) -> CliResult {
    let Some(command) = args.first() else {
        println!("{USAGE}");
        return Ok(());
    };
    let rest = &args[1..];
    if command == "--help" || command == "-h" || command == "help" {
        println!("{USAGE}");
        return Ok(());
    }
    match command.as_str() {
        "tokenize" => cmd_tokenize(rest),
        "windows" => cmd_windows(rest),
        "encode-text" => cmd_encode_text(rest),
        "encode-image" => cmd_encode_image(rest),
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "gen-data" => cmd_gen_data(rest),
        "report" => cmd_report(rest),
        other => Err(usage(format!("unknown command {other:?}"))),
    }
}

/// `--flag value` pairs plus positionals, in any order.
struct Parsed {
    flags: std::collections::HashMap<String, String>,
    positionals: Vec<String>,
}

fn parse_flags(args: &[String], allowed: &[&str]) -> std::result::Result<Parsed, CliError> {
    let mut flags = std::collections::HashMap::new();
    let mut positionals = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        if arg == "--help" || arg == "-h" {
            return Err(usage("help requested"));
        }
        if let Some(name) = arg.strip_prefix("--") {
            if !allowed.contains(&name) {
                return Err(usage(format!("unknown flag --{name}")));
            }
            let value = it.next().ok_or_else(|| usage(format!("--{name} needs a value")))?;
            flags.insert(name.to_string(), value.clone());
        } else {
            positionals.push(arg.clone());
        }
    }
    Ok(Parsed { flags, positionals })
}

impl Parsed {
    fn require(&self, name: &str) -> std::result::Result<&str, CliError> {
        self.flags
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| usage(format!("missing required flag --{name}")))
    }

    fn get_parse<T: std::str::FromStr>(
        &self,
        name: &str,
        default: T,
    ) -> std::result::Result<T, CliError> {
        match self.flags.get(name) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| usage(format!("--{name}: cannot parse {v:?}"))),
        }
    }

    fn one_positional(&self, what: &str) -> std::result::Result<&str, CliError> {
        match self.positionals.as_slice() {
            [one] => Ok(one),
            [] => Err(usage(format!("missing {what}"))),
            _ => Err(usage(format!("expected exactly one {what}"))),
        }
    }
}

fn cmd_tokenize(args: &[String]) -> CliResult {
    let parsed = parse_flags(args, &["vocab"])?;
    let vocab_path = PathBuf::from(parsed.require("vocab")?);
    let text = parsed.one_positional("text argument")?;
    let vocab = load_vocabulary_file(&vocab_path)?;
    let seq = tokenize(text, &vocab);
    if seq.dropped_chars > 0 {
        eprintln!("warning: {} characters not in the vocabulary were dropped", seq.dropped_chars);
    }
    let ids: Vec<String> = seq.ids.iter().map(|id| id.to_string()).collect();
    println!("{}", ids.join(" "));
    Ok(())
}

fn cmd_windows(args: &[String]) -> CliResult {
    let parsed = parse_flags(args, &["vocab", "context-len", "stride"])?;
    let vocab_path = PathBuf::from(parsed.require("vocab")?);
    let text = parsed.one_positional("text argument")?;
    let context_len: usize = parsed.get_parse("context-len", 77)?;
    let default_stride = (context_len.saturating_sub(2) / 2).max(1);
    let stride: usize = parsed.get_parse("stride", default_stride)?;
    let vocab = load_vocabulary_file(&vocab_path)?;
    let seq = tokenize(text, &vocab);
    let batch = make_windows(&seq, &vocab, context_len, stride)?;
    println!("windows\t{}", batch.len());
    let starts: Vec<String> = batch.starts.iter().map(|s| s.to_string()).collect();
    println!("starts\t{}", starts.join(","));
    Ok(())
}

fn load_model(
    config_path: &str,
    checkpoint_path: &str,
) -> Result<(RunConfig, crate::textpipe::Vocabulary, crate::encoders::EncoderConfig, crate::encoders::ModelParams)>
{
    let cfg = RunConfig::load(Path::new(config_path))?;
    let vocab = load_vocabulary_file(&cfg.vocab_path)?;
    let enc_cfg = cfg.encoder_config(vocab.len());
    enc_cfg.validate()?;
    let params = checkpoint::load(Path::new(checkpoint_path), &enc_cfg)?;
    Ok((cfg, vocab, enc_cfg, params))
}

fn print_embedding(values: &[f64]) {
    let rendered: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
    println!("{}", rendered.join(" "));
}

fn cmd_encode_text(args: &[String]) -> CliResult {
    let parsed = parse_flags(args, &["config", "checkpoint"])?;
    let text = parsed.one_positional("text argument")?.to_string();
    let (cfg, vocab, enc_cfg, params) =
        load_model(parsed.require("config")?, parsed.require("checkpoint")?)?;
    let seq = tokenize(&text, &vocab);
    let embedding = encode_long_text(&seq, &vocab, &params, &enc_cfg, &cfg.long_text_config())?;
    print_embedding(embedding.values());
    Ok(())
}

fn cmd_encode_image(args: &[String]) -> CliResult {
    let parsed = parse_flags(args, &["config", "checkpoint"])?;
    let image_path = parsed.one_positional("image path")?.to_string();
    let (cfg, _vocab, enc_cfg, params) =
        load_model(parsed.require("config")?, parsed.require("checkpoint")?)?;
    let image = crate::data::image_io::load_image(Path::new(&image_path), cfg.image_size)?;
    let embedding = normalize(&encode_image(&image, &params, &enc_cfg)?)?;
    print_embedding(embedding.values());
    Ok(())
}

fn select_split(
    manifest: &DatasetManifest,
    choice: SplitChoice,
    split_seed: u64,
) -> Result<DatasetManifest> {
    if choice == SplitChoice::All {
        return Ok(manifest.clone());
    }
    let (train, val, test) = split_dataset(manifest, split_seed)?;
    Ok(match choice {
        SplitChoice::Train => train,
        SplitChoice::Val => val,
        SplitChoice::Test => test,
        SplitChoice::All => unreachable!(),
    })
}

fn cmd_train(args: &[String]) -> CliResult {
    let parsed = parse_flags(args, &["config", "threads"])?;
    let _threads: usize = parsed.get_parse("threads", 1)?; // training is single-writer
    let cfg = RunConfig::load(Path::new(parsed.require("config")?))?;
    cfg.validate()?;
    let vocab = load_vocabulary_file(&cfg.vocab_path)?;
    let enc_cfg = cfg.encoder_config(vocab.len());
    enc_cfg.validate()?;
    let ltc = cfg.long_text_config();
    let manifest = load_manifest(&cfg.manifest_path)?;
    let split = select_split(&manifest, cfg.train_split, cfg.split_seed)?;
    let samples = load_samples(&split, cfg.image_size)?;
    let examples = prepare_examples(&samples, &vocab);

    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::io(cfg.output_dir.display().to_string(), e))?;
    let log_path = cfg.output_dir.join("train.log");
    let mut log = std::fs::File::create(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    let mut params = crate::encoders::ModelParams::init(&enc_cfg, cfg.seed);
    params.log_temperature.set_item(cfg.initial_log_temperature);
    params.clamp_log_temperature();
    let mut state = TrainState::new(params);
    let train_cfg = cfg.train_config();
    let mut log_error: Option<std::io::Error> = None;
    train(&examples, &mut state, &train_cfg, &enc_cfg, &ltc, &vocab, |stats| {
        let line = format!("{}\t{:.8e}\t{:.3}", stats.epoch, stats.mean_loss, stats.seconds);
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(Error::io(log_path.display().to_string(), e).into());
    }

    let checkpoint_path = cfg.output_dir.join("checkpoint.lcm");
    checkpoint::save(&state.params, &checkpoint_path)?;
    println!("checkpoint written to {}", checkpoint_path.display());
    Ok(())
}

fn cmd_eval(args: &[String]) -> CliResult {
    let parsed = parse_flags(args, &["config", "checkpoint", "direction", "threads"])?;
    let threads: usize = parsed.get_parse("threads", 1)?;
    let (cfg, vocab, enc_cfg, params) =
        load_model(parsed.require("config")?, parsed.require("checkpoint")?)?;
    cfg.validate()?;
    let direction = match parsed.flags.get("direction") {
        Some(d) => DirectionChoice::parse(d)?,
        None => cfg.direction,
    };
    let ltc = cfg.long_text_config();
    let manifest = load_manifest(&cfg.manifest_path)?;
    let split = select_split(&manifest, cfg.eval_split, cfg.split_seed)?;
    let samples = load_samples(&split, cfg.image_size)?;
    let examples = prepare_examples(&samples, &vocab);

    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::io(cfg.output_dir.display().to_string(), e))?;
    for dir in direction.directions() {
        let opts = EvalOptions {
            dataset_name: cfg.dataset_name.clone(),
            direction: dir,
            sample_size: cfg.sample_size,
            seeds: cfg.seeds.clone(),
            k_values: cfg.k_values.clone(),
            threads,
        };
        let report = evaluate(&examples, &vocab, &params, &enc_cfg, &ltc, &opts)?;
        let table = render_report(&report, ReportFormat::Table);
        let json = render_report(&report, ReportFormat::Json);
        let base = cfg.output_dir.join(format!("report-{dir}"));
        let table_path = base.with_extension("txt");
        let json_path = base.with_extension("json");
        std::fs::write(&table_path, &table)
            .map_err(|e| Error::io(table_path.display().to_string(), e))?;
        std::fs::write(&json_path, &json)
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        print!("{table}");
        println!("report written to {} and {}", table_path.display(), json_path.display());
    }
    Ok(())
}

fn cmd_gen_data(args: &[String]) -> CliResult {
    let parsed = parse_flags(args, &["out", "count", "seed", "image-size"])?;
    let out = PathBuf::from(parsed.require("out")?);
    let count: usize = parsed
        .require("count")?
        .parse()
        .map_err(|_| usage("--count: expected a positive integer"))?;
    let seed: u64 = parsed.get_parse("seed", 0)?;
    let image_size: usize = parsed.get_parse("image-size", 32)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let vocab_path = out.join("vocab.txt");
    crate::data::synthetic::write_vocabulary(&vocab_path)?;
    let vocab = load_vocabulary_file(&vocab_path)?;
    let (manifest, _) = crate::data::synthetic::generate_synthetic(count, &vocab, seed, image_size, &out)?;
    println!(
        "generated {} samples under {} (vocab.txt, manifest.jsonl, images/)",
        manifest.len(),
        out.display()
    );
    Ok(())
}

fn cmd_report(args: &[String]) -> CliResult {
    let parsed = parse_flags(args, &["json", "format"])?;
    let json_path = PathBuf::from(parsed.require("json")?);
    let format = match parsed.flags.get("format").map(String::as_str) {
        None | Some("table") => ReportFormat::Table,
        Some("json") => ReportFormat::Json,
        Some(other) => return Err(usage(format!("--format: expected table or json, got {other:?}"))),
    };
    let text = std::fs::read_to_string(&json_path)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let report = crate::evaluation::parse_report_json(&text)?;
    print!("{}", render_report(&report, format));
    Ok(())
}
