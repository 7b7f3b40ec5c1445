//! Command-line surface for the pipeline: synthetic data generation, OCR
//! line clustering with SVG output, PHOC inspection, the two training
//! stages, multi-source prediction, evaluation, and the gradient check.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data or contract
//! errors. Diagnostics go to stderr; data goes to stdout or files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use logoskit::corpus::{
    self, build_grounding_set, build_vocab, gen_synthetic, load_dataset, write_dataset_files,
    Dataset, DatasetPaths, NoiseProfile, SynthConfig,
};
use logoskit::geometry::cluster_lines;
use logoskit::metrics::{evaluate_items, Prediction};
use logoskit::model::{Model, ModelConfig, TokenVocab};
use logoskit::selector::predict_dataset;
use logoskit::svg::emit_cluster_svg;
use logoskit::trainer::{
    finetune, grad_check_with_fault, pretrain_grounding, IterLog, TrainConfig,
};

#[derive(Parser)]
#[command(name = "logoskit", version, about = "Desk-scale scene-text VQA pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the deterministic synthetic corpus (train and val splits).
    GenSynth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Training items (one question per image).
        #[arg(long, default_value_t = 200)]
        train: usize,
        /// Validation items.
        #[arg(long, default_value_t = 50)]
        val: usize,
        /// Token-deletion rate of source A.
        #[arg(long, default_value_t = 0.15)]
        p_del: f64,
        /// Character-substitution rate of source B.
        #[arg(long, default_value_t = 0.15)]
        p_sub: f64,
        #[arg(long, default_value_t = corpus::DEFAULT_FEATURE_WIDTH)]
        feature_width: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cluster the lines of an OCR file; emit cluster ids as JSONL.
    Cluster {
        #[arg(long)]
        ocr: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        epsilon: f64,
        /// Render the first record's clustering as an SVG.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Print the set PHOC bits of a word.
    Phoc { word: String },
    /// Question-visual grounding pretraining.
    Pretrain {
        #[arg(long)]
        data_dir: PathBuf,
        /// TOML or JSON file mirroring the training-config fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        candidates: usize,
        #[arg(long, default_value_t = 2)]
        per_image: usize,
        #[arg(long, default_value_t = 5000)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on the main task, starting from a pretrained checkpoint
    /// when given.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint to continue from (shares all encoder weights).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode every item with per-source selection and write an audit.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        /// Repeatable: SOURCE=PATH.
        #[arg(long = "ocr", value_parser = parse_source_path)]
        ocr: Vec<(String, PathBuf)>,
        #[arg(long)]
        objects: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        epsilon: f64,
        /// Tie-break priority, comma separated; defaults to the --ocr
        /// registration order.
        #[arg(long, value_delimiter = ',')]
        priority: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against reference answers.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long, default_value = "both")]
        metric: MetricChoice,
    },
    /// Finite-difference check of every differentiable path.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Corrupt the gelu derivative; the check must then fail.
        #[arg(long)]
        fault: bool,
    },
}

#[derive(Clone, Copy, PartialEq, clap::ValueEnum)]
enum MetricChoice {
    Acc,
    Anls,
    Both,
}

fn parse_source_path(s: &str) -> Result<(String, PathBuf), String> {
    let (src, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected SOURCE=PATH, got {s}"))?;
    if src.is_empty() {
        return Err("empty source id".into());
    }
    Ok((src.to_string(), PathBuf::from(path)))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// LOGOSKIT_SEED overrides any configured seed.
fn effective_seed(flag: Option<u64>, cfg_seed: u64) -> anyhow::Result<u64> {
    if let Ok(v) = std::env::var("LOGOSKIT_SEED") {
        return v
            .parse()
            .map_err(|_| anyhow::anyhow!("LOGOSKIT_SEED must be an integer, got {v:?}"));
    }
    Ok(flag.unwrap_or(cfg_seed))
}

fn load_train_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path)?;
    let cfg = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text)?
    } else {
        serde_json::from_str(&text)?
    };
    Ok(cfg)
}

/// Discover the conventional file layout of a split inside a directory.
fn split_paths(dir: &Path, split: &str) -> anyhow::Result<DatasetPaths> {
    let mut sources = Vec::new();
    let prefix = format!("{split}.ocr.");
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name.strip_prefix(&prefix) {
            if let Some(src) = rest.strip_suffix(".jsonl") {
                sources.push(src.to_string());
            }
        }
    }
    sources.sort();
    if sources.is_empty() {
        anyhow::bail!("no {split}.ocr.*.jsonl files in {}", dir.display());
    }
    Ok(DatasetPaths::conventional(dir, split, &sources))
}

fn load_split(dir: &Path, split: &str) -> anyhow::Result<Dataset> {
    Ok(load_dataset(&split_paths(dir, split)?, split)?)
}

fn write_log_line(out: &mut String, log: &IterLog) {
    out.push_str(&serde_json::to_string(log).expect("log lines serialize"));
    out.push('\n');
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenSynth {
            seed,
            train,
            val,
            p_del,
            p_sub,
            feature_width,
            out_dir,
        } => {
            let seed = effective_seed(Some(seed), 7)?;
            let cfg = SynthConfig {
                seed,
                n_train: train,
                n_val: val,
                sources: vec![
                    (
                        "A".into(),
                        NoiseProfile {
                            p_delete: p_del,
                            p_substitute: 0.0,
                        },
                    ),
                    (
                        "B".into(),
                        NoiseProfile {
                            p_delete: 0.0,
                            p_substitute: p_sub,
                        },
                    ),
                ],
                feature_width,
            };
            fs::create_dir_all(&out_dir)?;
            let (train_ds, val_ds) = gen_synthetic(&cfg)?;
            for ds in [&train_ds, &val_ds] {
                let paths = DatasetPaths::conventional(&out_dir, &ds.split, &ds.source_ids());
                write_dataset_files(ds, &paths)?;
            }
            eprintln!(
                "wrote {} train and {} val items to {}",
                train_ds.items.len(),
                val_ds.items.len(),
                out_dir.display()
            );
            Ok(())
        }

        Cmd::Cluster { ocr, epsilon, svg } => {
            let records = corpus::load_ocr_records(&ocr)?;
            let mut first_svg_done = false;
            for rec in &records {
                let boxes: Vec<_> = rec.lines.iter().map(|l| l.bbox).collect();
                let ids: Vec<usize> = if boxes.is_empty() {
                    vec![]
                } else {
                    let assignment = cluster_lines(&boxes, epsilon)?;
                    if let (Some(path), false) = (&svg, first_svg_done) {
                        emit_cluster_svg(&rec.lines, &assignment, path)?;
                        first_svg_done = true;
                    }
                    assignment.cluster_of_line
                };
                println!(
                    r#"{{"image_id":{},"source":{},"cluster_ids":{}}}"#,
                    serde_json::to_string(&rec.image_id)?,
                    serde_json::to_string(&rec.source)?,
                    serde_json::to_string(&ids)?
                );
            }
            Ok(())
        }

        Cmd::Phoc { word } => {
            let v = logoskit::phoc::phoc_encode(&word);
            let idx = v.set_indices();
            println!(
                r#"{{"word":{},"set_bits":{},"count":{}}}"#,
                serde_json::to_string(&word)?,
                serde_json::to_string(&idx)?,
                idx.len()
            );
            Ok(())
        }

        Cmd::Pretrain {
            data_dir,
            config,
            seed,
            candidates,
            per_image,
            vocab_size,
            out,
        } => {
            let mut cfg = load_train_config(config.as_deref())?;
            // The grounding task converges quickly; a shorter default
            // schedule than fine-tuning unless a config file says
            // otherwise.
            if config.is_none() {
                cfg = TrainConfig {
                    total_iters: 600,
                    warmup_iters: 60,
                    decay_points: vec![350, 475],
                    ..cfg
                };
            }
            cfg.seed = effective_seed(seed, cfg.seed)?;
            let train = load_split(&data_dir, "train")?;
            let answers: Vec<String> =
                train.items.iter().map(|i| i.answers[0].clone()).collect();
            let vocab = build_vocab(&answers, vocab_size)?;
            let tokens = TokenVocab::from_dataset(&train, &vocab);
            let mcfg = ModelConfig {
                feature_width: feature_width_of(&train)?,
                ..ModelConfig::default()
            };
            let mut model = Model::new(mcfg, vocab, tokens, cfg.seed)?;
            let set = build_grounding_set(&train, candidates, per_image, cfg.seed)?;
            eprintln!("pretraining on {} grounding examples", set.len());
            let mut log_text = String::new();
            pretrain_grounding(&mut model, &set, &cfg, |l| write_log_line(&mut log_text, l))?;
            model.save_checkpoint(&out)?;
            fs::write(log_path(&out), log_text)?;
            eprintln!("checkpoint written to {}", out.display());
            Ok(())
        }

        Cmd::Train {
            data_dir,
            config,
            seed,
            from,
            vocab_size,
            out,
        } => {
            let mut cfg = load_train_config(config.as_deref())?;
            cfg.seed = effective_seed(seed, cfg.seed)?;
            let train = load_split(&data_dir, "train")?;
            let val = load_split(&data_dir, "val")?;
            let mut model = match from {
                Some(ckpt) => Model::load_checkpoint(&ckpt)?,
                None => {
                    let answers: Vec<String> =
                        train.items.iter().map(|i| i.answers[0].clone()).collect();
                    let vocab = build_vocab(&answers, vocab_size)?;
                    let tokens = TokenVocab::from_dataset(&train, &vocab);
                    let mcfg = ModelConfig {
                        feature_width: feature_width_of(&train)?,
                        ..ModelConfig::default()
                    };
                    Model::new(mcfg, vocab, tokens, cfg.seed)?
                }
            };
            let mut log_text = String::new();
            let outcome = finetune(&mut model, &train, &val, &cfg, |l| {
                write_log_line(&mut log_text, l)
            })?;
            model.save_checkpoint(&out)?;
            fs::write(log_path(&out), log_text)?;
            eprintln!(
                "best validation accuracy {:.4} at iteration {}; checkpoint written to {}",
                outcome.best_val_accuracy,
                outcome.best_iter,
                out.display()
            );
            Ok(())
        }

        Cmd::Predict {
            checkpoint,
            qa,
            ocr,
            objects,
            epsilon,
            priority,
            out,
        } => {
            let model = Model::load_checkpoint(&checkpoint)?;
            let paths = DatasetPaths {
                qa,
                ocr: ocr.clone(),
                objects,
            };
            let dataset = load_dataset(&paths, "predict")?;
            let priority = if priority.is_empty() {
                ocr.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>()
            } else {
                priority
            };
            let audits = predict_dataset(&model, &dataset, epsilon, &priority)?;
            let mut text = String::new();
            for audit in &audits {
                text.push_str(&audit.to_jsonl());
                text.push('\n');
            }
            fs::write(&out, text)?;
            eprintln!("{} predictions written to {}", audits.len(), out.display());
            Ok(())
        }

        Cmd::Eval { pred, qa, metric } => {
            let predictions = load_predictions(&pred)?;
            let items = corpus::load_qa_items(&qa)?;
            let report = evaluate_items(&predictions, &items)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!("n_items: {}", report.n_items);
            if matches!(metric, MetricChoice::Acc | MetricChoice::Both) {
                eprintln!("mean_accuracy: {:.4}", report.mean_accuracy);
            }
            if matches!(metric, MetricChoice::Anls | MetricChoice::Both) {
                eprintln!("mean_anls: {:.4}", report.mean_anls);
            }
            Ok(())
        }

        Cmd::Gradcheck {
            probes,
            seed,
            fault,
        } => {
            let seed = effective_seed(Some(seed), 7)?;
            let max_rel = grad_check_with_fault(probes, seed, fault)?;
            println!("{max_rel:e}");
            if fault {
                if max_rel > 1e-2 {
                    eprintln!("fault detected as expected (max relative error {max_rel:e})");
                    Ok(())
                } else {
                    anyhow::bail!("injected fault went undetected: {max_rel:e}")
                }
            } else if max_rel < 1e-4 {
                eprintln!("gradient check passed (max relative error {max_rel:e})");
                Ok(())
            } else {
                anyhow::bail!("gradient check failed: {max_rel:e}")
            }
        }
    }
}

fn log_path(ckpt: &Path) -> PathBuf {
    let mut os = ckpt.as_os_str().to_owned();
    os.push(".log.jsonl");
    os.into()
}

fn feature_width_of(dataset: &Dataset) -> anyhow::Result<usize> {
    for regions in dataset.objects.values() {
        if let Some(r) = regions.first() {
            return Ok(r.feature.len());
        }
    }
    anyhow::bail!("dataset has no object regions to infer the feature width from")
}

fn load_predictions(path: &Path) -> anyhow::Result<Vec<Prediction>> {
    #[derive(serde::Deserialize)]
    struct Row {
        question_id: String,
        answer: String,
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(line)
            .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?;
        out.push(Prediction {
            question_id: row.question_id,
            answer: row.answer,
        });
    }
    Ok(out)
}
