//! `dfa`: preprocessing, training, evaluation and reporting for the
//! deepfake forensics adapter.
//!
//! Every subcommand writes into one output directory: the resolved config
//! (`resolved_config.toml`), the seed (`seed.txt`), its primary outputs and
//! `run_manifest.json` listing them. Failures print a JSON error object on
//! stderr; usage errors exit with 2, everything else with 1.

mod rundir;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use dfa_core::config::DfaConfig;
use dfa_core::data::store::{load_samples, preprocess, ExternalDecoder, LoadOptions, PreprocessOptions, STORE_MANIFEST};
use dfa_core::data::synthetic::{synthetic_samples, write_synthetic_videos, SyntheticVideoSpec};
use dfa_core::data::{build_manifest, DatasetManifest, FrameSample, LabelingRule, Split, SplitOptions};
use dfa_core::metrics::export::{export_features, write_features_csv};
use dfa_core::metrics::report::{build_report, ReportInput};
use dfa_core::metrics::{evaluate, Aggregation, Level, ScoreTable};
use dfa_core::model::{build_encoder, Dfa};
use dfa_core::train::checkpoint::load_bundle;
use dfa_core::train::{ablate, score_samples, Trainer, LOG_FILE};
use dfa_core::{DfaError, Device, Result};
use serde_json::json;

use rundir::RunDir;

#[derive(Debug, Parser)]
#[command(name = "dfa", version, about = "Deepfake forensics adapter pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config; the built-in miniature preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` config override, dotted path or unique leaf name.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Use N rendered synthetic samples (half real, half fake) instead of
    /// the store named by `data.manifest`; the set serves every split.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write a synthetic raw dataset: frame directories plus detection sidecars.
    Synth {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 5)]
        videos_per_class: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
    /// Build a manifest over raw media and write the preprocessed sample store.
    Preprocess {
        #[command(flatten)]
        run: RunArgs,
        /// Dataset root; `real/` and `fake/` subdirectories unless `--labels`.
        #[arg(long)]
        root: PathBuf,
        /// CSV list of `relative_path,label` lines.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "custom")]
        source: String,
        /// Frame extraction program for video files (called like ffmpeg).
        #[arg(long)]
        decoder: Option<String>,
    },
    /// Train the adapter, local stream and fusion head.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Metrics from a score CSV, or from a checkpoint scored on a split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        scores: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "frame", value_parser = parse_level)]
        level: Level,
        #[arg(long, value_parser = parse_aggregation)]
        aggregation: Option<Aggregation>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Split to score; defaults to `train.eval_split`.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and score every module toggle pattern.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Pooled fusion features of a balanced random subset.
    ExportFeatures {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 500)]
        n_per_class: usize,
        /// Split to sample from; all splits when omitted.
        #[arg(long)]
        split: Option<String>,
    },
    /// Combined comparison tables and radar rows from collected metrics.
    Report {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_level(s: &str) -> std::result::Result<Level, String> {
    Level::from_str(s).map_err(|e| e.to_string())
}

fn parse_aggregation(s: &str) -> std::result::Result<Aggregation, String> {
    Aggregation::from_str(s).map_err(|e| e.to_string())
}

fn error_json(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_json("usage", e.render().to_string().trim()));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::from(1)
        }
    }
}

fn resolve_config(run: &RunArgs, fallback: Option<&DfaConfig>) -> Result<DfaConfig> {
    let base = match (&run.config, fallback) {
        (Some(p), _) => DfaConfig::load(p)?,
        (None, Some(cfg)) => cfg.clone(),
        (None, None) => DfaConfig::miniature(),
    };
    base.with_overrides(&run.overrides)
}

fn out_dir(run: &RunArgs, command: &str) -> PathBuf {
    run.out.clone().unwrap_or_else(|| Path::new("runs").join(command))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(DfaError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Split::from_str(s)
}

/// Samples for `split` (every split when `None`).
fn load_data(cfg: &DfaConfig, data: &DataArgs, split: Option<Split>) -> Result<Vec<FrameSample>> {
    if let Some(n) = data.synthetic {
        return Ok(synthetic_samples(
            n,
            cfg.encoder.image_size,
            cfg.data.split_seed,
            cfg.data.mean,
            cfg.data.std,
        ));
    }
    let path = cfg.data.manifest.as_ref().ok_or_else(|| {
        DfaError::Config("no data: set `data.manifest` to a preprocessed store manifest or pass --synthetic N".into())
    })?;
    let path = Path::new(path);
    let manifest = DatasetManifest::load(path)?;
    let store = path.parent().unwrap_or(Path::new("."));
    load_samples(
        store,
        &manifest,
        split,
        LoadOptions {
            model_size: cfg.encoder.image_size,
            mean: cfg.data.mean,
            std: cfg.data.std,
        },
    )
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth {
            run,
            videos_per_class,
            frames,
        } => {
            let cfg = resolve_config(&run, None)?;
            let dir = out_dir(&run, "synth");
            let mut rd = RunDir::create(&dir, "synth", &cfg)?;
            write_synthetic_videos(
                &dir,
                SyntheticVideoSpec {
                    videos_per_class,
                    frames_per_video: frames,
                    seed: cfg.train.seed,
                    ..SyntheticVideoSpec::default()
                },
            )?;
            rd.register("real");
            rd.register("fake");
            rd.finish(&cfg)
        }
        Cmd::Preprocess {
            run,
            root,
            labels,
            source,
            decoder,
        } => {
            let cfg = resolve_config(&run, None)?;
            let dir = out_dir(&run, "preprocess");
            let mut rd = RunDir::create(&dir, "preprocess", &cfg)?;
            let rule = match labels {
                Some(p) => LabelingRule::ListFile(p),
                None => LabelingRule::Directories,
            };
            let opts = SplitOptions {
                train_fraction: cfg.data.train_fraction,
                test_fraction: cfg.data.test_fraction,
                seed: cfg.data.split_seed,
            };
            let manifest = build_manifest(&root, &rule, opts, &source)?;
            rd.write_json("dataset_manifest.json", &manifest)?;
            let popts = PreprocessOptions {
                store_size: cfg.data.store_size,
                sample_mode: cfg.data.sample_mode,
                frames_per_video: cfg.data.frames_per_video,
                frame_stride: cfg.data.frame_stride,
                decoder: decoder.map(|program| ExternalDecoder {
                    program,
                    ..ExternalDecoder::default()
                }),
            };
            let (store, summary) = preprocess(&manifest, &root, &dir, &popts)?;
            rd.register(STORE_MANIFEST);
            for e in &store.entries {
                rd.register(&e.media_path);
            }
            rd.write_json("preprocess_summary.json", &summary)?;
            print_json(&summary)?;
            rd.finish(&cfg)
        }
        Cmd::Train { run, data } => {
            let cfg = resolve_config(&run, None)?;
            let dir = out_dir(&run, "train");
            let mut rd = RunDir::create(&dir, "train", &cfg)?;
            let (train, val) = match data.synthetic {
                Some(_) => {
                    let all = load_data(&cfg, &data, None)?;
                    (all.clone(), all)
                }
                None => (
                    load_data(&cfg, &data, Some(Split::Train))?,
                    load_data(&cfg, &data, Some(parse_split(&cfg.train.eval_split)?))?,
                ),
            };
            let (encoder, enc_ref) = build_encoder(&cfg, &Device::Cpu)?;
            let mut trainer = Trainer::new(Dfa::new(&cfg, encoder)?, enc_ref);
            let outcome = trainer.fit(&train, &val, Some(&dir))?;
            rd.register(LOG_FILE);
            rd.register("checkpoints");
            let summary = json!({
                "steps": outcome.steps,
                "epochs": outcome.log.len(),
                "best_epoch": outcome.best_epoch,
                "last": outcome.log.last(),
            });
            rd.write_json("train_summary.json", &summary)?;
            print_json(&summary)?;
            rd.finish(&cfg)
        }
        Cmd::Eval {
            run,
            data,
            scores,
            checkpoint,
            level,
            aggregation,
            threshold,
            split,
        } => {
            let bundle = checkpoint.as_deref().map(load_bundle).transpose()?;
            let cfg = resolve_config(&run, bundle.as_ref().map(|b| b.model.config()))?;
            let dir = out_dir(&run, "eval");
            let mut rd = RunDir::create(&dir, "eval", &cfg)?;
            let table = match (&scores, bundle) {
                (Some(p), _) => ScoreTable::read_csv(p)?,
                (None, Some(b)) => {
                    let split = match &split {
                        Some(s) => Some(parse_split(s)?),
                        None if data.synthetic.is_some() => None,
                        None => Some(parse_split(&cfg.train.eval_split)?),
                    };
                    let samples = load_data(&cfg, &data, split)?;
                    let model = b.model;
                    let ablation = model.config().train.ablation;
                    let t = score_samples(&model, &samples, ablation, cfg.train.batch_size)?;
                    t.write_csv(rd.path("scores.csv"))?;
                    rd.register("scores.csv");
                    t
                }
                (None, None) => unreachable!("clap requires --scores or --checkpoint"),
            };
            let report = evaluate(
                &table,
                level,
                aggregation.unwrap_or(cfg.data.aggregation),
                threshold.unwrap_or(cfg.data.threshold),
            )?;
            rd.write_json("metrics.json", &report)?;
            print_json(&report)?;
            rd.finish(&cfg)
        }
        Cmd::Ablate { run, data } => {
            let cfg = resolve_config(&run, None)?;
            let dir = out_dir(&run, "ablate");
            let mut rd = RunDir::create(&dir, "ablate", &cfg)?;
            let (train, eval) = match data.synthetic {
                Some(_) => {
                    let all = load_data(&cfg, &data, None)?;
                    (all.clone(), all)
                }
                None => (
                    load_data(&cfg, &data, Some(Split::Train))?,
                    load_data(&cfg, &data, Some(parse_split(&cfg.train.eval_split)?))?,
                ),
            };
            let (encoder, enc_ref) = build_encoder(&cfg, &Device::Cpu)?;
            let rows = ablate(&cfg, &encoder, &enc_ref, &train, &eval)?;
            rd.write_json("ablation.json", &rows)?;
            print_json(&rows)?;
            rd.finish(&cfg)
        }
        Cmd::ExportFeatures {
            run,
            data,
            checkpoint,
            n_per_class,
            split,
        } => {
            let bundle = load_bundle(&checkpoint)?;
            let cfg = resolve_config(&run, Some(bundle.model.config()))?;
            let dir = out_dir(&run, "export-features");
            let mut rd = RunDir::create(&dir, "export-features", &cfg)?;
            let split = split.as_deref().map(parse_split).transpose()?;
            let samples = load_data(&cfg, &data, split)?;
            let rows = export_features(&bundle.model, &samples, n_per_class, cfg.train.seed, cfg.train.batch_size)?;
            write_features_csv(&rd.path("features.csv"), &rows)?;
            rd.register("features.csv");
            print_json(&json!({
                "rows": rows.len(),
                "dim": rows.first().map_or(0, |r| r.features.len()),
            }))?;
            rd.finish(&cfg)
        }
        Cmd::Report { run, input } => {
            let cfg = resolve_config(&run, None)?;
            let dir = out_dir(&run, "report");
            let mut rd = RunDir::create(&dir, "report", &cfg)?;
            let parsed = ReportInput::load(&input)?;
            let base = input.parent().unwrap_or(Path::new("."));
            let report = build_report(&parsed, base)?;
            rd.write_json("report.json", &report)?;
            print_json(&report)?;
            rd.finish(&cfg)
        }
    }
}
