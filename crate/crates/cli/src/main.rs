use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cae::audio::CANONICAL_SAMPLE_RATE;
use cae::checkpoint::Checkpoint;
use cae::data::{make_toy_corpus, Corpus, CorpusManifest, Split};
use cae::embedder::{pretrain_embedder, PretrainConfig};
use cae::evaluation::{self, DEFAULT_TOP_K};
use cae::inference;
use cae::training::{self, embedder_checkpoint, embedder_from_checkpoint, TrainConfig, TrainedModels};
use cae::{Error, ErrorCategory, Result};
use candle_core::{DType, Device};
use clap::{Parser, Subcommand};
use log::info;

#[derive(Debug, Parser)]
#[command(name = "cae", version, about = "Voice-controlled face autoencoder")]
struct Cli {
    /// Random seed; overrides `seed` from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    /// Audio is resampled to this rate before feature extraction.
    #[arg(long, global = true, default_value_t = CANONICAL_SAMPLE_RATE)]
    sample_rate: u32,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus of PNG faces, WAV voices and a manifest.
    MakeToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        identities: usize,
        #[arg(long, default_value_t = 20)]
        faces_per_id: usize,
        #[arg(long, default_value_t = 20)]
        clips_per_id: usize,
    },
    /// Pre-train the voice embedder on the manifest's training voices.
    PretrainVoice {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Adversarial training; writes losses.csv and checkpoints to the output directory.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        voice_ckpt: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override one config key, e.g. `--set lambda2=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Generate a face from a proposal face and a voice.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Proposal face (PNG). Repeat with --grid.
        #[arg(long = "face", required = true)]
        faces: Vec<PathBuf>,
        /// Voice recording (WAV). Repeat with --grid.
        #[arg(long = "voice", required = true)]
        voices: Vec<PathBuf>,
        /// Output PNG, or a directory with --grid.
        #[arg(long)]
        out: PathBuf,
        /// Every face with every voice, one PNG per pair.
        #[arg(long)]
        grid: bool,
    },
    /// Cosine-similarity and retrieval metrics as a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "eval")]
        split: Split,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp_secs()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Defaults, then the config file, then `--seed` and `--set` flags.
fn resolve_config(cli: &Cli, overrides: &[String], max_steps: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            TrainConfig::from_kv_text(&text)?
        }
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = max_steps {
        cfg.max_steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let rate = cli.sample_rate;
    if rate == 0 {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    match &cli.command {
        Command::MakeToyCorpus {
            out,
            identities,
            faces_per_id,
            clips_per_id,
        } => {
            info!("make-toy-corpus: out={} identities={identities} faces_per_id={faces_per_id} clips_per_id={clips_per_id} seed={seed}", out.display());
            let m = make_toy_corpus(out, *identities, *faces_per_id, *clips_per_id, seed)?;
            info!(
                "wrote {} records to {}",
                m.records().len(),
                out.join("manifest.tsv").display()
            );
        }
        Command::PretrainVoice { manifest, out, epochs } => {
            let cfg = PretrainConfig {
                epochs: epochs.unwrap_or(PretrainConfig::default().epochs),
                seed,
                ..PretrainConfig::default()
            };
            info!(
                "pretrain-voice: manifest={} {cfg:?} sample_rate={rate}",
                manifest.display()
            );
            let corpus = Corpus::load(&CorpusManifest::load(manifest)?, Split::Train, rate)?;
            let (embedder, report) = pretrain_embedder(&corpus.labeled_voices(), &cfg, DType::F32, &Device::Cpu)?;
            info!(
                "training accuracy {:.3}, final loss {:.4}",
                report.train_accuracy, report.final_loss
            );
            let meta = serde_json::json!({
                "seed": seed,
                "epochs": cfg.epochs,
                "speakers": report.speakers,
                "train_accuracy": report.train_accuracy,
            });
            embedder_checkpoint(&embedder, meta)?.save(out)?;
            info!("saved {}", out.display());
        }
        Command::Train {
            manifest,
            voice_ckpt,
            out_dir,
            max_steps,
            resume,
            overrides,
        } => {
            let cfg = resolve_config(&cli, overrides, *max_steps)?;
            info!(
                "train: manifest={} voice_ckpt={} out_dir={} sample_rate={rate}",
                manifest.display(),
                voice_ckpt.display(),
                out_dir.display()
            );
            info!("resolved config: {}", cfg.to_kv_text().trim_end().replace('\n', "; "));
            let corpus = Corpus::load(&CorpusManifest::load(manifest)?, Split::Train, rate)?;
            let outcome = match resume {
                Some(path) => {
                    let mut trainer = training::Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
                    info!("resuming at step {}", trainer.step());
                    training::resume_training(&mut trainer, &corpus, out_dir)?
                }
                None => {
                    let embedder = embedder_from_checkpoint(&Checkpoint::load(voice_ckpt)?, cfg.precision.dtype())?;
                    training::train(&corpus, embedder, cfg, out_dir)?
                }
            };
            if let Some(last) = outcome.reports.last() {
                info!(
                    "finished at step {} with objective {:.2}",
                    last.step + 1,
                    last.objective
                );
            }
            info!("saved {}", outcome.final_checkpoint.display());
        }
        Command::Infer {
            ckpt,
            faces,
            voices,
            out,
            grid,
        } => {
            info!(
                "infer: ckpt={} faces={faces:?} voices={voices:?} out={} grid={grid} sample_rate={rate}",
                ckpt.display(),
                out.display()
            );
            let models = TrainedModels::load(ckpt)?;
            if *grid {
                let written = inference::grid_files(&models, faces, voices, out, rate)?;
                info!("wrote {} images to {}", written.len(), out.display());
            } else {
                if faces.len() != 1 || voices.len() != 1 {
                    return Err(Error::Config(
                        "without --grid, pass exactly one --face and one --voice".into(),
                    ));
                }
                inference::infer_files(&models, &faces[0], &voices[0], out, rate)?;
                info!("wrote {}", out.display());
            }
        }
        Command::Eval {
            ckpt,
            manifest,
            report,
            split,
            top_k,
        } => {
            info!(
                "eval: ckpt={} manifest={} split={split} top_k={top_k} seed={seed} sample_rate={rate}",
                ckpt.display(),
                manifest.display()
            );
            let models = TrainedModels::load(ckpt)?;
            let corpus = Corpus::load(&CorpusManifest::load(manifest)?, *split, rate)?;
            let r = evaluation::evaluate(&corpus, &models, *top_k, seed)?;
            info!(
                "cos(g,A) {:.4}  cos(g,B) {:.4}  random {:.4}  top-{top_k} B {:.3}  A {:.3}",
                r.similarity.cos_g_a,
                r.similarity.cos_g_b,
                r.similarity.cos_random,
                r.retrieval_b.success_rate,
                r.retrieval_a.success_rate
            );
            write_json(report, &r)?;
            info!("wrote {}", report.display());
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
