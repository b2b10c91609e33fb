use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mmar_core::analysis;
use mmar_core::data::dataset::{HELDOUT_FILE, VOCAB_FILE};
use mmar_core::data::{load_jsonl, write_corpus_dir, ImageSpec, Vocabulary};
use mmar_core::gradcheck::{self, GradcheckConfig};
use mmar_core::model::{ModelConfig, PatchGrid};
use mmar_core::train::pipeline::{self, run_stage_files};
use mmar_core::train::{
    caption_accuracy, color_token_accuracy, eval_losses, Checkpoint, PipelineConfig, Stage, StageConfig,
    StageOverrides, VisualMode,
};

#[derive(Parser)]
#[command(name = "mmar", version, about = "Staged multi-modal training on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus (caption, instruction and held-out splits plus the vocabulary).
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4096)]
        samples: usize,
        #[arg(long, default_value_t = 256)]
        heldout: usize,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        /// TOML file overriding the stage defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input checkpoint; a fresh model is initialized when omitted.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory used for the default dataset path.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Metrics CSV; defaults to the output checkpoint path with a `.csv` extension.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Seed for a fresh model (only used without --in).
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
    },
    /// Run all four stages from a fresh model.
    TrainAll {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Held-out losses and greedy caption accuracy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSONL split; defaults to the held-out file in --data.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Also evaluate with pseudo image features in place of the adapter outputs.
        #[arg(long)]
        pseudo_features: bool,
        /// Also report the color-token probe on solid object patches.
        #[arg(long)]
        color_probe: bool,
        #[arg(long)]
        json: bool,
    },
    /// Per-patch token maps, one JSON object per image.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        mode: MapMode,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        limit: usize,
    },
    /// Finite-difference gradient verification; exits nonzero on failure.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1024)]
        samples: usize,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MapMode {
    Nearest,
    Top,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    match s {
        "1" | "2" | "3" | "4" => s.parse::<Stage>().map_err(|e| e.to_string()),
        _ => Err(format!("unknown stage {s:?}; expected 1, 2, 3 or 4")),
    }
}

fn vocab_for(data: &Path) -> Result<Vocabulary> {
    let path = data.join(VOCAB_FILE);
    if path.is_file() {
        Ok(Vocabulary::load(&path)?)
    } else {
        Ok(Vocabulary::toy())
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            samples,
            heldout,
        } => {
            let vocab = Vocabulary::toy();
            write_corpus_dir(&out, seed, samples, heldout, &ImageSpec::default(), &vocab)?;
            println!(
                "wrote {} training and {heldout} held-out samples to {}",
                samples - heldout,
                out.display()
            );
        }
        Command::Train {
            stage,
            config,
            input,
            out,
            data,
            metrics,
            init_seed,
        } => {
            let cfg = match &config {
                Some(p) => StageConfig::load(p, stage, &data)?,
                None => StageConfig::from_overrides(stage, &data, &StageOverrides::default())?,
            };
            let ckpt = match &input {
                Some(p) => Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => Checkpoint::fresh(ModelConfig::default(), init_seed)?,
            };
            let metrics = metrics.unwrap_or_else(|| out.with_extension("csv"));
            let res = run_stage_files(&cfg, ckpt, &out, &metrics)?;
            println!(
                "stage {stage}: {} steps, probe loss_mm {:.4} -> {:.4}; wrote {}",
                res.metrics.rows().len(),
                res.probe_before.loss_mm,
                res.probe_after.loss_mm,
                out.display()
            );
        }
        Command::TrainAll {
            config,
            data,
            out,
            seed,
        } => {
            let mut p = match &config {
                Some(path) => PipelineConfig::load(path)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = seed {
                p.seed = s;
            }
            pipeline::train_all(&p, &data, &out, |stage, res| {
                println!(
                    "stage {stage}: {} steps, probe loss_mm {:.4} -> {:.4} (lm {:.4}, vm {:.4}), {:.1}s",
                    res.metrics.rows().len(),
                    res.probe_before.loss_mm,
                    res.probe_after.loss_mm,
                    res.probe_after.loss_lm,
                    res.probe_after.loss_vm,
                    res.metrics.last().map_or(0.0, |r| r.seconds)
                );
            })?;
            println!("checkpoints in {}", out.display());
        }
        Command::Eval {
            ckpt,
            split,
            data,
            pseudo_features,
            color_probe,
            json,
        } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let split = split.unwrap_or_else(|| data.join(HELDOUT_FILE));
            let samples = load_jsonl(&split, &ck.config.image, ck.config.vocab_size)?;
            let mut modes = vec![VisualMode::Original];
            if pseudo_features {
                modes.push(VisualMode::Pseudo);
            }
            let mut report = serde_json::Map::new();
            for mode in modes {
                let losses = eval_losses(&ck.params, &ck.config, &samples, mode)?;
                let acc = caption_accuracy(&ck.params, &ck.config, &samples, mode)?;
                let key = serde_json::to_value(mode)?.as_str().unwrap_or("mode").to_string();
                if !json {
                    println!(
                        "{key:>8} features: loss_mm {:.5}  loss_lm {:.5}  loss_vm {:.5}  caption accuracy {:.2}% ({}/{})",
                        losses.loss_mm,
                        losses.loss_lm,
                        losses.loss_vm,
                        100.0 * acc.fraction(),
                        acc.correct,
                        acc.total
                    );
                }
                report.insert(key, serde_json::json!({ "losses": losses, "caption_accuracy": acc }));
            }
            if color_probe {
                let vocab = vocab_for(&data)?;
                let acc = color_token_accuracy(&ck.params, &ck.config, &vocab, &samples)?;
                if !json {
                    println!(
                        "color probe: {:.2}% of solid patches map to their color ({}/{})",
                        100.0 * acc.fraction(),
                        acc.correct,
                        acc.total
                    );
                }
                report.insert("color_probe".into(), serde_json::to_value(acc)?);
            }
            if json {
                println!("{}", serde_json::Value::Object(report));
            }
        }
        Command::Analyze {
            ckpt,
            mode,
            split,
            data,
            limit,
        } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let vocab = vocab_for(&data)?;
            if vocab.len() != ck.config.vocab_size {
                bail!(
                    "vocabulary has {} tokens but the model expects {}",
                    vocab.len(),
                    ck.config.vocab_size
                );
            }
            let split = split.unwrap_or_else(|| data.join(HELDOUT_FILE));
            let samples = load_jsonl(&split, &ck.config.image, ck.config.vocab_size)?;
            for s in samples.iter().take(limit) {
                let grid = PatchGrid::from_pixels(&ck.config.image, &s.pixels)?;
                let map = match mode {
                    MapMode::Nearest => analysis::token_map_nearest(&ck.params, &ck.config, &vocab, &grid)?,
                    MapMode::Top => analysis::token_map_top(&ck.params, &ck.config, &vocab, &grid)?,
                };
                println!("{}", map.to_json());
            }
        }
        Command::Gradcheck { seed, samples, json } => {
            let cfg = GradcheckConfig {
                seed,
                model_samples: samples,
                ..GradcheckConfig::default()
            };
            let report = gradcheck::run(&cfg)?;
            if json {
                println!("{}", serde_json::to_string(&report)?);
            } else {
                for c in report.all() {
                    println!(
                        "{} {:<48} checked {:>5}  max err {:.3e} (tol {:.0e})",
                        if c.passed { "ok  " } else { "FAIL" },
                        c.name,
                        c.checked,
                        c.max_error,
                        c.tolerance
                    );
                }
                println!(
                    "{} model parameters checked; {}",
                    report.model_params_checked(),
                    if report.passed() {
                        "all checks passed"
                    } else {
                        "gradient check FAILED"
                    }
                );
            }
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
