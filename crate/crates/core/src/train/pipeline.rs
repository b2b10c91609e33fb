use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::data::{load_jsonl, SyntheticSample};
use crate::error::{Error, Result};

use super::checkpoint::Checkpoint;
use super::config::{PipelineConfig, Stage, StageConfig};
use super::stage::{run_stage, StageOutcome};

pub fn checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("stage{}.ckpt", stage.number()))
}

pub fn metrics_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("stage{}_metrics.csv", stage.number()))
}

/// Loads a stage's dataset, reporting the path when it is missing.
pub fn load_dataset(cfg: &StageConfig, ckpt: &Checkpoint) -> Result<Vec<SyntheticSample>> {
    if !cfg.dataset.is_file() {
        return Err(Error::Stage {
            stage: cfg.stage.label(),
            step: 0,
            source: Box::new(Error::Config(format!(
                "dataset {} does not exist",
                cfg.dataset.display()
            ))),
        });
    }
    load_jsonl(&cfg.dataset, &ckpt.config.image, ckpt.config.vocab_size)
}

/// Runs one stage end to end: load data, train, write checkpoint and metrics.
pub fn run_stage_files(
    cfg: &StageConfig,
    ckpt: Checkpoint,
    out_ckpt: &Path,
    metrics_csv: &Path,
) -> Result<StageOutcome> {
    let data = load_dataset(cfg, &ckpt)?;
    let out = run_stage(cfg, ckpt, &data)?;
    out.checkpoint.save(out_ckpt)?;
    out.metrics.append_csv(metrics_csv)?;
    Ok(out)
}

/// All four stages from a fresh model. Writes `stageN.ckpt` and
/// `stageN_metrics.csv` for each stage into `out_dir`.
pub fn train_all(
    pipeline: &PipelineConfig,
    data_dir: &Path,
    out_dir: &Path,
    mut on_stage: impl FnMut(Stage, &StageOutcome),
) -> Result<Vec<StageOutcome>> {
    std::fs::create_dir_all(out_dir)?;
    let mut ckpt = Checkpoint::fresh(pipeline.model_config(), pipeline.seed)?;
    let mut cache: HashMap<PathBuf, Vec<SyntheticSample>> = HashMap::new();
    let mut outcomes = Vec::new();
    for stage in Stage::ALL {
        let cfg = pipeline.stage(stage, data_dir)?;
        if !cache.contains_key(&cfg.dataset) {
            let data = load_dataset(&cfg, &ckpt)?;
            cache.insert(cfg.dataset.clone(), data);
        }
        let out = run_stage(&cfg, ckpt, &cache[&cfg.dataset])?;
        out.checkpoint.save(&checkpoint_path(out_dir, stage))?;
        let mpath = metrics_path(out_dir, stage);
        if mpath.exists() {
            std::fs::remove_file(&mpath)?;
        }
        out.metrics.append_csv(&mpath)?;
        on_stage(stage, &out);
        ckpt = out.checkpoint.clone();
        outcomes.push(out);
    }
    Ok(outcomes)
}
