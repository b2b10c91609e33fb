use std::time::Instant;

use indexmap::IndexMap;
use rand::RngCore;

use crate::autograd::{Graph, Var};
use crate::data::{BatchIterator, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::{self, Binding, ModelConfig, ParamSet, PatchGrid};
use crate::objectives::{self, Example};
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::config::{LossKind, StageConfig};
use super::eval::{self, LossReport, VisualMode};
use super::metrics::{MetricRow, RunMetrics};
use super::optim::{clip_global_norm, AdamW, AdamWConfig};
use super::schedule::lr_at;

/// Samples used for the before/after loss probe of every stage.
pub const PROBE_SAMPLES: usize = 256;

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: RunMetrics,
    /// `loss_mm` and its parts on the probe subset, before and after training.
    pub probe_before: LossReport,
    pub probe_after: LossReport,
}

struct StepLosses {
    loss: Var,
    lm: Option<Var>,
    vm: Option<Var>,
}

/// Builds the stage's loss for one batch.
fn batch_loss(
    g: &mut Graph,
    b: &Binding,
    cfg: &ModelConfig,
    kind: LossKind,
    samples: &[&SyntheticSample],
    grids: &[PatchGrid],
) -> Result<StepLosses> {
    let examples: Vec<Example> = samples
        .iter()
        .zip(grids)
        .map(|(s, grid)| match kind {
            // pure-image teacher sequences: [BOS][patches]
            LossKind::VmStage3 => Example {
                image: grid,
                instruction: &[],
                response: &[],
            },
            _ => Example {
                image: grid,
                instruction: &s.instruction,
                response: &s.response,
            },
        })
        .collect();
    let input = objectives::assemble_input(g, b, cfg, &examples, None)?;
    let log_q = objectives::compute_q(g, b, cfg, &input)?;
    match kind {
        LossKind::Lm => {
            let lm = objectives::loss_lm(g, &input.batch, log_q)?;
            Ok(StepLosses {
                loss: lm,
                lm: Some(lm),
                vm: None,
            })
        }
        LossKind::VmStage3 => {
            let log_p = objectives::visual_tokens_detached(g, b, &input)?;
            let vm = objectives::loss_vm_stage3(g, &input.batch, log_q, log_p)?;
            Ok(StepLosses {
                loss: vm,
                lm: None,
                vm: Some(vm),
            })
        }
        LossKind::Mm => {
            let log_p = objectives::visual_tokens(g, b, &input)?;
            let mm = objectives::loss_mm(g, &input.batch, log_q, log_p)?;
            Ok(StepLosses {
                loss: mm.total,
                lm: Some(mm.lm),
                vm: Some(mm.vm),
            })
        }
    }
}

fn probe_set(samples: &[SyntheticSample]) -> &[SyntheticSample] {
    &samples[..samples.len().min(PROBE_SAMPLES)]
}

/// Number of optimizer steps the stage will take on `n_samples`.
pub fn total_steps(cfg: &StageConfig, n_samples: usize) -> Result<usize> {
    let it = BatchIterator::new(n_samples, cfg.batch_size, 0, true)?;
    let full = it.batches_per_epoch() * cfg.epochs;
    let total = cfg.max_steps.map_or(full, |m| m.min(full));
    if total == 0 {
        return Err(Error::Config(format!(
            "{} samples do not fill one batch of {}",
            n_samples, cfg.batch_size
        )));
    }
    Ok(total)
}

/// Trains the stage's parameter groups on `samples` and returns the updated checkpoint.
pub fn run_stage(cfg: &StageConfig, mut ckpt: Checkpoint, samples: &[SyntheticSample]) -> Result<StageOutcome> {
    cfg.validate()?;
    ckpt.config.validate()?;
    let stage = cfg.stage;
    let wrap = |step: usize| {
        move |e: Error| Error::Stage {
            stage: stage.label(),
            step,
            source: Box::new(e),
        }
    };
    let mcfg = ckpt.config.clone();
    let total = total_steps(cfg, samples.len()).map_err(wrap(0))?;
    let probe_before =
        eval::eval_losses(&ckpt.params, &mcfg, probe_set(samples), VisualMode::Original).map_err(wrap(0))?;

    // shuffling draws from the checkpoint's RNG so consecutive stages differ
    let shuffle_seed = cfg.seed ^ ckpt.rng.next_u64();
    let batches = BatchIterator::new(samples.len(), cfg.batch_size, shuffle_seed, true)?;
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut metrics = RunMetrics::new();
    let started = Instant::now();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        for idx in batches.epoch(epoch) {
            if step == total {
                break 'epochs;
            }
            let lr = lr_at(step, total, cfg.lr, cfg.warmup_ratio)?;
            let row =
                train_step(cfg, &mcfg, &mut ckpt.params, &mut opt, samples, &idx, step, lr).map_err(wrap(step))?;
            metrics.push(MetricRow {
                seconds: started.elapsed().as_secs_f64(),
                ..row
            })?;
            step += 1;
        }
    }

    let probe_after =
        eval::eval_losses(&ckpt.params, &mcfg, probe_set(samples), VisualMode::Original).map_err(wrap(step))?;
    ckpt.stage = stage.number();
    ckpt.step += step as u64;
    Ok(StageOutcome {
        checkpoint: ckpt,
        metrics,
        probe_before,
        probe_after,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &StageConfig,
    mcfg: &ModelConfig,
    params: &mut ParamSet,
    opt: &mut AdamW,
    samples: &[SyntheticSample],
    idx: &[usize],
    step: usize,
    lr: f64,
) -> Result<MetricRow> {
    let batch: Vec<&SyntheticSample> = idx.iter().map(|&i| &samples[i]).collect();
    let grids = batch
        .iter()
        .map(|s| PatchGrid::from_pixels(&mcfg.image, &s.pixels))
        .collect::<Result<Vec<_>>>()?;

    let mut g = Graph::new();
    let b = params.bind(&mut g, |grp| cfg.stage.trains(grp));
    let losses = batch_loss(&mut g, &b, mcfg, cfg.loss, &batch, &grids)?;
    let read = |g: &Graph, v: Var| -> Result<f64> { Ok(g.value(v).item()? as f64) };
    let loss = read(&g, losses.loss)?;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            op: "loss",
            msg: format!("loss is {loss}"),
        });
    }
    let loss_lm = losses.lm.map(|v| read(&g, v)).transpose()?;
    let loss_vm = losses.vm.map(|v| read(&g, v)).transpose()?;
    g.backward(losses.loss)?;

    let mut grads: IndexMap<String, Tensor> = IndexMap::new();
    for (name, var) in b.iter() {
        if g.requires_grad(var) {
            let grad = g
                .grad(var)
                .ok_or_else(|| Error::contract(format!("no gradient for trainable {name}")))?;
            grads.insert(name.to_string(), grad.clone());
        }
    }
    let grad_norm = if cfg.clip_norm > 0.0 {
        clip_global_norm(&mut grads, cfg.clip_norm)
    } else {
        super::optim::global_norm(&grads)
    };
    opt.step(params, &grads, lr, cfg.weight_decay)?;
    Ok(MetricRow {
        step,
        lr,
        loss,
        loss_lm,
        loss_vm,
        seconds: 0.0,
        grad_norm,
    })
}

/// Loss of the stage's objective on a batch without updating anything.
pub fn stage_loss(params: &ParamSet, mcfg: &ModelConfig, kind: LossKind, samples: &[SyntheticSample]) -> Result<f64> {
    let batch: Vec<&SyntheticSample> = samples.iter().collect();
    let grids = eval::patch_grids(&mcfg.image, samples)?;
    let out = model::eval_frozen(params, |g, b| Ok(batch_loss(g, b, mcfg, kind, &batch, &grids)?.loss))?;
    Ok(out.item()? as f64)
}
