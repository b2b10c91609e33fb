//! Held-out evaluation: losses, greedy captioning, and the color probe.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::analysis;
use crate::autograd::{Graph, Var};
use crate::data::{describe_pixels, ImageSpec, SyntheticSample, TokenId, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::model::{self, Binding, ModelConfig, ParamSet, PatchGrid};
use crate::objectives::{self, Example};
use crate::tensor::Tensor;

/// Where the visual rows of `X_input` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualMode {
    /// Adapter outputs.
    Original,
    /// Visual-token-weighted mixtures of the embedding table.
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub loss_mm: f64,
    pub loss_lm: f64,
    pub loss_vm: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

pub const EVAL_BATCH: usize = 64;

pub fn patch_grids(spec: &ImageSpec, samples: &[SyntheticSample]) -> Result<Vec<PatchGrid>> {
    samples
        .iter()
        .map(|s| PatchGrid::from_pixels(spec, &s.pixels))
        .collect()
}

/// Visual rows fed to the decoder under `mode`, plus the adapter outputs
/// themselves (the visual-token labels always come from the latter).
fn visual_rows(
    g: &mut Graph,
    b: &Binding,
    cfg: &ModelConfig,
    images: &[&PatchGrid],
    mode: VisualMode,
) -> Result<(Var, Var)> {
    let x = objectives::image_embeddings(g, b, cfg, images)?;
    let fed = match mode {
        VisualMode::Original => x,
        VisualMode::Pseudo => analysis::pseudo_features_from(g, b, x)?,
    };
    Ok((fed, x))
}

/// Mean losses over `samples`, each batch weighted by its size.
pub fn eval_losses(
    params: &ParamSet,
    cfg: &ModelConfig,
    samples: &[SyntheticSample],
    mode: VisualMode,
) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    let grids = patch_grids(&cfg.image, samples)?;
    let (mut lm_sum, mut vm_sum) = (0.0, 0.0);
    for (chunk, gchunk) in samples.chunks(EVAL_BATCH).zip(grids.chunks(EVAL_BATCH)) {
        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false);
        let images: Vec<&PatchGrid> = gchunk.iter().collect();
        let (fed, x) = visual_rows(&mut g, &b, cfg, &images, mode)?;
        let examples: Vec<Example> = chunk
            .iter()
            .zip(gchunk)
            .map(|(s, grid)| Example {
                image: grid,
                instruction: &s.instruction,
                response: &s.response,
            })
            .collect();
        let input = objectives::assemble_input(&mut g, &b, cfg, &examples, Some(fed))?;
        let log_q = objectives::compute_q(&mut g, &b, cfg, &input)?;
        let logits = model::vm_head(&mut g, &b, x)?;
        let log_p = g.log_softmax(logits)?;
        let mm = objectives::loss_mm(&mut g, &input.batch, log_q, log_p)?;
        let n = chunk.len() as f64;
        lm_sum += g.value(mm.lm).item()? as f64 * n;
        vm_sum += g.value(mm.vm).item()? as f64 * n;
    }
    let n = samples.len() as f64;
    let (lm, vm) = (lm_sum / n, vm_sum / n);
    Ok(LossReport {
        loss_mm: lm + vm,
        loss_lm: lm,
        loss_vm: vm,
        samples: samples.len(),
    })
}

/// Greedy decoding for a batch sharing one prompt. Each output stops at
/// (and excludes) EOS, or after `max_new` tokens.
pub fn greedy_decode(
    params: &ParamSet,
    cfg: &ModelConfig,
    images: &[&PatchGrid],
    instruction: &[TokenId],
    max_new: usize,
    mode: VisualMode,
) -> Result<Vec<Vec<TokenId>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let visual: Tensor = model::eval_frozen(params, |g, b| Ok(visual_rows(g, b, cfg, images, mode)?.0))?;
    let prefix = 1 + cfg.num_patches() + instruction.len();
    let budget = max_new.min(cfg.max_seq_len.saturating_sub(prefix));
    let mut generated: Vec<Vec<TokenId>> = vec![Vec::new(); images.len()];
    let mut done = vec![false; images.len()];
    for _ in 0..budget {
        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false);
        let prompts: Vec<Vec<TokenId>> = generated
            .iter()
            .map(|gen| instruction.iter().chain(gen).copied().collect())
            .collect();
        let examples: Vec<Example> = images
            .iter()
            .zip(&prompts)
            .map(|(&image, p)| Example {
                image,
                instruction: p,
                response: &[],
            })
            .collect();
        let v = g.constant(visual.clone());
        let input = objectives::assemble_input(&mut g, &b, cfg, &examples, Some(v))?;
        let log_q = objectives::compute_q(&mut g, &b, cfg, &input)?;
        let q = g.value(log_q);
        let last = input.batch.seq_len - 1;
        for (i, gen) in generated.iter_mut().enumerate() {
            let next = model::argmax(q.row(input.batch.q_row(i, last)));
            if !done[i] {
                gen.push(next);
                done[i] = next == EOS;
            } else {
                // keep lockstep lengths; the padding token is never read back
                gen.push(EOS);
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(generated
        .into_iter()
        .map(|gen| gen.into_iter().take_while(|&t| t != EOS).collect())
        .collect())
}

pub const MAX_NEW_TOKENS: usize = 12;

/// Exact-match rate of greedy outputs against the stored responses.
pub fn caption_accuracy(
    params: &ParamSet,
    cfg: &ModelConfig,
    samples: &[SyntheticSample],
    mode: VisualMode,
) -> Result<Accuracy> {
    let grids = patch_grids(&cfg.image, samples)?;
    let mut by_prompt: BTreeMap<&[TokenId], Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_prompt.entry(&s.instruction).or_default().push(i);
    }
    let mut correct = 0;
    for (prompt, idx) in by_prompt {
        for chunk in idx.chunks(EVAL_BATCH) {
            let images: Vec<&PatchGrid> = chunk.iter().map(|&i| &grids[i]).collect();
            let out = greedy_decode(params, cfg, &images, prompt, MAX_NEW_TOKENS, mode)?;
            correct += chunk
                .iter()
                .zip(&out)
                .filter(|(&i, o)| samples[i].response == **o)
                .count();
        }
    }
    Ok(Accuracy {
        correct,
        total: samples.len(),
    })
}

/// Patches covered entirely by the object, in row-major grid order.
pub fn solid_patches(spec: &ImageSpec, pixels: &[u8]) -> Result<Vec<bool>> {
    let ch = spec.channels;
    let w = spec.width();
    let ps = spec.patch_size;
    let bg = |p: &[u8]| p.iter().all(|&c| c == p[0]) && p[0] <= 48;
    if pixels.len() != spec.num_values() {
        return Err(Error::shape("solid_patches", &[spec.num_values()], &[pixels.len()]));
    }
    let mut out = Vec::with_capacity(spec.num_patches());
    for gr in 0..spec.grid_rows {
        for gc in 0..spec.grid_cols {
            let solid = (0..ps).all(|y| {
                (0..ps).all(|x| {
                    let at = ((gr * ps + y) * w + gc * ps + x) * ch;
                    !bg(&pixels[at..at + ch])
                })
            });
            out.push(solid);
        }
    }
    Ok(out)
}

/// How often the top visual token of a solid object patch is that object's color word.
pub fn color_token_accuracy(
    params: &ParamSet,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    samples: &[SyntheticSample],
) -> Result<Accuracy> {
    let colors = vocab.color_ids();
    let (mut correct, mut total) = (0, 0);
    for s in samples {
        let scene = describe_pixels(&cfg.image, &s.pixels)?;
        let grid = PatchGrid::from_pixels(&cfg.image, &s.pixels)?;
        let map = analysis::token_map_top(params, cfg, vocab, &grid)?;
        let flat: Vec<TokenId> = map.grid.concat();
        for (p, solid) in solid_patches(&cfg.image, &s.pixels)?.into_iter().enumerate() {
            if solid {
                total += 1;
                correct += usize::from(flat[p] == colors[scene.color]);
            }
        }
    }
    Ok(Accuracy { correct, total })
}
