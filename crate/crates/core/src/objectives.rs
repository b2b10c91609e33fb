//! Sequence assembly, visual tokens and the training losses.
//!
//! A sequence is laid out as
//! `[BOS][patch embeddings][instruction][response][EOS]`, right-padded with
//! PAD to the longest sequence of its batch. Supervision pairs an output
//! position `n` with the label taken from position `n + 1`:
//!
//! * `lm_pairs`: `(n, token)` for every response token and the EOS;
//! * `vm_pairs`: `(n, n + 1)` for every patch position `n + 1`, so BOS
//!   predicts patch 0.
//!
//! A sequence with an empty response is pure-image mode: no EOS is appended
//! and it carries no text supervision.
//!
//! Log-probabilities are used throughout. Both KL terms treat the label side
//! as a constant, so no gradient ever reaches the network that produced it.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{self, Binding, ModelConfig, PatchGrid};
use crate::tensor::{Scalar, Tensor};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: Scalar = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Visual,
    Text,
}

/// Layout and supervision sets of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSequence {
    pub modality_tags: Vec<Modality>,
    /// Token at each text position; `None` at visual positions.
    pub tokens: Vec<Option<TokenId>>,
    /// Supervised token at each position, if any.
    pub text_targets: Vec<Option<TokenId>>,
    pub lm_pairs: Vec<(usize, TokenId)>,
    pub vm_pairs: Vec<(usize, usize)>,
    pub num_patches: usize,
}

impl MultiModalSequence {
    pub fn layout(num_patches: usize, instruction: &[TokenId], response: &[TokenId]) -> Self {
        let mut tags = vec![Modality::Text];
        let mut tokens = vec![Some(BOS)];
        tags.extend(std::iter::repeat_n(Modality::Visual, num_patches));
        tokens.extend(std::iter::repeat_n(None, num_patches));
        for &t in instruction {
            tags.push(Modality::Text);
            tokens.push(Some(t));
        }
        let mut text_targets = vec![None; tokens.len()];
        let mut supervised: Vec<TokenId> = response.to_vec();
        if !response.is_empty() {
            supervised.push(EOS);
        }
        for t in supervised {
            tags.push(Modality::Text);
            tokens.push(Some(t));
            text_targets.push(Some(t));
        }
        let lm_pairs = text_targets
            .iter()
            .enumerate()
            .filter_map(|(pos, t)| t.map(|t| (pos - 1, t)))
            .collect();
        let vm_pairs = (1..=num_patches).map(|p| (p - 1, p)).collect();
        MultiModalSequence {
            modality_tags: tags,
            tokens,
            text_targets,
            lm_pairs,
            vm_pairs,
            num_patches,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends unsupervised PAD text positions up to `len`.
    pub fn pad_to(&mut self, len: usize) {
        while self.tokens.len() < len {
            self.modality_tags.push(Modality::Text);
            self.tokens.push(Some(PAD));
            self.text_targets.push(None);
        }
    }

    /// Checks the structural invariants of the supervision sets.
    pub fn validate(&self) -> Result<()> {
        let l = self.len();
        for &(n, p) in &self.vm_pairs {
            if p != n + 1 || p >= l || self.modality_tags[p] != Modality::Visual {
                return Err(Error::contract(format!("vm pair ({n}, {p}) is malformed")));
            }
        }
        for &(n, t) in &self.lm_pairs {
            if n + 1 >= l || self.text_targets[n + 1] != Some(t) {
                return Err(Error::contract(format!(
                    "lm pair ({n}, {t}) is not a supervised position"
                )));
            }
        }
        Ok(())
    }
}

/// Sequences of equal (padded) length stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub seq_len: usize,
    pub num_patches: usize,
    pub sequences: Vec<MultiModalSequence>,
}

impl SequenceBatch {
    pub fn new(mut sequences: Vec<MultiModalSequence>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::contract("a batch needs at least one sequence"))?;
        let num_patches = first.num_patches;
        if sequences.iter().any(|s| s.num_patches != num_patches) {
            return Err(Error::contract("all sequences in a batch need the same patch count"));
        }
        let seq_len = sequences.iter().map(MultiModalSequence::len).max().unwrap();
        for s in &mut sequences {
            s.pad_to(seq_len);
        }
        Ok(SequenceBatch {
            seq_len,
            num_patches,
            sequences,
        })
    }

    /// Row of the stacked decoder output for position `n` of sequence `b`.
    pub fn q_row(&self, b: usize, n: usize) -> usize {
        b * self.seq_len + n
    }

    /// Row of the stacked visual-token matrix for visual position `p` of sequence `b`.
    pub fn visual_row(&self, b: usize, p: usize) -> usize {
        b * self.num_patches + (p - 1)
    }
}

/// One training example: an image plus prompt and response ids.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub image: &'a PatchGrid,
    pub instruction: &'a [TokenId],
    pub response: &'a [TokenId],
}

/// The decoder input for a batch: the layout, the stacked embeddings
/// `X_input` and the visual embeddings `X_image` they contain.
#[derive(Debug, Clone)]
pub struct AssembledInput {
    pub batch: SequenceBatch,
    /// `[B·L × d]`
    pub embeddings: Var,
    /// `[B·P × d]`
    pub image_embeddings: Var,
}

/// Adapter outputs for a list of images, stacked `[n·P × d]`.
pub fn image_embeddings(g: &mut Graph, b: &Binding, cfg: &ModelConfig, images: &[&PatchGrid]) -> Result<Var> {
    let feats = model::visual_encode(g, b, cfg, images)?;
    model::adapt(g, b, cfg, feats)
}

/// Builds `X_input` for a batch. `visual` replaces the adapter outputs when
/// given (e.g. with pseudo image features); it must be `[B·P × d]`.
pub fn assemble_input(
    g: &mut Graph,
    b: &Binding,
    cfg: &ModelConfig,
    examples: &[Example<'_>],
    visual: Option<Var>,
) -> Result<AssembledInput> {
    let np = cfg.num_patches();
    let mut seqs = Vec::with_capacity(examples.len());
    for ex in examples {
        for &id in ex.instruction.iter().chain(ex.response) {
            if id >= cfg.vocab_size {
                return Err(Error::TokenId {
                    id,
                    size: cfg.vocab_size,
                });
            }
        }
        let seq = MultiModalSequence::layout(np, ex.instruction, ex.response);
        if seq.len() > cfg.max_seq_len {
            return Err(Error::Length {
                len: seq.len(),
                max: cfg.max_seq_len,
            });
        }
        seqs.push(seq);
    }
    let batch = SequenceBatch::new(seqs)?;

    let image_embeddings = match visual {
        Some(v) => {
            if g.shape(v) != [examples.len() * np, cfg.model_dim] {
                return Err(Error::shape(
                    "assemble_input",
                    &[examples.len() * np, cfg.model_dim],
                    g.shape(v),
                ));
            }
            v
        }
        None => {
            let images: Vec<&PatchGrid> = examples.iter().map(|e| e.image).collect();
            image_embeddings(g, b, cfg, &images)?
        }
    };

    let mut ids = Vec::new();
    let mut map = Vec::with_capacity(batch.sequences.len() * batch.seq_len);
    for (bi, seq) in batch.sequences.iter().enumerate() {
        for (pos, tok) in seq.tokens.iter().enumerate() {
            match tok {
                Some(t) => {
                    map.push((0, ids.len()));
                    ids.push(*t);
                }
                None => map.push((1, batch.visual_row(bi, pos))),
            }
        }
    }
    let text = model::embed_text(g, b, &ids)?;
    let embeddings = g.assemble_rows(&[text, image_embeddings], &map)?;
    Ok(AssembledInput {
        batch,
        embeddings,
        image_embeddings,
    })
}

/// `log Q` for every position: log-softmax of the MM head over decoder outputs. `[B·L × C]`
pub fn compute_q(g: &mut Graph, b: &Binding, cfg: &ModelConfig, input: &AssembledInput) -> Result<Var> {
    let h = model::decode(g, b, cfg, input.embeddings, input.batch.seq_len)?;
    let logits = model::mm_head(g, b, h)?;
    g.log_softmax(logits)
}

/// `log P'` for every visual embedding: log-softmax of the VM head. `[B·P × C]`
pub fn visual_tokens(g: &mut Graph, b: &Binding, input: &AssembledInput) -> Result<Var> {
    if input.batch.num_patches == 0 {
        return Err(Error::contract("visual tokens need at least one visual position"));
    }
    let logits = model::vm_head(g, b, input.image_embeddings)?;
    g.log_softmax(logits)
}

/// `log P'` for the stage-III objective: the VM head over detached visual
/// embeddings, so the adapter and encoder receive no gradient from it.
pub fn visual_tokens_detached(g: &mut Graph, b: &Binding, input: &AssembledInput) -> Result<Var> {
    if input.batch.num_patches == 0 {
        return Err(Error::contract("visual tokens need at least one visual position"));
    }
    let x = g.detach(input.image_embeddings);
    let logits = model::vm_head(g, b, x)?;
    g.log_softmax(logits)
}

fn check_pairs(batch: &SequenceBatch, lm: bool) -> Result<()> {
    for (i, s) in batch.sequences.iter().enumerate() {
        let empty = if lm {
            s.lm_pairs.is_empty()
        } else {
            s.vm_pairs.is_empty()
        };
        if empty {
            let which = if lm { "lm_pairs" } else { "vm_pairs" };
            return Err(Error::contract(format!("sequence {i} has no {which}")));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the text targets, averaged per sequence
/// and then over the batch.
pub fn loss_lm(g: &mut Graph, batch: &SequenceBatch, log_q: Var) -> Result<Var> {
    check_pairs(batch, true)?;
    let nb = batch.sequences.len() as Scalar;
    let mut entries = Vec::new();
    let mut weights = Vec::new();
    for (bi, s) in batch.sequences.iter().enumerate() {
        let w = 1.0 / (nb * s.lm_pairs.len() as Scalar);
        for &(n, t) in &s.lm_pairs {
            entries.push((batch.q_row(bi, n), t));
            weights.push(w);
        }
    }
    let picked = g.pick(log_q, &entries)?;
    let w = g.constant(Tensor::from_vec(weights));
    let weighted = g.mul(picked, w)?;
    let total = g.sum(weighted);
    Ok(g.neg(total))
}

/// `Σ_k w_k Σ_i p_k(i) (log p_k(i) − log q_k(i))` with the label rows held constant.
fn detached_kl(
    g: &mut Graph,
    label_log: &Tensor,
    label_rows: &[usize],
    pred_log: Var,
    pred_rows: &[usize],
    row_weights: &[Scalar],
) -> Result<Var> {
    let c = label_log.cols();
    let mut lab = Vec::with_capacity(label_rows.len() * c);
    let mut w = Vec::with_capacity(label_rows.len() * c);
    for (&r, &rw) in label_rows.iter().zip(row_weights) {
        let row = label_log.row(r);
        lab.extend_from_slice(row);
        // exp(log p) is exactly 0 when p underflowed, which gives 0·log 0 = 0
        w.extend(row.iter().map(|&lp| lp.exp() * rw));
    }
    let shape = vec![label_rows.len(), c];
    let lab = g.constant(Tensor::new(shape.clone(), lab)?);
    let w = g.constant(Tensor::new(shape, w)?);
    let pred = g.select_rows(pred_log, pred_rows)?;
    let diff = g.sub(lab, pred)?;
    let terms = g.mul(w, diff)?;
    Ok(g.sum(terms))
}

fn vm_rows(batch: &SequenceBatch) -> Result<(Vec<usize>, Vec<usize>, Vec<Scalar>)> {
    check_pairs(batch, false)?;
    let nb = batch.sequences.len() as Scalar;
    let (mut q_rows, mut p_rows, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for (bi, s) in batch.sequences.iter().enumerate() {
        let w = 1.0 / (nb * s.vm_pairs.len() as Scalar);
        for &(n, p) in &s.vm_pairs {
            q_rows.push(batch.q_row(bi, n));
            p_rows.push(batch.visual_row(bi, p));
            weights.push(w);
        }
    }
    Ok((q_rows, p_rows, weights))
}

/// Forward KL(P'‖Q) over the visual pairs. `P'` is the label and is detached.
pub fn loss_vm(g: &mut Graph, batch: &SequenceBatch, log_q: Var, log_p: Var) -> Result<Var> {
    let (q_rows, p_rows, w) = vm_rows(batch)?;
    let label = g.value(log_p).clone();
    detached_kl(g, &label, &p_rows, log_q, &q_rows, &w)
}

/// Reversed KL(Q‖P') over the visual pairs. `Q` is the label and is detached;
/// only the visual-token side receives gradient.
pub fn loss_vm_stage3(g: &mut Graph, batch: &SequenceBatch, log_q: Var, log_p: Var) -> Result<Var> {
    let (q_rows, p_rows, w) = vm_rows(batch)?;
    let label = g.value(log_q).clone();
    detached_kl(g, &label, &q_rows, log_p, &p_rows, &w)
}

#[derive(Debug, Clone, Copy)]
pub struct MmLoss {
    pub total: Var,
    pub lm: Var,
    pub vm: Var,
}

/// `loss_lm + loss_vm` from one forward pass.
pub fn loss_mm(g: &mut Graph, batch: &SequenceBatch, log_q: Var, log_p: Var) -> Result<MmLoss> {
    let lm = loss_lm(g, batch, log_q)?;
    let vm = loss_vm(g, batch, log_q, log_p)?;
    let total = g.add(lm, vm)?;
    Ok(MmLoss { total, lm, vm })
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabDistribution {
    probs: Vec<Scalar>,
}

impl VocabDistribution {
    pub fn new(probs: Vec<Scalar>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::contract("distribution entries must be finite and nonnegative"));
        }
        let sum: Scalar = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("distribution sums to {sum}")));
        }
        Ok(VocabDistribution { probs })
    }

    pub fn one_hot(size: usize, id: TokenId) -> Result<Self> {
        if id >= size {
            return Err(Error::TokenId { id, size });
        }
        let mut probs = vec![0.0; size];
        probs[id] = 1.0;
        Ok(VocabDistribution { probs })
    }

    pub fn uniform(size: usize) -> Self {
        VocabDistribution {
            probs: vec![1.0 / size as Scalar; size],
        }
    }

    pub fn probs(&self) -> &[Scalar] {
        &self.probs
    }

    pub fn argmax(&self) -> TokenId {
        model::argmax(&self.probs)
    }

    /// Rows of a log-probability tensor, exponentiated.
    pub fn from_log_rows(log_probs: &Tensor) -> Vec<VocabDistribution> {
        (0..log_probs.rows())
            .map(|r| VocabDistribution {
                probs: log_probs.row(r).iter().map(|v| v.exp()).collect(),
            })
            .collect()
    }
}

/// Stacks distributions into a `[n × C]` tensor of floored log-probabilities.
pub fn log_prob_tensor(rows: &[VocabDistribution]) -> Result<Tensor> {
    let data: Vec<Vec<Scalar>> = rows
        .iter()
        .map(|d| d.probs.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect())
        .collect();
    Tensor::from_rows(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{names, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        use crate::data::synth::ImageSpec;
        ModelConfig {
            vocab_size: 16,
            model_dim: 8,
            layers: 1,
            heads: 2,
            max_seq_len: 32,
            image: ImageSpec {
                grid_rows: 2,
                grid_cols: 2,
                patch_size: 2,
                channels: 3,
            },
            visual_dim: 6,
            adapter_hidden: 10,
            mlp_hidden: 12,
            init_std: 0.3,
        }
    }

    fn grid(cfg: &ModelConfig, seed: u64) -> PatchGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<u8> = (0..cfg.image.num_values()).map(|_| rng.gen()).collect();
        PatchGrid::from_pixels(&cfg.image, &px).unwrap()
    }

    #[test]
    fn layout_counts() {
        let s = MultiModalSequence::layout(16, &[], &[]);
        assert!(s.lm_pairs.is_empty());
        assert_eq!(s.vm_pairs.len(), 16);
        assert_eq!(s.len(), 17);

        let s = MultiModalSequence::layout(16, &[30, 31], &[3, 13, 21, 23, 4]);
        assert_eq!(s.vm_pairs.len(), 16);
        assert_eq!(s.lm_pairs.len(), 6);
        assert_eq!(s.lm_pairs.last().unwrap().1, EOS);
        // first response token is predicted from the last instruction position
        assert_eq!(s.lm_pairs[0], (18, 3));
        s.validate().unwrap();

        let visual: Vec<usize> = (0..s.len())
            .filter(|&i| s.modality_tags[i] == Modality::Visual)
            .collect();
        assert_eq!(visual, (1..=16).collect::<Vec<_>>());
    }

    #[test]
    fn padding_is_never_supervised() {
        let a = MultiModalSequence::layout(4, &[5], &[6]);
        let b = MultiModalSequence::layout(4, &[5, 7, 8], &[6, 9, 10]);
        let batch = SequenceBatch::new(vec![a, b]).unwrap();
        for s in &batch.sequences {
            assert_eq!(s.len(), batch.seq_len);
            for &(n, t) in &s.lm_pairs {
                assert_ne!(t, PAD);
                assert_ne!(s.tokens[n + 1], Some(PAD));
            }
            s.validate().unwrap();
        }
    }

    #[test]
    fn assemble_rejects_bad_inputs() {
        let cfg = small_cfg();
        let p = ParamSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = grid(&cfg, 0);
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let ex = Example {
            image: &img,
            instruction: &[],
            response: &[16],
        };
        assert!(matches!(
            assemble_input(&mut g, &b, &cfg, &[ex], None),
            Err(Error::TokenId { id: 16, .. })
        ));
        let long = vec![5; 40];
        let ex = Example {
            image: &img,
            instruction: &[],
            response: &long,
        };
        assert!(matches!(
            assemble_input(&mut g, &b, &cfg, &[ex], None),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn assembled_rows_follow_layout() {
        let cfg = small_cfg();
        let p = ParamSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = grid(&cfg, 1);
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let ex = Example {
            image: &img,
            instruction: &[7],
            response: &[8, 9],
        };
        let input = assemble_input(&mut g, &b, &cfg, &[ex], None).unwrap();
        let x = g.value(input.embeddings).clone();
        let vis = g.value(input.image_embeddings).clone();
        let table = p.get(names::EMBED).unwrap();
        assert_eq!(x.rows(), 1 + 4 + 1 + 2 + 1);
        assert_eq!(x.row(0), table.row(BOS));
        for k in 0..4 {
            assert_eq!(x.row(1 + k), vis.row(k));
        }
        assert_eq!(x.row(5), table.row(7));
        assert_eq!(x.row(8), table.row(EOS));
    }

    #[test]
    fn lm_loss_values() {
        let seq = MultiModalSequence::layout(1, &[], &[3]);
        let batch = SequenceBatch::new(vec![seq]).unwrap();
        let c = 64;
        let l = batch.seq_len;
        let mut g = Graph::new();
        let q = g.constant(log_prob_tensor(&vec![VocabDistribution::uniform(c); l]).unwrap());
        let loss = loss_lm(&mut g, &batch, q).unwrap();
        assert!((g.value(loss).item().unwrap() - (64.0 as Scalar).ln()).abs() < 1e-12);

        let rows: Vec<_> = (0..l)
            .map(
                |pos| match batch.sequences[0].text_targets.get(pos + 1).copied().flatten() {
                    Some(t) => VocabDistribution::one_hot(c, t).unwrap(),
                    None => VocabDistribution::uniform(c),
                },
            )
            .collect();
        let q = g.constant(log_prob_tensor(&rows).unwrap());
        let loss = loss_lm(&mut g, &batch, q).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn empty_supervision_is_a_contract_error() {
        let seq = MultiModalSequence::layout(2, &[], &[]);
        let batch = SequenceBatch::new(vec![seq]).unwrap();
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[batch.seq_len, 4]));
        assert!(matches!(loss_lm(&mut g, &batch, q), Err(Error::Contract(_))));

        let seq = MultiModalSequence::layout(0, &[], &[3]);
        let batch = SequenceBatch::new(vec![seq]).unwrap();
        let q = g.constant(Tensor::zeros(&[batch.seq_len, 4]));
        let p = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(loss_vm(&mut g, &batch, q, p), Err(Error::Contract(_))));
        assert!(matches!(loss_vm_stage3(&mut g, &batch, q, p), Err(Error::Contract(_))));
        assert!(matches!(loss_mm(&mut g, &batch, q, p), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_single_term_is_ln2() {
        // one visual pair: label row p=1, prediction row n=0
        let seq = MultiModalSequence::layout(1, &[], &[]);
        let batch = SequenceBatch::new(vec![seq]).unwrap();
        let one = VocabDistribution::new(vec![1.0, 0.0]).unwrap();
        let half = VocabDistribution::new(vec![0.5, 0.5]).unwrap();
        let mut g = Graph::new();

        // zero probabilities are floored at 1e-12, which perturbs the sum by ~3e-11
        // forward: P' = [1,0] labels, Q = [0.5,0.5]
        let q = g.constant(log_prob_tensor(&[half.clone(), half.clone()]).unwrap());
        let p = g.constant(log_prob_tensor(std::slice::from_ref(&one)).unwrap());
        let l = loss_vm(&mut g, &batch, q, p).unwrap();
        assert!((g.value(l).item().unwrap() - (2.0 as Scalar).ln()).abs() < 1e-10);

        // reversed: Q = [1,0] labels, P' = [0.5,0.5]
        let q = g.constant(log_prob_tensor(&[one.clone(), one]).unwrap());
        let p = g.constant(log_prob_tensor(&[half]).unwrap());
        let l = loss_vm_stage3(&mut g, &batch, q, p).unwrap();
        assert!((g.value(l).item().unwrap() - (2.0 as Scalar).ln()).abs() < 1e-10);
    }

    #[test]
    fn distribution_validation() {
        assert!(VocabDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(VocabDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(VocabDistribution::one_hot(3, 3).is_err());
        assert_eq!(VocabDistribution::one_hot(3, 1).unwrap().argmax(), 1);
    }
}
