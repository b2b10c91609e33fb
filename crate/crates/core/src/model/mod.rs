//! Visual encoder, adapter, causal decoder and the two vocabulary heads.
//!
//! Every component is a function over a [`Graph`] and a [`Binding`] of the
//! model's parameters. Inputs may stack several sequences row-wise; the
//! decoder keeps them apart through its block-diagonal causal attention.

pub mod config;
pub mod params;

use crate::autograd::{Graph, Var};
use crate::data::synth::ImageSpec;
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use config::ModelConfig;
pub use params::{names, Binding, Param, ParamGroup, ParamSet};

/// An image split into row-major patches, each flattened and scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    spec: ImageSpec,
    patches: Tensor,
}

impl PatchGrid {
    pub fn from_pixels(spec: &ImageSpec, pixels: &[u8]) -> Result<Self> {
        let rows = spec.patches(pixels)?;
        Ok(PatchGrid {
            spec: *spec,
            patches: Tensor::from_rows(&rows)?,
        })
    }

    pub fn from_tensor(spec: &ImageSpec, patches: Tensor) -> Result<Self> {
        if patches.shape() != [spec.num_patches(), spec.patch_dim()] {
            return Err(Error::shape(
                "patch grid",
                &[spec.num_patches(), spec.patch_dim()],
                patches.shape(),
            ));
        }
        Ok(PatchGrid { spec: *spec, patches })
    }

    pub fn spec(&self) -> &ImageSpec {
        &self.spec
    }

    pub fn patches(&self) -> &Tensor {
        &self.patches
    }
}

fn linear(g: &mut Graph, b: &Binding, x: Var, weight: &str, bias: Option<&str>) -> Result<Var> {
    let y = g.matmul_nt(x, b.var(weight)?)?;
    match bias {
        Some(name) => g.add_bias(y, b.var(name)?),
        None => Ok(y),
    }
}

/// Per-patch linear projection of raw pixels plus a per-position embedding.
/// Returns `[n_images·P × visual_dim]`.
pub fn visual_encode(g: &mut Graph, b: &Binding, cfg: &ModelConfig, images: &[&PatchGrid]) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::contract("visual_encode needs at least one image"));
    }
    let np = cfg.num_patches();
    let mut data = Vec::with_capacity(images.len() * np * cfg.image.patch_dim());
    for img in images {
        if img.spec != cfg.image {
            return Err(Error::Shape {
                op: "visual_encode",
                lhs: vec![cfg.image.grid_rows, cfg.image.grid_cols, cfg.image.patch_dim()],
                rhs: vec![img.spec.grid_rows, img.spec.grid_cols, img.spec.patch_dim()],
            });
        }
        data.extend_from_slice(img.patches.data());
    }
    let pixels = g.constant(Tensor::new(vec![images.len() * np, cfg.image.patch_dim()], data)?);
    let proj = linear(g, b, pixels, names::ENC_PROJ_W, Some(names::ENC_PROJ_B))?;
    let map: Vec<_> = (0..images.len()).flat_map(|_| (0..np).map(|p| (0, p))).collect();
    let pos = g.assemble_rows(&[b.var(names::ENC_POS)?], &map)?;
    g.add(proj, pos)
}

/// Two-layer MLP (linear → GELU → linear) into the decoder width; rows are independent.
pub fn adapt(g: &mut Graph, b: &Binding, cfg: &ModelConfig, features: Var) -> Result<Var> {
    if g.value(features).cols() != cfg.visual_dim {
        return Err(Error::shape("adapt", &[cfg.visual_dim], g.shape(features)));
    }
    let h = linear(g, b, features, names::AD_FC1_W, Some(names::AD_FC1_B))?;
    let h = g.gelu(h);
    linear(g, b, h, names::AD_FC2_W, Some(names::AD_FC2_B))
}

/// Embedding-table rows for `ids`.
pub fn embed_text(g: &mut Graph, b: &Binding, ids: &[TokenId]) -> Result<Var> {
    g.gather_rows(b.var(names::EMBED)?, ids)
}

/// Pre-norm causal transformer over `[n_seq·seq_len × d]` stacked sequences,
/// ending in a final layer norm.
pub fn decode(g: &mut Graph, b: &Binding, cfg: &ModelConfig, x: Var, seq_len: usize) -> Result<Var> {
    let (rows, d) = match *g.shape(x) {
        [r, c] => (r, c),
        ref s => return Err(Error::shape("decode", s, &[cfg.model_dim])),
    };
    if d != cfg.model_dim {
        return Err(Error::shape("decode", g.shape(x), &[cfg.model_dim]));
    }
    if seq_len > cfg.max_seq_len {
        return Err(Error::Length {
            len: seq_len,
            max: cfg.max_seq_len,
        });
    }
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::contract(format!(
            "{rows} rows do not split into sequences of {seq_len}"
        )));
    }
    let map: Vec<_> = (0..rows / seq_len).flat_map(|_| (0..seq_len).map(|p| (0, p))).collect();
    let pos = g.assemble_rows(&[b.var(names::DEC_POS)?], &map)?;
    let mut h = g.add(x, pos)?;
    for l in 0..cfg.layers {
        let n = |s: &str| names::layer(l, s);
        let a = g.layer_norm(h, b.var(&n("ln1.gamma"))?, b.var(&n("ln1.beta"))?)?;
        let q = linear(g, b, a, &n("attn.wq"), Some(&n("attn.bq")))?;
        let k = linear(g, b, a, &n("attn.wk"), Some(&n("attn.bk")))?;
        let v = linear(g, b, a, &n("attn.wv"), Some(&n("attn.bv")))?;
        let att = g.causal_attention(q, k, v, cfg.heads, seq_len)?;
        let o = linear(g, b, att, &n("attn.wo"), Some(&n("attn.bo")))?;
        h = g.add(h, o)?;

        let m = g.layer_norm(h, b.var(&n("ln2.gamma"))?, b.var(&n("ln2.beta"))?)?;
        let m = linear(g, b, m, &n("mlp.fc1.weight"), Some(&n("mlp.fc1.bias")))?;
        let m = g.gelu(m);
        let m = linear(g, b, m, &n("mlp.fc2.weight"), Some(&n("mlp.fc2.bias")))?;
        h = g.add(h, m)?;
    }
    g.layer_norm(h, b.var(names::LN_F_G)?, b.var(names::LN_F_B)?)
}

/// Vocabulary logits from decoder states (unbiased).
pub fn mm_head(g: &mut Graph, b: &Binding, hidden: Var) -> Result<Var> {
    g.matmul_nt(hidden, b.var(names::MM_HEAD)?)
}

/// Vocabulary logits from visual embeddings (unbiased).
pub fn vm_head(g: &mut Graph, b: &Binding, visual: Var) -> Result<Var> {
    g.matmul_nt(visual, b.var(names::VM_HEAD)?)
}

/// Convenience: runs `f` on a fresh graph with every parameter frozen and
/// returns the value of the produced node.
pub fn eval_frozen(params: &ParamSet, f: impl FnOnce(&mut Graph, &Binding) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let out = f(&mut g, &b)?;
    Ok(g.value(out).clone())
}

/// Index of the largest value in `row`; ties go to the smallest index.
pub fn argmax(row: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            model_dim: 8,
            layers: 1,
            heads: 2,
            max_seq_len: 24,
            image: ImageSpec {
                grid_rows: 2,
                grid_cols: 2,
                patch_size: 2,
                channels: 3,
            },
            visual_dim: 6,
            adapter_hidden: 10,
            mlp_hidden: 12,
            init_std: 0.5,
        }
    }

    fn params(cfg: &ModelConfig, seed: u64) -> ParamSet {
        ParamSet::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn zero_group(p: &mut ParamSet, group: ParamGroup) {
        for (_, param) in p.iter_mut() {
            if param.group == group {
                param.tensor.data_mut().fill(0.0);
            }
        }
    }

    fn grid(cfg: &ModelConfig, seed: u64) -> PatchGrid {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<u8> = (0..cfg.image.num_values()).map(|_| rng.gen()).collect();
        PatchGrid::from_pixels(&cfg.image, &px).unwrap()
    }

    #[test]
    fn zero_image_zero_encoder_gives_positions() {
        let cfg = small_cfg();
        let mut p = params(&cfg, 1);
        p.get_mut(names::ENC_PROJ_W).unwrap().data_mut().fill(0.0);
        let img = PatchGrid::from_pixels(&cfg.image, &vec![0; cfg.image.num_values()]).unwrap();
        let out = eval_frozen(&p, |g, b| visual_encode(g, b, &cfg, &[&img])).unwrap();
        assert_eq!(out.data(), p.get(names::ENC_POS).unwrap().data());
    }

    #[test]
    fn swapping_patches_swaps_features() {
        let cfg = small_cfg();
        let mut p = params(&cfg, 2);
        p.get_mut(names::ENC_POS).unwrap().data_mut().fill(0.0);
        let img = grid(&cfg, 3);
        let mut swapped = img.patches().clone();
        let (r0, r3) = (img.patches().row(0).to_vec(), img.patches().row(3).to_vec());
        swapped.row_mut(0).copy_from_slice(&r3);
        swapped.row_mut(3).copy_from_slice(&r0);
        let img2 = PatchGrid::from_tensor(&cfg.image, swapped).unwrap();
        let a = eval_frozen(&p, |g, b| visual_encode(g, b, &cfg, &[&img])).unwrap();
        let c = eval_frozen(&p, |g, b| visual_encode(g, b, &cfg, &[&img2])).unwrap();
        assert_eq!(a.row(0), c.row(3));
        assert_eq!(a.row(3), c.row(0));
        assert_eq!(a.row(1), c.row(1));
    }

    #[test]
    fn wrong_grid_is_shape_error() {
        let cfg = small_cfg();
        let p = params(&cfg, 0);
        let other = ImageSpec {
            grid_rows: 3,
            ..cfg.image
        };
        let img = PatchGrid::from_pixels(&other, &vec![0; other.num_values()]).unwrap();
        let err = eval_frozen(&p, |g, b| visual_encode(g, b, &cfg, &[&img])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn encoder_is_deterministic() {
        let cfg = small_cfg();
        let img = grid(&cfg, 9);
        let a = eval_frozen(&params(&cfg, 4), |g, b| visual_encode(g, b, &cfg, &[&img])).unwrap();
        let c = eval_frozen(&params(&cfg, 4), |g, b| visual_encode(g, b, &cfg, &[&img])).unwrap();
        assert!(a.data().iter().zip(c.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_adapter_gives_zero_output() {
        let cfg = small_cfg();
        let mut p = params(&cfg, 1);
        zero_group(&mut p, ParamGroup::Adapter);
        let img = grid(&cfg, 1);
        let out = eval_frozen(&p, |g, b| {
            let f = visual_encode(g, b, &cfg, &[&img])?;
            adapt(g, b, &cfg, f)
        })
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_rows_are_independent() {
        let cfg = small_cfg();
        let p = params(&cfg, 1);
        let mut feats = Tensor::zeros(&[4, cfg.visual_dim]);
        for (i, v) in feats.data_mut().iter_mut().enumerate() {
            *v = (i as Scalar * 0.37).sin();
        }
        let mut changed = feats.clone();
        changed.row_mut(2).iter_mut().for_each(|v| *v += 1.5);
        let run = |f: &Tensor| {
            eval_frozen(&p, |g, b| {
                let x = g.constant(f.clone());
                adapt(g, b, &cfg, x)
            })
            .unwrap()
        };
        let (a, c) = (run(&feats), run(&changed));
        for r in [0, 1, 3] {
            assert_eq!(a.row(r), c.row(r));
        }
        assert_ne!(a.row(2), c.row(2));
    }

    #[test]
    fn adapter_dim_mismatch() {
        let cfg = small_cfg();
        let p = params(&cfg, 1);
        let err = eval_frozen(&p, |g, b| {
            let x = g.constant(Tensor::zeros(&[2, cfg.visual_dim + 1]));
            adapt(g, b, &cfg, x)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn embedding_lookup() {
        let cfg = small_cfg();
        let mut p = params(&cfg, 1);
        let table = p.get_mut(names::EMBED).unwrap();
        table.data_mut().fill(0.0);
        for j in 0..cfg.model_dim {
            table.row_mut(j)[j] = 1.0;
        }
        let out = eval_frozen(&p, |g, b| embed_text(g, b, &[3, 5, 3])).unwrap();
        let mut one_hot = vec![0.0; cfg.model_dim];
        one_hot[3] = 1.0;
        assert_eq!(out.row(0), one_hot.as_slice());
        assert_eq!(out.row(0), out.row(2));
        let err = eval_frozen(&p, |g, b| embed_text(g, b, &[cfg.vocab_size])).unwrap_err();
        assert!(matches!(err, Error::TokenId { .. }));
    }

    fn random_input(rows: usize, d: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn decode_is_causal_bit_exact() {
        let cfg = small_cfg();
        let p = params(&cfg, 7);
        let x = random_input(6, cfg.model_dim, 1);
        let run = |t: &Tensor| {
            eval_frozen(&p, |g, b| {
                let v = g.constant(t.clone());
                decode(g, b, &cfg, v, 6)
            })
            .unwrap()
        };
        let base = run(&x);
        for n in 0..6 {
            let mut y = x.clone();
            y.row_mut(n).iter_mut().for_each(|v| *v = -*v + 0.3);
            let out = run(&y);
            for r in 0..n {
                assert!(
                    base.row(r)
                        .iter()
                        .zip(out.row(r))
                        .all(|(a, c)| a.to_bits() == c.to_bits()),
                    "row {r} changed when row {n} was perturbed"
                );
            }
            assert_ne!(base.row(n), out.row(n));
        }
    }

    #[test]
    fn decode_single_row_and_overlong() {
        let cfg = small_cfg();
        let p = params(&cfg, 7);
        let out = eval_frozen(&p, |g, b| {
            let v = g.constant(random_input(1, cfg.model_dim, 2));
            decode(g, b, &cfg, v, 1)
        })
        .unwrap();
        assert_eq!(out.shape(), &[1, cfg.model_dim]);
        let err = eval_frozen(&p, |g, b| {
            let v = g.constant(random_input(25, cfg.model_dim, 2));
            decode(g, b, &cfg, v, 25)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Length { len: 25, max: 24 }));
    }

    #[test]
    fn stacked_sequences_do_not_interact() {
        let cfg = small_cfg();
        let p = params(&cfg, 3);
        let a = random_input(4, cfg.model_dim, 10);
        let c = random_input(4, cfg.model_dim, 11);
        let mut both = a.data().to_vec();
        both.extend_from_slice(c.data());
        let both = Tensor::new(vec![8, cfg.model_dim], both).unwrap();
        let run = |t: &Tensor| {
            eval_frozen(&p, |g, b| {
                let v = g.constant(t.clone());
                decode(g, b, &cfg, v, 4)
            })
            .unwrap()
        };
        let (ya, yc, yboth) = (run(&a), run(&c), run(&both));
        assert_eq!(&yboth.data()[..ya.numel()], ya.data());
        assert_eq!(&yboth.data()[ya.numel()..], yc.data());
    }

    #[test]
    fn heads_are_bias_free_and_linear() {
        let cfg = small_cfg();
        let p = params(&cfg, 5);
        for head in [mm_head as fn(&mut Graph, &Binding, Var) -> Result<Var>, vm_head] {
            let zero = eval_frozen(&p, |g, b| {
                let x = g.constant(Tensor::zeros(&[3, cfg.model_dim]));
                head(g, b, x)
            })
            .unwrap();
            assert!(zero.data().iter().all(|&v| v == 0.0));

            let (x, y) = (random_input(2, cfg.model_dim, 1), random_input(2, cfg.model_dim, 2));
            let mut sum = x.clone();
            sum.data_mut().iter_mut().zip(y.data()).for_each(|(a, b)| *a += b);
            let run = |t: &Tensor| {
                eval_frozen(&p, |g, b| {
                    let v = g.constant(t.clone());
                    head(g, b, v)
                })
                .unwrap()
            };
            let (fx, fy, fs) = (run(&x), run(&y), run(&sum));
            for i in 0..fs.numel() {
                assert!((fs.data()[i] - fx.data()[i] - fy.data()[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_mm_head_gives_uniform_distribution() {
        let cfg = small_cfg();
        let mut p = params(&cfg, 5);
        p.get_mut(names::MM_HEAD).unwrap().data_mut().fill(0.0);
        let q = eval_frozen(&p, |g, b| {
            let x = g.constant(random_input(3, cfg.model_dim, 4));
            let h = decode(g, b, &cfg, x, 3)?;
            let logits = mm_head(g, b, h)?;
            g.softmax(logits)
        })
        .unwrap();
        for &v in q.data() {
            assert!((v - 1.0 / cfg.vocab_size as Scalar).abs() < 1e-12);
        }
    }

    #[test]
    fn head_from_embedding_transpose_recovers_token() {
        // near-orthogonal table: scaled one-hot rows plus a small shared offset
        let cfg = small_cfg();
        let mut p = params(&cfg, 5);
        let (c, d) = (cfg.vocab_size, cfg.model_dim);
        let mut table = Tensor::zeros(&[c, d]);
        for j in 0..d {
            table.row_mut(j)[j] = 2.0;
            table.row_mut(j).iter_mut().for_each(|v| *v += 0.05);
        }
        for j in d..c {
            // remaining rows point to mixtures, never dominating a basis direction
            table.row_mut(j).iter_mut().for_each(|v| *v = 0.1);
        }
        *p.get_mut(names::EMBED).unwrap() = table.clone();
        *p.get_mut(names::MM_HEAD).unwrap() = table.clone();
        *p.get_mut(names::VM_HEAD).unwrap() = table.clone();
        for head in [mm_head as fn(&mut Graph, &Binding, Var) -> Result<Var>, vm_head] {
            let logits = eval_frozen(&p, |g, b| {
                let e = embed_text(g, b, &(0..d).collect::<Vec<_>>())?;
                head(g, b, e)
            })
            .unwrap();
            for j in 0..d {
                // brute-force argmax over all C logits
                let row = logits.row(j);
                let mut best = 0;
                for i in 0..c {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                assert_eq!(best, j);
            }
        }
    }
}
