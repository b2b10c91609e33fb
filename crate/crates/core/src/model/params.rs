//! Named, grouped model parameters.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::Distribution;

use super::config::ModelConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// The five trainable components. Every parameter belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    VisualEncoder,
    Adapter,
    /// Transformer blocks plus the token and position embedding tables.
    Decoder,
    MmHead,
    VmHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::VisualEncoder,
        ParamGroup::Adapter,
        ParamGroup::Decoder,
        ParamGroup::MmHead,
        ParamGroup::VmHead,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter group tag {tag}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::VisualEncoder => "visual_encoder",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Decoder => "decoder",
            ParamGroup::MmHead => "mm_head",
            ParamGroup::VmHead => "vm_head",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub group: ParamGroup,
    pub tensor: Tensor,
}

pub mod names {
    pub const ENC_PROJ_W: &str = "encoder.patch_proj.weight";
    pub const ENC_PROJ_B: &str = "encoder.patch_proj.bias";
    pub const ENC_POS: &str = "encoder.pos";
    pub const AD_FC1_W: &str = "adapter.fc1.weight";
    pub const AD_FC1_B: &str = "adapter.fc1.bias";
    pub const AD_FC2_W: &str = "adapter.fc2.weight";
    pub const AD_FC2_B: &str = "adapter.fc2.bias";
    pub const EMBED: &str = "decoder.embed";
    pub const DEC_POS: &str = "decoder.pos";
    pub const LN_F_G: &str = "decoder.ln_f.gamma";
    pub const LN_F_B: &str = "decoder.ln_f.beta";
    pub const MM_HEAD: &str = "mm_head.weight";
    pub const VM_HEAD: &str = "vm_head.weight";

    pub fn layer(l: usize, suffix: &str) -> String {
        format!("decoder.layers.{l}.{suffix}")
    }
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Ordered map from parameter name to grouped tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Fresh parameters: truncated normal for weights, zeros for biases and
    /// the decoder position table, ones for layer-norm gains. The frozen
    /// encoder's position table is drawn like a weight.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        use names::*;
        use Init::*;
        use ParamGroup::*;
        cfg.validate()?;
        let (c, d) = (cfg.vocab_size, cfg.model_dim);
        let (dv, pd, np) = (cfg.visual_dim, cfg.image.patch_dim(), cfg.num_patches());
        let mut specs: Vec<(String, ParamGroup, Vec<usize>, Init)> = vec![
            (ENC_PROJ_W.into(), VisualEncoder, vec![dv, pd], Normal),
            (ENC_PROJ_B.into(), VisualEncoder, vec![dv], Zeros),
            (ENC_POS.into(), VisualEncoder, vec![np, dv], Normal),
            (AD_FC1_W.into(), Adapter, vec![cfg.adapter_hidden, dv], Normal),
            (AD_FC1_B.into(), Adapter, vec![cfg.adapter_hidden], Zeros),
            (AD_FC2_W.into(), Adapter, vec![d, cfg.adapter_hidden], Normal),
            (AD_FC2_B.into(), Adapter, vec![d], Zeros),
            (EMBED.into(), Decoder, vec![c, d], Normal),
            (DEC_POS.into(), Decoder, vec![cfg.max_seq_len, d], Zeros),
        ];
        for l in 0..cfg.layers {
            let h = cfg.mlp_hidden;
            for (suffix, shape, init) in [
                ("ln1.gamma", vec![d], Ones),
                ("ln1.beta", vec![d], Zeros),
                ("attn.wq", vec![d, d], Normal),
                ("attn.bq", vec![d], Zeros),
                ("attn.wk", vec![d, d], Normal),
                ("attn.bk", vec![d], Zeros),
                ("attn.wv", vec![d, d], Normal),
                ("attn.bv", vec![d], Zeros),
                ("attn.wo", vec![d, d], Normal),
                ("attn.bo", vec![d], Zeros),
                ("ln2.gamma", vec![d], Ones),
                ("ln2.beta", vec![d], Zeros),
                ("mlp.fc1.weight", vec![h, d], Normal),
                ("mlp.fc1.bias", vec![h], Zeros),
                ("mlp.fc2.weight", vec![d, h], Normal),
                ("mlp.fc2.bias", vec![d], Zeros),
            ] {
                specs.push((layer(l, suffix), Decoder, shape, init));
            }
        }
        specs.push((LN_F_G.into(), Decoder, vec![d], Ones));
        specs.push((LN_F_B.into(), Decoder, vec![d], Zeros));
        specs.push((MM_HEAD.into(), MmHead, vec![c, d], Normal));
        specs.push((VM_HEAD.into(), VmHead, vec![c, d], Normal));

        let normal = rand_distr::Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let bound = 2.0 * cfg.init_std;
        let mut set = ParamSet::new();
        for (name, group, shape, init) in specs {
            let numel: usize = shape.iter().product();
            let data: Vec<Scalar> = match init {
                Zeros => vec![0.0; numel],
                Ones => vec![1.0; numel],
                Normal => (0..numel)
                    .map(|_| loop {
                        let x: f64 = normal.sample(rng);
                        if x.abs() <= bound {
                            break x as Scalar;
                        }
                    })
                    .collect(),
            };
            set.insert(&name, group, Tensor::new(shape, data)?)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.params.insert(name.to_string(), Param { group, tensor });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.param(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_in(&self, group: ParamGroup) -> Vec<&str> {
        self.iter().filter(|(_, p)| p.group == group).map(|(n, _)| n).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Copies every parameter into `g` as a leaf; leaves require gradients
    /// exactly when `trainable` accepts their group.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamGroup) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), g.leaf(p.tensor.clone(), trainable(p.group))))
            .collect();
        Binding { vars }
    }

    /// Bit-exact equality of every parameter in `group`.
    pub fn group_eq(&self, other: &ParamSet, group: ParamGroup) -> bool {
        let mine: Vec<_> = self.iter().filter(|(_, p)| p.group == group).collect();
        let theirs: Vec<_> = other.iter().filter(|(_, p)| p.group == group).collect();
        mine.len() == theirs.len()
            && mine.iter().zip(&theirs).all(|((na, a), (nb, b))| {
                na == nb
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Graph leaves for a [`ParamSet`], looked up by parameter name.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn groups_partition_the_parameters() {
        let cfg = ModelConfig::default();
        let p = ParamSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut seen = HashSet::new();
        for g in ParamGroup::ALL {
            for n in p.names_in(g) {
                assert!(seen.insert(n.to_string()), "{n} in two groups");
            }
        }
        assert_eq!(seen.len(), p.len());
    }

    #[test]
    fn head_and_embedding_shapes() {
        let cfg = ModelConfig::default();
        let p = ParamSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for n in [names::EMBED, names::MM_HEAD, names::VM_HEAD] {
            assert_eq!(p.get(n).unwrap().shape(), &[64, 64]);
        }
        assert_eq!(p.param(names::EMBED).unwrap().group, ParamGroup::Decoder);
    }

    #[test]
    fn init_is_truncated_and_seeded() {
        let cfg = ModelConfig::default();
        let a = ParamSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = ParamSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let w = a.get(names::MM_HEAD).unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
        assert!(a.get(names::DEC_POS).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_tags_round_trip() {
        for g in ParamGroup::ALL {
            assert_eq!(ParamGroup::from_tag(g.tag()).unwrap(), g);
            assert_eq!(g.name().parse::<ParamGroup>().unwrap(), g);
        }
        assert!(ParamGroup::from_tag(9).is_err());
    }
}
