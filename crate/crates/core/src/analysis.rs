//! Interpretability probes over a trained model: which vocabulary entries
//! each image patch sits closest to, and pseudo image features built from
//! visual tokens.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{self, names, Binding, ModelConfig, ParamSet, PatchGrid};
use crate::objectives;
use crate::tensor::{Scalar, Tensor};

fn norm(v: &[Scalar]) -> Scalar {
    v.iter().map(|x| x * x).sum::<Scalar>().sqrt()
}

pub fn cosine(a: &[Scalar], b: &[Scalar]) -> Scalar {
    let dot: Scalar = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

/// Id of the embedding row with the highest cosine similarity to `x`.
/// Ties resolve to the smallest id.
pub fn nearest_token(x: &[Scalar], embeddings: &Tensor) -> Result<TokenId> {
    Ok(nearest_token_with_score(x, embeddings)?.0)
}

fn nearest_token_with_score(x: &[Scalar], embeddings: &Tensor) -> Result<(TokenId, Scalar)> {
    if embeddings.rank() != 2 || embeddings.cols() != x.len() {
        return Err(Error::shape("nearest_token", &[x.len()], embeddings.shape()));
    }
    if norm(x) == 0.0 {
        return Err(Error::Degenerate("nearest_token: zero query vector".into()));
    }
    let mut sims = Vec::with_capacity(embeddings.rows());
    for j in 0..embeddings.rows() {
        let e = embeddings.row(j);
        if norm(e) == 0.0 {
            return Err(Error::Degenerate(format!("nearest_token: embedding row {j} is zero")));
        }
        sims.push(cosine(x, e));
    }
    let best = model::argmax(&sims);
    Ok((best, sims[best]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMapSource {
    NearestCosine,
    TopVisualToken,
}

/// One token per patch, laid out like the patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMap {
    pub source: TokenMapSource,
    pub grid: Vec<Vec<TokenId>>,
    pub tokens: Vec<Vec<String>>,
    /// Visual-token probability of the chosen id at each cell.
    pub probs: Vec<Vec<Scalar>>,
    /// Cosine similarity of each cell to its chosen embedding (nearest mode only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub similarity: Option<Vec<Vec<Scalar>>>,
}

impl TokenMap {
    pub fn rows(&self) -> usize {
        self.grid.len()
    }

    pub fn cols(&self) -> usize {
        self.grid.first().map_or(0, Vec::len)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("token maps serialize")
    }
}

fn grid_of<T: Clone>(cfg: &ModelConfig, flat: &[T]) -> Vec<Vec<T>> {
    flat.chunks(cfg.image.grid_cols).map(<[T]>::to_vec).collect()
}

struct ImageProbe {
    visual: Tensor,
    visual_probs: Tensor,
}

fn probe(params: &ParamSet, cfg: &ModelConfig, image: &PatchGrid) -> Result<ImageProbe> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let x = objectives::image_embeddings(&mut g, &b, cfg, &[image])?;
    let logits = model::vm_head(&mut g, &b, x)?;
    let p = g.softmax(logits)?;
    Ok(ImageProbe {
        visual: g.value(x).clone(),
        visual_probs: g.value(p).clone(),
    })
}

/// Nearest embedding-table token (by cosine) for each adapter output.
pub fn token_map_nearest(
    params: &ParamSet,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    image: &PatchGrid,
) -> Result<TokenMap> {
    let pr = probe(params, cfg, image)?;
    let table = params.get(names::EMBED)?;
    let mut ids = Vec::new();
    let mut sims = Vec::new();
    let mut probs = Vec::new();
    for r in 0..pr.visual.rows() {
        let (id, s) = nearest_token_with_score(pr.visual.row(r), table)?;
        ids.push(id);
        sims.push(s);
        probs.push(pr.visual_probs.row(r)[id]);
    }
    finish(cfg, vocab, TokenMapSource::NearestCosine, &ids, &probs, Some(&sims))
}

/// Highest-probability token of each patch's visual-token distribution.
pub fn token_map_top(params: &ParamSet, cfg: &ModelConfig, vocab: &Vocabulary, image: &PatchGrid) -> Result<TokenMap> {
    let pr = probe(params, cfg, image)?;
    let mut ids = Vec::new();
    let mut probs = Vec::new();
    for r in 0..pr.visual_probs.rows() {
        let row = pr.visual_probs.row(r);
        let id = model::argmax(row);
        ids.push(id);
        probs.push(row[id]);
    }
    finish(cfg, vocab, TokenMapSource::TopVisualToken, &ids, &probs, None)
}

fn finish(
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    source: TokenMapSource,
    ids: &[TokenId],
    probs: &[Scalar],
    sims: Option<&[Scalar]>,
) -> Result<TokenMap> {
    let tokens = ids
        .iter()
        .map(|&id| vocab.token(id).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenMap {
        source,
        grid: grid_of(cfg, ids),
        tokens: grid_of(cfg, &tokens),
        probs: grid_of(cfg, probs),
        similarity: sims.map(|s| grid_of(cfg, s)),
    })
}

/// Graph form of the pseudo features: `softmax(W_VM · x)` mixed over the
/// embedding table, for visual embeddings `visual` (`[n × d]`).
pub fn pseudo_features_from(g: &mut Graph, b: &Binding, visual: Var) -> Result<Var> {
    let logits = model::vm_head(g, b, visual)?;
    let p = g.softmax(logits)?;
    g.matmul(p, b.var(names::EMBED)?)
}

/// Pseudo image features `[P × d]` for one image: each row is a convex
/// combination of embedding-table rows weighted by the patch's visual token.
pub fn pseudo_image_features(params: &ParamSet, cfg: &ModelConfig, image: &PatchGrid) -> Result<Tensor> {
    model::eval_frozen(params, |g, b| {
        let x = objectives::image_embeddings(g, b, cfg, &[image])?;
        pseudo_features_from(g, b, x)
    })
}
