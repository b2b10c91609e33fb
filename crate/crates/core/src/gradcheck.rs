//! Finite-difference verification of the autodiff engine.
//!
//! Every op is checked on random shapes through the scalar probe
//! `Σ out ⊙ R` for a fixed random `R`. The whole `loss_mm` graph is checked
//! on a sample of model parameters, and the two KL objectives are checked
//! for gradient leaks into the network that produces their labels.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::data::{generate_samples, TaskMix, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ParamGroup, ParamSet, PatchGrid};
use crate::objectives::{self, Example};
use crate::tensor::{Scalar, Tensor};

#[cfg(not(feature = "f32"))]
mod precision {
    pub const STEP: f64 = 1e-3;
    pub const TOLERANCE: f64 = 1e-5;
    pub const FLOOR: f64 = 1e-6;
}

#[cfg(feature = "f32")]
mod precision {
    pub const STEP: f64 = 1e-2;
    pub const TOLERANCE: f64 = 1e-3;
    pub const FLOOR: f64 = 1e-3;
}

pub use precision::TOLERANCE;

/// Bound on gradients that must vanish because their path is detached.
pub const DETACH_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    /// Worst relative error (gradient checks) or worst |gradient| (detachment checks).
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub ops: Vec<CheckResult>,
    pub model: Vec<CheckResult>,
    pub detachment: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all(&self) -> impl Iterator<Item = &CheckResult> {
        self.ops.iter().chain(&self.model).chain(&self.detachment)
    }

    pub fn passed(&self) -> bool {
        self.all().all(|c| c.passed)
    }

    pub fn model_params_checked(&self) -> usize {
        self.model.iter().map(|c| c.checked).sum()
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Shapes tried per op.
    pub trials: usize,
    /// Model parameters sampled for the full-graph check.
    pub model_samples: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            trials: 3,
            model_samples: 1024,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(precision::FLOOR)
}

/// Five-point central difference of `f` along one coordinate.
fn five_point(mut f: impl FnMut(Scalar) -> Result<f64>, x0: Scalar) -> Result<f64> {
    let h = precision::STEP;
    let at = |d: f64| x0 + d as Scalar;
    let (f1, f2) = (f(at(h))?, f(at(2.0 * h))?);
    let (b1, b2) = (f(at(-h))?, f(at(-2.0 * h))?);
    Ok((8.0 * (f1 - b1) - (f2 - b2)) / (12.0 * h))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi) as Scalar).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Compares analytic and numeric gradients of `Σ build(inputs) ⊙ R` for
/// every element of the inputs flagged in `differentiable`.
fn check_op_once(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    differentiable: &[bool],
    build: &Builder<'_>,
) -> Result<(usize, f64)> {
    let probe_of = |g: &mut Graph, out: Var, r: &Tensor| -> Result<Var> {
        let rv = g.constant(r.clone());
        let prod = g.mul(out, rv)?;
        Ok(g.sum(prod))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| g.leaf(t.clone(), d))
        .collect();
    let out = build(&mut g, &vars)?;
    let r = random_tensor(rng, g.shape(out), -1.0, 1.0);
    let loss = probe_of(&mut g, out, &r)?;
    g.backward(loss)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|&v| g.grad(v).cloned()).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = probe_of(&mut g, out, &r)?;
        Ok(g.value(loss).item()? as f64)
    };
    let (mut checked, mut worst) = (0, 0.0f64);
    for (i, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for j in 0..inputs[i].numel() {
            let mut work = inputs.to_vec();
            let numeric = five_point(
                |x| {
                    work[i].data_mut()[j] = x;
                    eval(&work)
                },
                inputs[i].data()[j],
            )?;
            worst = worst.max(relative_error(grad.data()[j] as f64, numeric));
            checked += 1;
        }
    }
    Ok((checked, worst))
}

fn op_result(name: &str, checked: usize, worst: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        checked,
        max_error: worst,
        tolerance: TOLERANCE,
        passed: worst < TOLERANCE && checked > 0,
    }
}

/// Random inputs and a graph builder for one trial of a registered op.
struct OpCase {
    inputs: Vec<Tensor>,
    differentiable: Vec<bool>,
    build: Box<Builder<'static>>,
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

fn case(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    let differentiable = vec![true; inputs.len()];
    OpCase {
        inputs,
        differentiable,
        build: Box::new(build),
    }
}

fn make_case(op: &str, rng: &mut ChaCha8Rng) -> OpCase {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let t = |rng: &mut ChaCha8Rng, shape: &[usize]| random_tensor(rng, shape, -1.5, 1.5);
    match op {
        "matmul" => case(vec![t(rng, &[m, k]), t(rng, &[k, n])], |g, v| g.matmul(v[0], v[1])),
        "matmul_nt" => case(vec![t(rng, &[m, k]), t(rng, &[n, k])], |g, v| g.matmul_nt(v[0], v[1])),
        "add" => case(vec![t(rng, &[m, n]), t(rng, &[m, n])], |g, v| g.add(v[0], v[1])),
        "sub" => case(vec![t(rng, &[m, n]), t(rng, &[m, n])], |g, v| g.sub(v[0], v[1])),
        "mul" => case(vec![t(rng, &[m, n]), t(rng, &[m, n])], |g, v| g.mul(v[0], v[1])),
        "add_bias" => case(vec![t(rng, &[m, n]), t(rng, &[n])], |g, v| g.add_bias(v[0], v[1])),
        "scale" => case(vec![t(rng, &[m, n])], |g, v| Ok(g.scale(v[0], -0.7))),
        "neg" => case(vec![t(rng, &[m, n])], |g, v| Ok(g.neg(v[0]))),
        "exp" => case(vec![t(rng, &[m, n])], |g, v| Ok(g.exp(v[0]))),
        "ln" => {
            let x = random_tensor(rng, &[m, n], 0.3, 2.0);
            case(vec![x], |g, v| g.ln(v[0]))
        }
        "gelu" => case(vec![t(rng, &[m, n])], |g, v| Ok(g.gelu(v[0]))),
        "layer_norm" => {
            let n = n + 1;
            case(vec![t(rng, &[m, n]), t(rng, &[n]), t(rng, &[n])], |g, v| {
                g.layer_norm(v[0], v[1], v[2])
            })
        }
        "softmax" => case(vec![t(rng, &[m, n])], |g, v| g.softmax(v[0])),
        "log_softmax" => case(vec![t(rng, &[m, n])], |g, v| g.log_softmax(v[0])),
        "gather_rows" => {
            let table = t(rng, &[m + 1, n]);
            let ids: Vec<usize> = (0..k + 2).map(|_| rng.gen_range(0..=m)).collect();
            case(vec![table], move |g, v| g.gather_rows(v[0], &ids))
        }
        "select_rows" => {
            let rows: Vec<usize> = (0..k + 1).map(|_| rng.gen_range(0..m)).collect();
            case(vec![t(rng, &[m, n])], move |g, v| g.select_rows(v[0], &rows))
        }
        "concat_rows" => case(vec![t(rng, &[m, n]), t(rng, &[k, n])], |g, v| {
            g.concat_rows(&[v[0], v[1]])
        }),
        "assemble_rows" => {
            let map: Vec<(usize, usize)> = (0..m + k)
                .map(|_| {
                    let s = rng.gen_range(0..2);
                    (s, rng.gen_range(0..if s == 0 { m } else { k }))
                })
                .collect();
            case(vec![t(rng, &[m, n]), t(rng, &[k, n])], move |g, v| {
                g.assemble_rows(&[v[0], v[1]], &map)
            })
        }
        "pick" => {
            let entries: Vec<(usize, usize)> = (0..k + 1).map(|_| (rng.gen_range(0..m), rng.gen_range(0..n))).collect();
            case(vec![t(rng, &[m, n])], move |g, v| g.pick(v[0], &entries))
        }
        "sum" => case(vec![t(rng, &[m, n])], |g, v| Ok(g.sum(v[0]))),
        "mean" => case(vec![t(rng, &[m, n])], |g, v| Ok(g.mean(v[0]))),
        "causal_attention" => {
            let heads = rng.gen_range(1..=2);
            let d = heads * rng.gen_range(1..=3);
            let (batch, len) = (rng.gen_range(1..=2), rng.gen_range(1..=4));
            let shape = [batch * len, d];
            case(vec![t(rng, &shape), t(rng, &shape), t(rng, &shape)], move |g, v| {
                g.causal_attention(v[0], v[1], v[2], heads, len)
            })
        }
        "detach" => {
            // detach must block the gradient: d/dx of Σ (detach(x) ⊙ x) ⊙ R is exactly R ⊙ x
            case(vec![t(rng, &[m, n])], |g, v| {
                let d = g.detach(v[0]);
                g.mul(d, v[0])
            })
        }
        other => unreachable!("no gradcheck case for {other}"),
    }
}

/// Every differentiable op the graph registers.
pub const OPS: [&str; 23] = [
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "neg",
    "exp",
    "ln",
    "gelu",
    "layer_norm",
    "softmax",
    "log_softmax",
    "gather_rows",
    "select_rows",
    "concat_rows",
    "assemble_rows",
    "pick",
    "sum",
    "mean",
    "causal_attention",
    "detach",
];

pub fn check_ops(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for op in OPS {
        let (mut checked, mut worst) = (0, 0.0f64);
        for _ in 0..cfg.trials {
            let c = make_case(op, &mut rng);
            if op == "detach" {
                // the numeric side sees the full product, so compare against
                // the analytic gradient of the detached graph directly
                let (n, w) = check_detach_case(&mut rng, &c)?;
                checked += n;
                worst = worst.max(w);
                continue;
            }
            let (n, w) = check_op_once(&mut rng, &c.inputs, &c.differentiable, &*c.build)?;
            checked += n;
            worst = worst.max(w);
        }
        out.push(op_result(op, checked, worst));
    }
    Ok(out)
}

fn check_detach_case(rng: &mut ChaCha8Rng, c: &OpCase) -> Result<(usize, f64)> {
    let x = &c.inputs[0];
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = (c.build)(&mut g, &[v])?;
    let r = random_tensor(rng, g.shape(out), -1.0, 1.0);
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv)?;
    let loss = g.sum(prod);
    g.backward(loss)?;
    let grad = g.grad(v).expect("leaf requires grad");
    let worst = grad
        .data()
        .iter()
        .zip(r.data().iter().zip(x.data()))
        .map(|(&a, (&ri, &xi))| relative_error(a as f64, (ri * xi) as f64))
        .fold(0.0, f64::max);
    Ok((x.numel(), worst))
}

/// Model and data used for the full-graph checks.
pub struct ModelFixture {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub grids: Vec<PatchGrid>,
    pub instructions: Vec<Vec<usize>>,
    pub responses: Vec<Vec<usize>>,
}

impl ModelFixture {
    pub fn new(seed: u64) -> Result<Self> {
        // larger init than training so activations are far from linear
        let cfg = ModelConfig {
            init_std: 0.2,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::init(&cfg, &mut rng)?;
        for (_, p) in params.iter_mut() {
            // nonzero biases and gains exercise every term of the backward rules
            for v in p.tensor.data_mut() {
                *v += rng.gen_range(-0.1..0.1) as Scalar;
            }
        }
        let vocab = Vocabulary::toy();
        let samples = generate_samples(seed, 2, &cfg.image, &vocab, TaskMix::Instruction)?;
        let grids = samples
            .iter()
            .map(|s| PatchGrid::from_pixels(&cfg.image, &s.pixels))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelFixture {
            cfg,
            params,
            grids,
            instructions: samples.iter().map(|s| s.instruction.clone()).collect(),
            responses: samples.iter().map(|s| s.response.clone()).collect(),
        })
    }

    fn examples(&self, pure_image: bool) -> Vec<Example<'_>> {
        self.grids
            .iter()
            .zip(self.instructions.iter().zip(&self.responses))
            .map(|(image, (i, r))| Example {
                image,
                instruction: if pure_image { &[] } else { i },
                response: if pure_image { &[] } else { r },
            })
            .collect()
    }

    /// `log P'` at the fixture's parameters, the frozen label for `loss_mm`.
    pub fn base_visual_tokens(&self) -> Result<Tensor> {
        model::eval_frozen(&self.params, |g, b| {
            let input = objectives::assemble_input(g, b, &self.cfg, &self.examples(false), None)?;
            objectives::visual_tokens(g, b, &input)
        })
    }

    /// `log Q` on pure-image sequences at the fixture's parameters.
    pub fn base_teacher(&self) -> Result<Tensor> {
        model::eval_frozen(&self.params, |g, b| {
            let input = objectives::assemble_input(g, b, &self.cfg, &self.examples(true), None)?;
            objectives::compute_q(g, b, &self.cfg, &input)
        })
    }
}

/// Which objective a full-graph evaluation builds.
#[derive(Clone, Copy)]
enum Objective<'a> {
    /// `loss_mm` with the visual-token labels fixed to the given tensor
    /// for numeric evaluation.
    Mm(Option<&'a Tensor>),
    /// `loss_vm` with fixed labels for numeric evaluation.
    Vm(Option<&'a Tensor>),
    /// `loss_vm_stage3` with the teacher and visual embeddings fixed for numeric evaluation.
    VmStage3(Option<(&'a Tensor, &'a Tensor)>),
}

/// Builds the objective on `g` and returns the loss node.
fn objective(
    g: &mut Graph,
    params: &ParamSet,
    fx: &ModelFixture,
    which: Objective<'_>,
) -> Result<(Var, model::Binding)> {
    let b = params.bind(g, |_| true);
    let cfg = &fx.cfg;
    let loss = match which {
        Objective::Mm(fixed) | Objective::Vm(fixed) => {
            let input = objectives::assemble_input(g, &b, cfg, &fx.examples(false), None)?;
            let log_q = objectives::compute_q(g, &b, cfg, &input)?;
            let log_p = match fixed {
                Some(t) => g.constant(t.clone()),
                None => objectives::visual_tokens(g, &b, &input)?,
            };
            if matches!(which, Objective::Mm(_)) {
                objectives::loss_mm(g, &input.batch, log_q, log_p)?.total
            } else {
                objectives::loss_vm(g, &input.batch, log_q, log_p)?
            }
        }
        Objective::VmStage3(fixed) => {
            let input = objectives::assemble_input(g, &b, cfg, &fx.examples(true), None)?;
            match fixed {
                Some((teacher, visual)) => {
                    let log_q = g.constant(teacher.clone());
                    let x = g.constant(visual.clone());
                    let logits = model::vm_head(g, &b, x)?;
                    let log_p = g.log_softmax(logits)?;
                    objectives::loss_vm_stage3(g, &input.batch, log_q, log_p)?
                }
                None => {
                    let log_q = objectives::compute_q(g, &b, cfg, &input)?;
                    let log_p = objectives::visual_tokens_detached(g, &b, &input)?;
                    objectives::loss_vm_stage3(g, &input.batch, log_q, log_p)?
                }
            }
        }
    };
    Ok((loss, b))
}

fn loss_value(params: &ParamSet, fx: &ModelFixture, which: Objective<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, _) = objective(&mut g, params, fx, which)?;
    Ok(g.value(loss).item()? as f64)
}

fn analytic_grads(fx: &ModelFixture, which: Objective<'_>) -> Result<Vec<(String, Tensor)>> {
    let mut g = Graph::new();
    let (loss, b) = objective(&mut g, &fx.params, fx, which)?;
    g.backward(loss)?;
    b.iter()
        .map(|(name, v)| {
            let grad = g
                .grad(v)
                .ok_or_else(|| Error::contract(format!("no gradient for {name}")))?;
            Ok((name.to_string(), grad.clone()))
        })
        .collect()
}

fn numeric_grad(fx: &ModelFixture, which: Objective<'_>, name: &str, j: usize) -> Result<f64> {
    let mut params = fx.params.clone();
    let x0 = params.get(name)?.data()[j];
    five_point(
        |x| {
            params.get_mut(name)?.data_mut()[j] = x;
            loss_value(&params, fx, which)
        },
        x0,
    )
}

/// Full `loss_mm` graph against finite differences on a stratified sample
/// of parameters, at least one per tensor.
pub fn check_model(cfg: &GradcheckConfig, fx: &ModelFixture) -> Result<Vec<CheckResult>> {
    let labels = fx.base_visual_tokens()?;
    let analytic = analytic_grads(fx, Objective::Mm(None))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let per_tensor = cfg.model_samples.div_ceil(analytic.len()).max(1);
    let mut out = Vec::new();
    for (name, grad) in &analytic {
        let k = per_tensor.min(grad.numel());
        let mut worst = 0.0f64;
        for j in sample(&mut rng, grad.numel(), k).into_iter() {
            let numeric = numeric_grad(fx, Objective::Mm(Some(&labels)), name, j)?;
            worst = worst.max(relative_error(grad.data()[j] as f64, numeric));
        }
        out.push(op_result(&format!("loss_mm/{name}"), k, worst));
    }
    Ok(out)
}

fn detach_result(name: &str, checked: usize, worst: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        checked,
        max_error: worst,
        tolerance: DETACH_TOLERANCE,
        passed: worst <= DETACH_TOLERANCE,
    }
}

/// Gradients that must vanish: `loss_vm` w.r.t. the VM head, and
/// `loss_vm_stage3` w.r.t. decoder, MM head and adapter. Both the analytic
/// gradient and a finite difference of the label-frozen loss are bounded.
pub fn check_detachment(cfg: &GradcheckConfig, fx: &ModelFixture) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xde7a);
    let labels = fx.base_visual_tokens()?;
    let teacher = fx.base_teacher()?;
    let visual = model::eval_frozen(&fx.params, |g, b| {
        let input = objectives::assemble_input(g, b, &fx.cfg, &fx.examples(true), None)?;
        Ok(input.image_embeddings)
    })?;
    let cases: [(&str, Objective, Objective, &[ParamGroup]); 2] = [
        (
            "loss_vm wrt vm_head",
            Objective::Vm(None),
            Objective::Vm(Some(&labels)),
            &[ParamGroup::VmHead],
        ),
        (
            "loss_vm_stage3 wrt decoder, mm_head, adapter",
            Objective::VmStage3(None),
            Objective::VmStage3(Some((&teacher, &visual))),
            &[ParamGroup::Decoder, ParamGroup::MmHead, ParamGroup::Adapter],
        ),
    ];
    let mut out = Vec::new();
    for (label, live, frozen, groups) in cases {
        let analytic = analytic_grads(fx, live)?;
        let (mut checked, mut worst) = (0, 0.0f64);
        for (name, grad) in &analytic {
            if !groups.contains(&fx.params.param(name)?.group) {
                continue;
            }
            let biggest = grad.data().iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
            worst = worst.max(biggest);
            checked += grad.numel();
            for j in sample(&mut rng, grad.numel(), 2.min(grad.numel())).into_iter() {
                worst = worst.max(numeric_grad(fx, frozen, name, j)?.abs());
            }
        }
        out.push(detach_result(label, checked, worst));
    }
    Ok(out)
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let fx = ModelFixture::new(cfg.seed)?;
    Ok(GradcheckReport {
        ops: check_ops(cfg)?,
        model: check_model(cfg, &fx)?,
        detachment: check_detachment(cfg, &fx)?,
    })
}
