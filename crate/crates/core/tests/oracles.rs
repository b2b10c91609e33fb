//! Independent reference implementations checked against the library.

#![allow(clippy::needless_range_loop)]

use indexmap::IndexMap;
use mmar_core::autograd::Graph;
use mmar_core::data::{ImageSpec, BOS};
use mmar_core::model::{self, names, ModelConfig, ParamSet, PatchGrid};
use mmar_core::objectives::{self, Example};
use mmar_core::train::{AdamW, AdamWConfig};
use mmar_core::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (m, k, n) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7));
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        let bt = Tensor::new(
            vec![n, k],
            (0..n)
                .flat_map(|j| (0..k).map(move |p| (j, p)))
                .map(|(j, p)| b.data()[p * n + j])
                .collect(),
        )
        .unwrap();
        let vbt = g.constant(bt);
        let c_nt = g.matmul_nt(va, vbt).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                assert!((g.value(c).data()[i * n + j] - s).abs() < 1e-12);
                assert!((g.value(c_nt).data()[i * n + j] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gelu_gradient_matches_finite_difference() {
    for &x in &[-3.0, -1.2, -0.3, 0.0, 0.4, 1.7, 3.5] {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::from_vec(vec![x]), true);
        let y = g.gelu(v);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let analytic = g.grad(v).unwrap().data()[0];
        let f = |x: Scalar| {
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() as Scalar * (x + 0.044715 * x.powi(3))).tanh())
        };
        let h = 1e-5;
        let numeric = (f(x + h) - f(x - h)) / (2.0 * h);
        assert!((analytic - numeric).abs() < 1e-8, "x={x}: {analytic} vs {numeric}");
    }
}

// ---- straight-line forward of the micro model ----

fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cols, x.len());
    (0..rows)
        .map(|r| (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum())
        .collect()
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[i] + beta[i])
        .collect()
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 3,
        model_dim: 4,
        layers: 1,
        heads: 2,
        max_seq_len: 4,
        image: ImageSpec {
            grid_rows: 1,
            grid_cols: 1,
            patch_size: 2,
            channels: 3,
        },
        visual_dim: 3,
        adapter_hidden: 5,
        mlp_hidden: 6,
        init_std: 0.5,
    }
}

fn randomized(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::init(cfg, &mut rng).unwrap();
    for (_, param) in p.iter_mut() {
        for v in param.tensor.data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    p
}

/// `log Q` for the sequence `[BOS][patch]` written out by hand.
fn oracle_log_q(p: &ParamSet, patch: &[f64]) -> Vec<Vec<f64>> {
    let t = |n: &str| p.get(n).unwrap();
    let v = |n: &str| t(n).data().to_vec();
    let l = |s: &str| names::layer(0, s);

    let feat = plus(
        &plus(&mat_vec(t(names::ENC_PROJ_W), patch), &v(names::ENC_PROJ_B)),
        &v(names::ENC_POS),
    );
    let hidden: Vec<f64> = plus(&mat_vec(t(names::AD_FC1_W), &feat), &v(names::AD_FC1_B))
        .into_iter()
        .map(gelu)
        .collect();
    let x_img = plus(&mat_vec(t(names::AD_FC2_W), &hidden), &v(names::AD_FC2_B));
    let d = 4;
    let embed = t(names::EMBED);
    let bos = embed.row(BOS).to_vec();
    let pos = t(names::DEC_POS);
    let mut x = [plus(&bos, pos.row(0)), plus(&x_img, pos.row(1))];

    // attention, two heads of width 2
    let a: Vec<Vec<f64>> = x
        .iter()
        .map(|r| layer_norm(r, &v(&l("ln1.gamma")), &v(&l("ln1.beta"))))
        .collect();
    let proj = |w: &str, bias: &str| -> Vec<Vec<f64>> {
        a.iter().map(|r| plus(&mat_vec(t(&l(w)), r), &v(&l(bias)))).collect()
    };
    let (q, k, vv) = (
        proj("attn.wq", "attn.bq"),
        proj("attn.wk", "attn.bk"),
        proj("attn.wv", "attn.bv"),
    );
    let mut att = vec![vec![0.0; d]; 2];
    for h in 0..2 {
        let sl = h * 2..h * 2 + 2;
        for i in 0..2 {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    q[i][sl.clone()]
                        .iter()
                        .zip(&k[j][sl.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / 2f64.sqrt()
                })
                .collect();
            let probs: Vec<f64> = log_softmax(&scores).into_iter().map(f64::exp).collect();
            for (j, pj) in probs.iter().enumerate() {
                for c in sl.clone() {
                    att[i][c] += pj * vv[j][c];
                }
            }
        }
    }
    for i in 0..2 {
        let o = plus(&mat_vec(t(&l("attn.wo")), &att[i]), &v(&l("attn.bo")));
        x[i] = plus(&x[i], &o);
        let m = layer_norm(&x[i], &v(&l("ln2.gamma")), &v(&l("ln2.beta")));
        let m: Vec<f64> = plus(&mat_vec(t(&l("mlp.fc1.weight")), &m), &v(&l("mlp.fc1.bias")))
            .into_iter()
            .map(gelu)
            .collect();
        let m = plus(&mat_vec(t(&l("mlp.fc2.weight")), &m), &v(&l("mlp.fc2.bias")));
        x[i] = plus(&x[i], &m);
    }
    x.iter()
        .map(|r| {
            let h = layer_norm(r, &v(names::LN_F_G), &v(names::LN_F_B));
            log_softmax(&mat_vec(t(names::MM_HEAD), &h))
        })
        .collect()
}

/// Largest deviation between the library forward and the hand-written one over a few random models.
pub fn compute_q_max_error() -> f64 {
    let cfg = micro_config();
    cfg.validate().unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let params = randomized(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let patch: Vec<f64> = (0..cfg.image.patch_dim()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let grid =
            PatchGrid::from_tensor(&cfg.image, Tensor::new(vec![1, patch.len()], patch.clone()).unwrap()).unwrap();
        let got = model::eval_frozen(&params, |g, b| {
            let ex = [Example {
                image: &grid,
                instruction: &[],
                response: &[],
            }];
            let input = objectives::assemble_input(g, b, &cfg, &ex, None)?;
            assert_eq!(input.batch.seq_len, 2);
            objectives::compute_q(g, b, &cfg, &input)
        })
        .unwrap();
        assert_eq!(got.shape(), &[2, 3]);
        let want = oracle_log_q(&params, &patch);
        for i in 0..2 {
            for c in 0..3 {
                worst = worst.max((got.row(i)[c] - want[i][c]).abs());
            }
        }
    }
    worst
}

#[test]
fn compute_q_matches_straight_line_forward() {
    let err = compute_q_max_error();
    assert!(err < 1e-6, "max error {err:e}");
}

#[test]
fn visual_tokens_match_direct_log_softmax() {
    // P = 2 patches, C = 4 tokens
    let cfg = ModelConfig {
        vocab_size: 4,
        image: ImageSpec {
            grid_rows: 1,
            grid_cols: 2,
            patch_size: 2,
            channels: 3,
        },
        ..micro_config()
    };
    let params = randomized(&cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pixels: Vec<u8> = (0..cfg.image.num_values()).map(|_| rng.gen()).collect();
    let grid = PatchGrid::from_pixels(&cfg.image, &pixels).unwrap();
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let ex = [Example {
        image: &grid,
        instruction: &[],
        response: &[],
    }];
    let input = objectives::assemble_input(&mut g, &b, &cfg, &ex, None).unwrap();
    let log_p = objectives::visual_tokens(&mut g, &b, &input).unwrap();
    let x = g.value(input.image_embeddings).clone();
    let w = params.get(names::VM_HEAD).unwrap();
    assert_eq!(g.shape(log_p), &[2, 4]);
    for p in 0..2 {
        let want = log_softmax(&mat_vec(w, x.row(p)));
        for c in 0..4 {
            assert!((g.value(log_p).row(p)[c] - want[c]).abs() < 1e-12);
        }
    }
}

/// Largest parameter deviation from a direct Adam over 10 steps of a quadratic.
pub fn adamw_max_error() -> f64 {
    let target = [0.3, -1.2, 2.0];
    let mut params = ParamSet::new();
    params
        .insert(
            "theta",
            mmar_core::model::ParamGroup::Adapter,
            Tensor::from_vec(vec![1.0, 0.5, -0.25]),
        )
        .unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    let mut theta = [1.0f64, 0.5, -0.25];
    let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
    let mut worst: f64 = 0.0;
    for t in 1..=10 {
        let grad: Vec<f64> = theta.iter().zip(&target).map(|(x, y)| 2.0 * (x - y)).collect();
        let grads = IndexMap::from([("theta".to_string(), Tensor::from_vec(grad.clone()))]);
        opt.step(&mut params, &grads, lr, 0.0).unwrap();
        for i in 0..3 {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            theta[i] -= lr * mh / (vh.sqrt() + eps);
            worst = worst.max((params.get("theta").unwrap().data()[i] - theta[i]).abs());
        }
    }
    worst
}

#[test]
fn adamw_matches_direct_adam() {
    let err = adamw_max_error();
    assert!(err < 1e-10, "max error {err:e}");
}

fn random_dist(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

#[test]
fn kl_losses_match_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (np, c, nb) = (3, 5, 2);
    let seqs: Vec<_> = (0..nb)
        .map(|_| objectives::MultiModalSequence::layout(np, &[], &[]))
        .collect();
    let batch = objectives::SequenceBatch::new(seqs).unwrap();
    let q_rows: Vec<Vec<f64>> = (0..nb * batch.seq_len).map(|_| random_dist(&mut rng, c)).collect();
    let p_rows: Vec<Vec<f64>> = (0..nb * np).map(|_| random_dist(&mut rng, c)).collect();
    let to_log = |rows: &[Vec<f64>]| {
        Tensor::from_rows(
            &rows
                .iter()
                .map(|r| r.iter().map(|x| x.ln()).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap()
    };

    let mut fwd = 0.0;
    let mut rev = 0.0;
    for b in 0..nb {
        let (mut sf, mut sr) = (0.0, 0.0);
        for p in 1..=np {
            let q = &q_rows[b * batch.seq_len + p - 1];
            let pp = &p_rows[b * np + p - 1];
            sf += kl(pp, q);
            sr += kl(q, pp);
        }
        fwd += sf / np as f64;
        rev += sr / np as f64;
    }
    fwd /= nb as f64;
    rev /= nb as f64;

    let mut g = Graph::new();
    let q = g.leaf(to_log(&q_rows), true);
    let p = g.leaf(to_log(&p_rows), true);
    let lf = objectives::loss_vm(&mut g, &batch, q, p).unwrap();
    let lr = objectives::loss_vm_stage3(&mut g, &batch, q, p).unwrap();
    assert!((g.value(lf).item().unwrap() - fwd).abs() < 1e-9);
    assert!((g.value(lr).item().unwrap() - rev).abs() < 1e-9);

    // the label side never receives gradient
    g.backward(lf).unwrap();
    assert!(g.grad(p).unwrap().data().iter().all(|&x| x == 0.0));
    g.backward(lr).unwrap();
    assert!(g.grad(q).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn decoder_jacobian_is_lower_triangular() {
    let cfg = ModelConfig {
        max_seq_len: 6,
        ..micro_config()
    };
    let params = randomized(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let len = 5;
    let x0 = rand_tensor(&mut rng, &[len, cfg.model_dim]);
    for i in 0..len {
        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false);
        let x = g.leaf(x0.clone(), true);
        let h = model::decode(&mut g, &b, &cfg, x, len).unwrap();
        let row = g.select_rows(h, &[i]).unwrap();
        let s = g.sum(row);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        for j in 0..len {
            let nz = grad.row(j).iter().any(|&v| v != 0.0);
            assert_eq!(nz, j <= i, "output {i}, input {j}");
        }
    }
}

#[test]
fn assembled_input_rows_come_from_the_right_sources() {
    let cfg = micro_config();
    let params = randomized(&cfg, 2);
    let grid = PatchGrid::from_pixels(&cfg.image, &[7; 12]).unwrap();
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let ex = [Example {
        image: &grid,
        instruction: &[],
        response: &[2],
    }];
    let input = objectives::assemble_input(&mut g, &b, &cfg, &ex, None).unwrap();
    let x = g.value(input.embeddings);
    let e = params.get(names::EMBED).unwrap();
    assert_eq!(x.row(0), e.row(BOS));
    assert_eq!(x.row(1), g.value(input.image_embeddings).row(0));
    assert_eq!(x.row(2), e.row(2));
}
