//! Shared helpers for the integration tests: brute-force oracles, layer
//! fixtures and the checks behind each acceptance criterion.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use tokenlearner::data::{generate, Dataset, SyntheticTaskSpec};
use tokenlearner::gradcheck::{check, check_params, project};
use tokenlearner::model::build_model;
use tokenlearner::nn::{mhsa_forward, DenseLayer, MhsaLayer, ParamStore};
use tokenlearner::tokenfuser::{fuse_remap, tokenwise_mix};
use tokenlearner::tokenlearner::{learn_tokens, learn_tokens_video, weight_maps};
use tokenlearner::train::{train, train_config, TrainConfig};
use tokenlearner::vector_attention::vector_attention;
use tokenlearner::{
    count_flops, placement_sweep, Graph, ModelConfig, Tensor, TokenFuserLayer, TokenLearnerLayer,
    TokenLearnerVariant, VectorAttentionLayer,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Adds `N(0, std²)` noise to every parameter so that biases and the
/// identity part of the mixing matrix are exercised too.
pub fn jitter(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let noise = Tensor::randn(shape, std, rng);
        for (v, n) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

// ---------------------------------------------------------------- oracles

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub type Rows = Vec<Vec<f64>>;

/// Rows of the last axis.
pub fn rows(t: &Tensor) -> Rows {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn max_diff(a: &Tensor, b: &Rows) -> f64 {
    let flat: Vec<f64> = b.iter().flatten().copied().collect();
    assert_eq!(a.numel(), flat.len(), "element count");
    a.data()
        .iter()
        .zip(&flat)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn dense(x: &Rows, layer: &DenseLayer, store: &ParamStore) -> Rows {
    let w = store.get(layer.weight);
    let b = store.get(layer.bias);
    x.iter()
        .map(|row| {
            (0..layer.out_dim)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for (i, xi) in row.iter().enumerate() {
                        acc += xi * w.at(&[i, o]);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn map_rows(x: Rows, f: fn(f64) -> f64) -> Rows {
    x.into_iter().map(|r| r.into_iter().map(f).collect()).collect()
}

/// Same-padded 3×3 convolution of `pixels × cin` rows on an `h × w` grid.
pub fn conv3x3(x: &Rows, h: usize, w: usize, kernel: &Tensor, bias: &Tensor) -> Rows {
    let cout = kernel.shape()[3];
    let mut out = vec![vec![0.0; cout]; h * w];
    for y in 0..h {
        for xx in 0..w {
            for (o, slot) in out[y * w + xx].iter_mut().enumerate() {
                let mut acc = bias.data()[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = xx as isize + kx as isize - 1;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let pix = &x[sy as usize * w + sx as usize];
                        for (ci, v) in pix.iter().enumerate() {
                            acc += v * kernel.at(&[ky, kx, ci, o]);
                        }
                    }
                }
                *slot = acc;
            }
        }
    }
    out
}

/// Weight maps `pixels × S` of a TokenLearner on an `[H, W, C]` frame.
pub fn weight_maps_oracle(x: &Tensor, layer: &TokenLearnerLayer, store: &ParamStore) -> Rows {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let mut a = rows(x);
    let logits = match layer.variant {
        TokenLearnerVariant::Conv4 => {
            let (kernels, biases) = layer.conv_params().unwrap();
            for i in 0..4 {
                a = conv3x3(&a, h, w, store.get(kernels[i]), store.get(biases[i]));
                if i < 3 {
                    a = map_rows(a, gelu);
                }
            }
            a
        }
        TokenLearnerVariant::Mlp => {
            let mlp = layer.mlp_params().unwrap();
            let hidden = map_rows(dense(&a, &mlp.fc1, store), gelu);
            dense(&hidden, &mlp.fc2, store)
        }
    };
    map_rows(logits, sigmoid)
}

/// `z_i = mean_p w_i(p) · x(p)`.
pub fn learn_tokens_oracle(x: &Tensor, layer: &TokenLearnerLayer, store: &ParamStore) -> Rows {
    let maps = weight_maps_oracle(x, layer, store);
    let xr = rows(x);
    let c = x.shape()[2];
    let pixels = xr.len() as f64;
    (0..layer.tokens)
        .map(|i| {
            (0..c)
                .map(|ch| xr.iter().zip(&maps).map(|(px, m)| m[i] * px[ch]).sum::<f64>() / pixels)
                .collect()
        })
        .collect()
}

/// `out[i][c] = Σ_j M[j][i] · y[j][c]`.
pub fn tokenwise_mix_oracle(y: &Tensor, fuser: &TokenFuserLayer, store: &ParamStore) -> Rows {
    let m = store.get(fuser.mix);
    let yr = rows(y);
    let n = yr.len();
    (0..n)
        .map(|i| {
            (0..fuser.channels)
                .map(|c| (0..n).map(|j| m.at(&[j, i]) * yr[j][c]).sum())
                .collect()
        })
        .collect()
}

/// `out[p] = Σ_s sigmoid(β(x[p]))_s · y[s] + x[p]`.
pub fn fuse_remap_oracle(y: &Tensor, x: &Tensor, fuser: &TokenFuserLayer, store: &ParamStore) -> Rows {
    let xr = rows(x);
    let yr = rows(y);
    let bw = map_rows(dense(&xr, &fuser.beta, store), sigmoid);
    xr.iter()
        .zip(&bw)
        .map(|(px, b)| {
            (0..px.len())
                .map(|c| px[c] + (0..yr.len()).map(|s| b[s] * yr[s][c]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Per-channel pairwise attention weights `a[i][j][c]`.
pub fn vector_attention_weights(z: &Tensor, layer: &VectorAttentionLayer, store: &ParamStore) -> Vec<Rows> {
    let zr = rows(z);
    let q = dense(&zr, &layer.fq, store);
    let k = dense(&zr, &layer.fk, store);
    let n = zr.len();
    let c = layer.width;
    let mut logits = vec![vec![vec![0.0; c]; n]; n];
    for i in 0..n {
        for j in 0..n {
            let prod: Vec<f64> = (0..layer.inner).map(|d| q[i][d] * k[j][d]).collect();
            logits[i][j] = match &layer.proj {
                Some(p) => dense(&vec![prod], p, store).remove(0),
                None => prod,
            };
        }
    }
    let mut a = vec![vec![vec![0.0; c]; n]; n];
    for i in 0..n {
        for ch in 0..c {
            let col: Vec<f64> = (0..n).map(|j| logits[i][j][ch]).collect();
            for (j, v) in softmax(&col).into_iter().enumerate() {
                a[i][j][ch] = v;
            }
        }
    }
    a
}

pub fn vector_attention_oracle(z: &Tensor, layer: &VectorAttentionLayer, store: &ParamStore) -> Rows {
    let v = dense(&rows(z), &layer.fv, store);
    let a = vector_attention_weights(z, layer, store);
    let n = v.len();
    (0..n)
        .map(|i| {
            (0..layer.width)
                .map(|c| (0..n).map(|j| a[i][j][c] * v[j][c]).sum())
                .collect()
        })
        .collect()
}

pub fn mhsa_oracle(z: &Tensor, layer: &MhsaLayer, store: &ParamStore) -> Rows {
    let zr = rows(z);
    let q = dense(&zr, &layer.wq, store);
    let k = dense(&zr, &layer.wk, store);
    let v = dense(&zr, &layer.wv, store);
    let n = zr.len();
    let hd = layer.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut cat = vec![vec![0.0; layer.heads * hd]; n];
    for h in 0..layer.heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() * scale)
                .collect();
            let a = softmax(&logits);
            for d in cols.clone() {
                cat[i][d] = (0..n).map(|j| a[j] * v[j][d]).sum();
            }
        }
    }
    dense(&cat, &layer.wo, store)
}

// ---------------------------------------------------------------- fixtures

pub fn tl_fixture(variant: TokenLearnerVariant, tokens: usize, channels: usize, seed: u64) -> (ParamStore, TokenLearnerLayer) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let layer = TokenLearnerLayer::new(&mut store, "tl", variant, tokens, channels, &mut r);
    jitter(&mut store, 0.5, &mut r);
    (store, layer)
}

pub fn fuser_fixture(tokens: usize, frames: usize, channels: usize, seed: u64) -> (ParamStore, TokenFuserLayer) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let layer = TokenFuserLayer::new(&mut store, "tf", tokens, frames, channels, &mut r);
    jitter(&mut store, 0.5, &mut r);
    (store, layer)
}

pub fn vattn_fixture(width: usize, inner: usize, seed: u64) -> (ParamStore, VectorAttentionLayer) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let layer = VectorAttentionLayer::new(&mut store, "va", width, inner, &mut r);
    jitter(&mut store, 0.5, &mut r);
    (store, layer)
}

pub fn mhsa_fixture(width: usize, heads: usize, seed: u64) -> (ParamStore, MhsaLayer) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let layer = MhsaLayer::new(&mut store, "mhsa", width, heads, &mut r).unwrap();
    jitter(&mut store, 0.5, &mut r);
    (store, layer)
}

/// Vector attention with `d == C` plus a `C`-head MHSA sharing its q/k/v
/// projections and an identity output projection.
pub fn vattn_as_mhsa(width: usize, seed: u64) -> (ParamStore, VectorAttentionLayer, MhsaLayer) {
    let (mut store, va) = vattn_fixture(width, width, seed);
    let mut r = rng(seed ^ 0xfeed);
    let m = MhsaLayer::new(&mut store, "mhsa", width, width, &mut r).unwrap();
    for (src, dst) in [(&va.fq, &m.wq), (&va.fk, &m.wk), (&va.fv, &m.wv)] {
        *store.get_mut(dst.weight) = store.get(src.weight).clone();
        *store.get_mut(dst.bias) = store.get(src.bias).clone();
    }
    *store.get_mut(m.wo.weight) = Tensor::eye(width);
    *store.get_mut(m.wo.bias) = Tensor::zeros([width]);
    (store, va, m)
}

/// Tiny classifier configs used for end-to-end gradient checks.
pub fn tiny_configs() -> Vec<(&'static str, ModelConfig)> {
    let base = r#"{"input":{"height":8,"width":8,"channels":3},"patch":{"size":2},
        "width":8,"depth":2,"heads":2,"mlp_ratio":2,"head":{"classes":3},"init":"fan_in""#;
    vec![
        (
            "tiny model, fuser",
            ModelConfig::from_json(&format!(
                r#"{base},"tokenlearner":{{"enabled":true,"tokens":2,"insert_after_layer":1}},
                "tokenfuser":{{"enabled":true}}}}"#
            ))
            .unwrap(),
        ),
        (
            "tiny model, vector attention",
            ModelConfig::from_json(&format!(
                r#"{base},"attention":"vector","tokenlearner":{{"enabled":true,"tokens":3,"variant":"mlp","insert_after_layer":1}}}}"#
            ))
            .unwrap(),
        ),
    ]
}

// ---------------------------------------------------------------- criteria

#[derive(Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

pub struct Golden {
    pub name: &'static str,
    pub got: f64,
    pub want: f64,
}

impl Golden {
    pub fn rel(&self) -> f64 {
        (self.got - self.want).abs() / self.want
    }
}

pub fn gflops(cfg: &ModelConfig) -> f64 {
    count_flops(cfg).unwrap().gflops()
}

/// Published GFLOPs of reference configurations, each paired with our count.
pub fn cost_goldens() -> Vec<Golden> {
    let vit = |s: &str, p: usize, r: usize| ModelConfig::vit(s, p, r, 1000).unwrap();
    let mut pooled = vit("L", 16, 512);
    pooled.reduction = serde_json::from_str(r#"{"kind":"pool2x2","at":[12,18]}"#).unwrap();
    vec![
        Golden { name: "ViT-B/16 @384", got: gflops(&vit("B", 16, 384)), want: 55.6 },
        Golden { name: "TL-B/16 (8 at 6)", got: gflops(&vit("B", 16, 384).with_tokenlearner(8, 6)), want: 28.7 },
        Golden { name: "ViT-S/32 @384", got: gflops(&vit("S", 32, 384)), want: 3.4 },
        Golden { name: "ViT-L/16 @512", got: gflops(&vit("L", 16, 512)), want: 363.1 },
        Golden { name: "L/16 @512, 16-TL at 12 (large-model comparison)", got: gflops(&vit("L", 16, 512).with_tokenlearner(16, 12)), want: 178.1 },
        Golden { name: "L/16 @384, 16-TL at 6", got: gflops(&vit("L", 16, 384).with_tokenlearner(16, 6)), want: 51.92 },
        Golden { name: "L/16 @512, 2x2 pool at 12 and 18", got: gflops(&pooled), want: 187.2 },
        Golden { name: "L/16 @512, 16-TL at 12 (pooling comparison)", got: gflops(&vit("L", 16, 512).with_tokenlearner(16, 12)), want: 184.6 },
    ]
}

/// `(name, ours, published)` for the two convention-free ratios.
pub fn cost_ratios() -> Vec<(&'static str, f64, f64)> {
    let vit = |s: &str, p: usize, r: usize| ModelConfig::vit(s, p, r, 1000).unwrap();
    vec![
        (
            "TL-B/16 / ViT-B/16",
            gflops(&vit("B", 16, 384).with_tokenlearner(8, 6)) / gflops(&vit("B", 16, 384)),
            28.7 / 55.6,
        ),
        (
            "16-TL L/16 / ViT-L/16",
            gflops(&vit("L", 16, 512).with_tokenlearner(16, 12)) / gflops(&vit("L", 16, 512)),
            178.1 / 363.1,
        ),
    ]
}

pub fn criterion_cost() -> Outcome {
    let goldens = cost_goldens();
    let worst = goldens.iter().max_by(|a, b| a.rel().total_cmp(&b.rel())).unwrap();
    let ratios = cost_ratios();
    let ratio_ok = ratios.iter().all(|(_, got, want)| (got - want).abs() <= 0.03);
    let pass = goldens.iter().all(|g| g.rel() <= 0.10) && ratio_ok;
    let ratio_txt: Vec<String> = ratios
        .iter()
        .map(|(n, got, want)| format!("{n} {got:.3} vs {want:.3}"))
        .collect();
    Outcome::new(
        pass,
        format!(
            "{} goldens, worst {} {:.2} vs {} ({:+.1}%); ratios {}",
            goldens.len(),
            worst.name,
            worst.got,
            worst.want,
            100.0 * (worst.got - worst.want) / worst.want,
            ratio_txt.join(", ")
        ),
    )
}

pub const SWEEP_FRACTIONS: [f64; 9] = [0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0];

pub fn criterion_sweep() -> Outcome {
    let base = ModelConfig::vit("B", 16, 384, 1000).unwrap();
    let totals: Vec<f64> = placement_sweep(&base, &SWEEP_FRACTIONS)
        .unwrap()
        .iter()
        .map(|r| r.total_flops())
        .collect();
    let monotone = totals.windows(2).all(|w| w[0] <= w[1]);
    let half = totals[4] / count_flops(&base).unwrap().total_flops();
    Outcome::new(
        monotone && (0.45..=0.60).contains(&half),
        format!("monotone {monotone}, fraction 1/2 costs {:.1}% of baseline", 100.0 * half),
    )
}

pub const GRAD_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const GRAD_STEP: f64 = 1e-5;
pub const LAYER_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-5;

/// Worst relative finite-difference error per layer type over `seeds`.
/// Entries are `(name, worst error, tolerance)`.
pub fn gradient_suite(seeds: &[u64]) -> Vec<(String, f64, f64)> {
    let mut out: Vec<(String, f64, f64)> = Vec::new();
    let mut record = |name: &str, err: f64, tol: f64| match out.iter_mut().find(|e| e.0 == name) {
        Some(e) => e.1 = e.1.max(err),
        None => out.push((name.to_string(), err, tol)),
    };
    for &seed in seeds {
        let mut r = rng(1000 + seed);
        for (name, variant) in [
            ("tokenlearner conv4", TokenLearnerVariant::Conv4),
            ("tokenlearner mlp", TokenLearnerVariant::Mlp),
        ] {
            let (store, tl) = tl_fixture(variant, 3, 4, seed);
            let x = Tensor::randn([3, 4, 4], 1.0, &mut r);
            let w = Tensor::randn([3 * 4], 1.0, &mut r);
            let rep = check_params(&store, &[x], GRAD_STEP, usize::MAX, |g, p, v| {
                let t = tl.forward(g, p, v[0])?.tokens;
                project(g, t, &w)
            })
            .unwrap();
            record(name, rep.max_rel_err, LAYER_TOL);
        }

        let (store, tf) = fuser_fixture(2, 2, 4, seed);
        let y = Tensor::randn([4, 4], 1.0, &mut r);
        let x = Tensor::randn([2 * 6, 4], 1.0, &mut r);
        let w = Tensor::randn([12 * 4], 1.0, &mut r);
        let rep = check_params(&store, &[y, x], GRAD_STEP, usize::MAX, |g, p, v| {
            let o = tf.forward(g, p, v[0], v[1])?;
            project(g, o, &w)
        })
        .unwrap();
        record("tokenfuser", rep.max_rel_err, LAYER_TOL);

        for (name, inner) in [("vector attention d<C", 3), ("vector attention d=C", 4)] {
            let (store, va) = vattn_fixture(4, inner, seed);
            let z = Tensor::randn([4, 4], 1.0, &mut r);
            let w = Tensor::randn([16], 1.0, &mut r);
            let rep = check_params(&store, &[z], GRAD_STEP, usize::MAX, |g, p, v| {
                let o = va.forward(g, p, v[0])?;
                project(g, o, &w)
            })
            .unwrap();
            record(name, rep.max_rel_err, LAYER_TOL);
        }

        let (store, m) = mhsa_fixture(6, 2, seed);
        let z = Tensor::randn([4, 6], 1.0, &mut r);
        let w = Tensor::randn([24], 1.0, &mut r);
        let rep = check_params(&store, &[z], GRAD_STEP, usize::MAX, |g, p, v| {
            let o = m.forward(g, p, v[0])?;
            project(g, o, &w)
        })
        .unwrap();
        record("mhsa", rep.max_rel_err, LAYER_TOL);

        for (name, cfg) in tiny_configs() {
            let model = build_model(&cfg, seed).unwrap();
            let mut store = model.params.clone();
            jitter(&mut store, 0.1, &mut r);
            let samples: Vec<Tensor> = (0..2).map(|_| Tensor::randn([8, 8, 3], 1.0, &mut r)).collect();
            let labels = [0usize, 2];
            let rep = check_params(&store, &[], GRAD_STEP, 12, |g, p, _| {
                let logits = model.forward_batch(g, p, &samples)?;
                g.cross_entropy(logits, &labels)
            })
            .unwrap();
            record(name, rep.max_rel_err, MODEL_TOL);
        }
    }
    out
}

/// Plain input-gradient check of a single unary graph op, used by the
/// primitive-level tests.
pub fn op_grad_err(x: &Tensor, f: impl Fn(&mut Graph, tokenlearner::Var) -> tokenlearner::Result<tokenlearner::Var>) -> f64 {
    check(std::slice::from_ref(x), GRAD_STEP, |g, v| {
        let y = f(g, v[0])?;
        let n = g.shape(y).iter().product::<usize>();
        project(g, y, &Tensor::randn([n], 1.0, &mut rng(7)))
    })
    .unwrap()
    .max_rel_err
}

pub fn criterion_gradients() -> Outcome {
    let suite = gradient_suite(&GRAD_SEEDS);
    let pass = suite.iter().all(|(_, e, tol)| e < tol);
    let parts: Vec<String> = suite.iter().map(|(n, e, _)| format!("{n} {e:.1e}")).collect();
    Outcome::new(pass, format!("{} seeds; {}", GRAD_SEEDS.len(), parts.join(", ")))
}

pub const ORACLE_INSTANCES: u64 = 20;
pub const ORACLE_TOL: f64 = 1e-12;

/// Worst deviation from the loop oracles per operation over `instances`
/// random small problems.
pub fn oracle_suite(instances: u64) -> Vec<(&'static str, f64)> {
    let mut worst = [0.0f64; 7];
    for seed in 0..instances {
        let mut r = rng(5000 + seed);
        let h = 1 + (seed as usize % 4);
        let w = 1 + (seed as usize * 7 % 5);
        let c = 1 + (seed as usize % 5);
        let s = 1 + (seed as usize * 3 % 4);

        for (k, variant) in [TokenLearnerVariant::Conv4, TokenLearnerVariant::Mlp].into_iter().enumerate() {
            let (store, tl) = tl_fixture(variant, s, c, seed);
            let x = Tensor::randn([h, w, c], 1.0, &mut r);
            let d = max_diff(&learn_tokens(&x, &tl, &store).unwrap(), &learn_tokens_oracle(&x, &tl, &store));
            worst[k] = worst[k].max(d);
        }

        let t = 1 + (seed as usize % 3);
        let (store, tf) = fuser_fixture(s, t, c, seed);
        let y = Tensor::randn([s * t, c], 1.0, &mut r);
        let d = max_diff(&tokenwise_mix(&y, &tf, &store).unwrap(), &tokenwise_mix_oracle(&y, &tf, &store));
        worst[2] = worst[2].max(d);
        let yt = Tensor::randn([s, c], 1.0, &mut r);
        let x = Tensor::randn([h, w, c], 1.0, &mut r);
        let d = max_diff(&fuse_remap(&yt, &x, &tf, &store).unwrap(), &fuse_remap_oracle(&yt, &x, &tf, &store));
        worst[3] = worst[3].max(d);

        let n = 1 + (seed as usize % 6);
        let inner = 1 + (seed as usize * 5 % 6);
        let (store, va) = vattn_fixture(c, inner, seed);
        let z = Tensor::randn([n, c], 1.0, &mut r);
        let d = max_diff(&vector_attention(&z, &va, &store).unwrap(), &vector_attention_oracle(&z, &va, &store));
        worst[4] = worst[4].max(d);

        let heads = 1 + (seed as usize % 3);
        let (store, m) = mhsa_fixture(heads * (1 + seed as usize % 3), heads, seed);
        let z = Tensor::randn([n, m.width()], 1.0, &mut r);
        let d = max_diff(&mhsa_forward(&z, &m, &store).unwrap(), &mhsa_oracle(&z, &m, &store));
        worst[5] = worst[5].max(d);

        let (store, va, m) = vattn_as_mhsa(c, seed);
        let z = Tensor::randn([n, c], 1.0, &mut r);
        let d = vector_attention(&z, &va, &store)
            .unwrap()
            .max_abs_diff(&mhsa_forward(&z, &m, &store).unwrap());
        worst[6] = worst[6].max(d);
    }
    vec![
        ("learn_tokens conv4", worst[0]),
        ("learn_tokens mlp", worst[1]),
        ("tokenwise_mix", worst[2]),
        ("fuse_remap", worst[3]),
        ("vector_attention", worst[4]),
        ("mhsa_forward", worst[5]),
        ("vector_attention vs d-head mhsa", worst[6]),
    ]
}

pub fn criterion_oracles() -> Outcome {
    let suite = oracle_suite(ORACLE_INSTANCES);
    let pass = suite.iter().all(|(_, d)| *d <= ORACLE_TOL);
    let parts: Vec<String> = suite.iter().map(|(n, d)| format!("{n} {d:.1e}")).collect();
    Outcome::new(pass, format!("{ORACLE_INSTANCES} instances; {}", parts.join(", ")))
}

// ---------------------------------------------------------------- properties

pub type TlCase = (usize, usize, usize, usize, bool, u64);

pub fn tl_case() -> impl Strategy<Value = TlCase> {
    (1usize..7, 1usize..7, 1usize..6, 1usize..5, any::<bool>(), any::<u64>())
}

pub fn variant(mlp: bool) -> TokenLearnerVariant {
    if mlp {
        TokenLearnerVariant::Mlp
    } else {
        TokenLearnerVariant::Conv4
    }
}

/// The token matrix is `S × C` for any grid, including a resized one.
pub fn prop_tl_shape((h, w, c, s, mlp, seed): TlCase) -> Result<(), TestCaseError> {
    let (store, tl) = tl_fixture(variant(mlp), s, c, seed);
    let mut r = rng(seed);
    for (hh, ww) in [(h, w), (2 * h + 1, w + 3)] {
        let x = Tensor::randn([hh, ww, c], 1.0, &mut r);
        let z = learn_tokens(&x, &tl, &store).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(z.shape(), &[s, c][..]);
    }
    Ok(())
}

/// Checked at initialization scale: with large logits the f64 sigmoid
/// rounds to exactly 0 or 1.
pub fn prop_maps_open_interval((h, w, c, s, mlp, seed): TlCase) -> Result<(), TestCaseError> {
    let mut store = ParamStore::new();
    let tl = TokenLearnerLayer::new(&mut store, "tl", variant(mlp), s, c, &mut rng(seed));
    let x = Tensor::randn([h, w, c], 1.0, &mut rng(seed));
    let m = weight_maps(&x, &tl, &store).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(m.shape(), &[h, w, s][..]);
    for &v in m.data() {
        prop_assert!(v > 0.0 && v < 1.0, "map value {}", v);
    }
    Ok(())
}

pub type AttnCase = (usize, usize, usize, u64);

pub fn attn_case() -> impl Strategy<Value = AttnCase> {
    (1usize..7, 1usize..4, 1usize..4, any::<u64>())
}

/// Vector attention weights sum to one over keys for every query and
/// channel; MHSA with constant-one values returns ones.
pub fn prop_attention_rows((n, heads, head_dim, seed): AttnCase) -> Result<(), TestCaseError> {
    let c = heads * head_dim;
    let mut r = rng(seed);
    let (store, va) = vattn_fixture(c, 1 + seed as usize % 5, seed);
    let z = Tensor::randn([n, c], 1.0, &mut r);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let zv = g.leaf(z.clone());
    let a = va.attention(&mut g, &p, zv).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let a = g.value(a);
    for i in 0..n {
        for ch in 0..c {
            let sum: f64 = (0..n).map(|j| a.at(&[i, j, ch])).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "vector row ({}, {}) sums to {}", i, ch, sum);
        }
    }

    let (mut store, m) = mhsa_fixture(c, heads, seed);
    *store.get_mut(m.wv.weight) = Tensor::zeros([c, c]);
    *store.get_mut(m.wv.bias) = Tensor::full([c], 1.0);
    *store.get_mut(m.wo.weight) = Tensor::eye(c);
    *store.get_mut(m.wo.bias) = Tensor::zeros([c]);
    let y = mhsa_forward(&z, &m, &store).map_err(|e| TestCaseError::fail(e.to_string()))?;
    for &v in y.data() {
        prop_assert!((v - 1.0).abs() < 1e-12, "mhsa row sum {}", v);
    }
    Ok(())
}

pub type FuserCase = (usize, usize, usize, usize, u64);

pub fn fuser_case() -> impl Strategy<Value = FuserCase> {
    (1usize..5, 1usize..4, 1usize..6, 1usize..10, any::<u64>())
}

/// Zero tokens leave the residual untouched, through mixing and remapping.
pub fn prop_fuser_identity((s, t, c, pixels, seed): FuserCase) -> Result<(), TestCaseError> {
    let (store, tf) = fuser_fixture(s, t, c, seed);
    let x = Tensor::randn([t * pixels, c], 1.0, &mut rng(seed));
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let y = g.leaf(Tensor::zeros([s * t, c]));
    let xv = g.leaf(x.clone());
    let out = tf.forward(&mut g, &p, y, xv).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(g.value(out).data(), x.data());
    Ok(())
}

pub type VideoCase = (usize, usize, usize, usize, usize, bool, u64);

pub fn video_case() -> impl Strategy<Value = VideoCase> {
    (1usize..5, 1usize..5, 1usize..5, 1usize..5, 1usize..5, any::<bool>(), any::<u64>())
}

/// `T` frames give `S·T` tokens, stacked frame-major, each block equal to
/// the frame tokenized alone.
pub fn prop_video_stacking((t, h, w, c, s, mlp, seed): VideoCase) -> Result<(), TestCaseError> {
    let (store, tl) = tl_fixture(variant(mlp), s, c, seed);
    let video = Tensor::randn([t, h, w, c], 1.0, &mut rng(seed));
    let z = learn_tokens_video(&video, &tl, &store).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(z.shape(), &[s * t, c][..]);
    for f in 0..t {
        let frame = video.slice_leading(f, 1).unwrap().reshape([h, w, c]).unwrap();
        let alone = learn_tokens(&frame, &tl, &store).unwrap();
        prop_assert_eq!(&z.data()[f * s * c..(f + 1) * s * c], alone.data());
    }
    Ok(())
}

pub fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

pub fn run_property<S: Strategy>(
    cases: u32,
    strategy: S,
    prop: fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases).run(&strategy, prop).map_err(|e| e.to_string())
}

pub const PROPERTY_CASES: u32 = 64;

pub fn criterion_invariants() -> Outcome {
    let results = [
        ("tl shape independent of H,W", run_property(PROPERTY_CASES, tl_case(), prop_tl_shape)),
        ("maps in (0,1)", run_property(PROPERTY_CASES, tl_case(), prop_maps_open_interval)),
        ("attention rows sum to 1", run_property(PROPERTY_CASES, attn_case(), prop_attention_rows)),
        ("fuser residual identity", run_property(PROPERTY_CASES, fuser_case(), prop_fuser_identity)),
        ("video S*T stacking", run_property(PROPERTY_CASES, video_case(), prop_video_stacking)),
    ];
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    if failed.is_empty() {
        Outcome::new(true, format!("{} properties x {PROPERTY_CASES} cases", results.len()))
    } else {
        Outcome::new(false, failed.join("; "))
    }
}

// ---------------------------------------------------------------- desk scale

pub const DESK_TRAIN_SAMPLES: usize = 256;
pub const DESK_HELDOUT_SAMPLES: usize = 200;
pub const DESK_TARGET: f64 = 0.95;
pub const MASS_FACTOR: f64 = 2.0;
pub const MASS_SHARE: f64 = 0.80;
pub const DESK_PARAM_LIMIT: usize = 500_000;

pub fn desk_model_config() -> ModelConfig {
    ModelConfig::load(workspace_file("configs/locate_patch_tl.json")).unwrap()
}

pub fn desk_train_config() -> TrainConfig {
    let text = std::fs::read_to_string(workspace_file("configs/locate_patch_train.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn desk_data_spec(seed: u64) -> SyntheticTaskSpec {
    let mut spec = SyntheticTaskSpec::locate_patch(16, 0.1, seed);
    spec.distractors = 3;
    spec
}

pub fn desk_data() -> (Dataset, Dataset) {
    (
        generate(&desk_data_spec(1), DESK_TRAIN_SAMPLES).unwrap(),
        generate(&desk_data_spec(2), DESK_HELDOUT_SAMPLES).unwrap(),
    )
}

/// Mean map weight on the labelled quadrant over the mean of the other three,
/// pooled over every map of the first frame.
pub fn quadrant_mass_ratio(maps: &Tensor, label: usize) -> f64 {
    let (h, w, s) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let mut mass = [0.0f64; 4];
    let mut count = [0usize; 4];
    for y in 0..h {
        for x in 0..w {
            let q = 2 * usize::from(2 * y >= h) + usize::from(2 * x >= w);
            for k in 0..s {
                mass[q] += maps.at(&[y, x, k]);
            }
            count[q] += s;
        }
    }
    let mean: Vec<f64> = (0..4).map(|q| mass[q] / count[q] as f64).collect();
    let others = (0..4).filter(|&q| q != label).map(|q| mean[q]).sum::<f64>() / 3.0;
    mean[label] / others
}

#[derive(Debug)]
pub struct DeskOutcome {
    pub params: usize,
    pub final_train_accuracy: f64,
    pub steps_to_target: Option<usize>,
    pub mass_passing: usize,
    pub heldout: usize,
    pub median_ratio: f64,
    pub heldout_accuracy: f64,
}

pub fn desk_run() -> DeskOutcome {
    let cfg = desk_model_config();
    let tc = desk_train_config();
    let (train_set, held) = desk_data();
    let mut model = build_model(&cfg, tc.seed).unwrap();
    let out = train(&mut model, &tc, &train_set).unwrap();
    let mut ratios: Vec<f64> = (0..held.len())
        .map(|i| {
            let maps = model.first_tokenlearner_maps(&held.sample(i)).unwrap();
            quadrant_mass_ratio(&maps[0], held.label(i))
        })
        .collect();
    let mass_passing = ratios.iter().filter(|&&r| r >= MASS_FACTOR).count();
    ratios.sort_by(f64::total_cmp);
    DeskOutcome {
        params: model.num_params(),
        final_train_accuracy: out.final_metrics.accuracy,
        steps_to_target: out.steps_to(DESK_TARGET),
        mass_passing,
        heldout: held.len(),
        median_ratio: ratios[ratios.len() / 2],
        heldout_accuracy: tokenlearner::train::evaluate(&model, &held).unwrap().accuracy,
    }
}

impl DeskOutcome {
    pub fn learns(&self) -> bool {
        self.params <= DESK_PARAM_LIMIT && self.steps_to_target.is_some()
    }

    pub fn mass_share(&self) -> f64 {
        self.mass_passing as f64 / self.heldout as f64
    }

    pub fn maps_focus(&self) -> bool {
        self.mass_share() >= MASS_SHARE
    }
}

pub fn criterion_desk() -> (Outcome, DeskOutcome) {
    let d = desk_run();
    let steps = d.steps_to_target.map_or("never".into(), |s| format!("step {s}"));
    let o = Outcome::new(
        d.learns() && d.maps_focus(),
        format!(
            "{} params, {:.0}% train accuracy reached at {steps}, final {:.3}; 2x mass on {}/{} held-out ({:.1}%, median ratio {:.2}); held-out accuracy {:.3}",
            d.params,
            100.0 * DESK_TARGET,
            d.final_train_accuracy,
            d.mass_passing,
            d.heldout,
            100.0 * d.mass_share(),
            d.median_ratio,
            d.heldout_accuracy
        ),
    );
    (o, d)
}

pub fn sha256_file(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub const DETERMINISM_STEPS: usize = 60;

/// Trains the desk model twice from scratch and hashes each run's checkpoint
/// and metrics CSV.
pub fn determinism_hashes(dir: &Path) -> [(String, String); 2] {
    let cfg = desk_model_config();
    let (data, _) = desk_data();
    let run = |tag: &str| {
        let mut tc = desk_train_config();
        tc.steps = DETERMINISM_STEPS;
        tc.eval_every = 20;
        let ckpt = dir.join(format!("{tag}.tlkt"));
        let csv = dir.join(format!("{tag}.csv"));
        tc.checkpoint = Some(ckpt.clone());
        let (_, out) = train_config(&cfg, &tc, &data).unwrap();
        out.save_csv(&csv).unwrap();
        (sha256_file(&ckpt), sha256_file(&csv))
    };
    [run("a"), run("b")]
}

pub fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let [a, b] = determinism_hashes(dir.path());
    Outcome::new(
        a == b,
        format!(
            "checkpoint {} vs {}, metrics {} vs {}",
            &a.0[..12],
            &b.0[..12],
            &a.1[..12],
            &b.1[..12]
        ),
    )
}
