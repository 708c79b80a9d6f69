//! Analytical FLOPs and parameter accounting over the static stage plan.
//!
//! Raw counts treat a multiply-accumulate as 2 FLOPs; elementwise ops cost
//! one per element, layer norm five and softmax three. Reported numbers are
//! raw counts divided by [`Convention::divisor`], chosen once by
//! [`calibrate`].

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::model::{plan, AttentionKind, ModelConfig, Stage};
use crate::nn::{DenseLayer, MhsaLayer, Mlp};
use crate::tokenfuser::{FuserKind, ReprojectLayer, TokenFuserLayer};
use crate::tokenlearner::{mlp_hidden, AltTokenizer, TokenLearnerLayer, TokenLearnerVariant, TokenizerKind};
use crate::vector_attention::VectorAttentionLayer;

/// Reference point for calibration: ViT-B/16 at 384², in GFLOPs.
pub const CALIBRATION_TARGET: f64 = 55.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// A multiply-accumulate counts as two FLOPs.
    MacAsTwo,
    /// A multiply-accumulate counts as one FLOP.
    MacAsOne,
}

impl Convention {
    pub fn divisor(self) -> f64 {
        match self {
            Convention::MacAsTwo => 1.0,
            Convention::MacAsOne => 2.0,
        }
    }
}

/// Picks the convention that puts ViT-B/16 @384 nearest [`CALIBRATION_TARGET`].
pub fn calibrate() -> Convention {
    let cfg = ModelConfig::vit("B", 16, 384, 1000).expect("preset");
    let raw = raw_costs(&cfg).expect("preset is valid");
    let total: f64 = raw.iter().map(|e| e.flops).sum::<f64>() / 1e9;
    [Convention::MacAsTwo, Convention::MacAsOne]
        .into_iter()
        .min_by(|a, b| {
            let da = (total / a.divisor() - CALIBRATION_TARGET).abs();
            let db = (total / b.divisor() - CALIBRATION_TARGET).abs();
            da.total_cmp(&db)
        })
        .unwrap()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostEntry {
    pub layer: String,
    /// Tokens processed by the layer (input side).
    pub tokens: usize,
    /// FLOPs in the report's convention.
    pub flops: f64,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub convention: Convention,
}

impl CostReport {
    pub fn total_flops(&self) -> f64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() / 1e9
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.entries {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Fixed-width table for terminal output.
    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>8} {:>14} {:>12}\n", "layer", "tokens", "gflops", "params");
        for e in &self.entries {
            s += &format!(
                "{:<24} {:>8} {:>14.4} {:>12}\n",
                e.layer,
                e.tokens,
                e.flops / 1e9,
                e.params
            );
        }
        s += &format!(
            "{:<24} {:>8} {:>14.4} {:>12}\n",
            "total",
            "",
            self.gflops(),
            self.total_params()
        );
        s
    }
}

// All counts below are raw (MAC = 2).

fn dense(n: usize, i: usize, o: usize) -> f64 {
    (n * o) as f64 * (2 * i + 1) as f64
}

fn layer_norm(n: usize, c: usize) -> f64 {
    5.0 * (n * c) as f64
}

fn mlp(n: usize, i: usize, h: usize, o: usize) -> f64 {
    dense(n, i, h) + (n * h) as f64 + dense(n, h, o)
}

/// Attention of `nq` queries over `nk` keys at width `c`.
fn attention_core(nq: usize, nk: usize, c: usize, heads: usize) -> f64 {
    let scores = (nq * nk) as f64;
    // QKᵀ and AV, then scaling and softmax per head
    4.0 * scores * c as f64 + 4.0 * scores * heads as f64
}

fn mhsa(n: usize, c: usize, heads: usize) -> f64 {
    4.0 * dense(n, c, c) + attention_core(n, n, c, heads)
}

fn vector_attention(n: usize, c: usize, d: usize) -> f64 {
    let pairs = (n * n) as f64;
    let mut f = 2.0 * dense(n, c, d) + dense(n, c, c) + pairs * d as f64;
    if d != c {
        f += dense(n * n, d, c);
    }
    // softmax over j and the weighted sum
    f + 3.0 * pairs * c as f64 + 2.0 * pairs * c as f64
}

fn block(cfg: &ModelConfig, n: usize, vector: bool) -> (f64, usize) {
    let c = cfg.width;
    let h = c * cfg.mlp_ratio;
    let (attn_f, attn_p) = if vector {
        (vector_attention(n, c, c), VectorAttentionLayer::num_params(c, c))
    } else {
        (mhsa(n, c, cfg.heads), MhsaLayer::num_params(c))
    };
    let f = 2.0 * layer_norm(n, c) + attn_f + mlp(n, c, h, c) + 2.0 * (n * c) as f64;
    (f, 4 * c + attn_p + Mlp::num_params(c, h, c))
}

/// One frame of the tokenizer on an `hw`-pixel map.
fn tokenizer(cfg: &ModelConfig, rows: usize, cols: usize) -> (f64, usize) {
    let hw = rows * cols;
    let tl = &cfg.tokenlearner;
    let (c, s) = (cfg.width, tl.tokens);
    let px = hw as f64;
    match tl.tokenizer {
        TokenizerKind::Learned => {
            let alpha = match tl.variant {
                TokenLearnerVariant::Conv4 => {
                    let conv = |i: usize| px * s as f64 * (2 * 9 * i + 1) as f64;
                    conv(c) + 3.0 * conv(s) + 3.0 * px * s as f64
                }
                TokenLearnerVariant::Mlp => mlp(hw, c, mlp_hidden(s, c), s),
            };
            // sigmoid, weighted pooling, 1/HW scale
            let f = alpha + px * s as f64 + 2.0 * px * (s * c) as f64 + (s * c) as f64;
            (f, TokenLearnerLayer::num_params(tl.variant, s, c))
        }
        kind => {
            let f = match kind {
                TokenizerKind::FixedGrid => px * c as f64,
                TokenizerKind::DirectDense => dense(1, hw * c, s * c),
                TokenizerKind::PoolMlp => px * c as f64 + mlp(1, c, c, s * c),
                TokenizerKind::Learned => unreachable!(),
            };
            (f, AltTokenizer::num_params(kind, s, c, rows, cols))
        }
    }
}

fn fuser(cfg: &ModelConfig, frames: usize, hw: usize) -> (f64, usize) {
    let (c, s) = (cfg.width, cfg.tokenlearner.tokens);
    let st = s * frames;
    let n = hw * frames;
    match cfg.tokenfuser.kind {
        FuserKind::Fuser => {
            let mix = 2.0 * (st * st * c) as f64;
            // β, sigmoid, remap product, residual add
            let remap = dense(n, c, s) + (n * s) as f64 + 2.0 * (n * s * c) as f64 + (n * c) as f64;
            (mix + remap, TokenFuserLayer::num_params(s, frames, c))
        }
        FuserKind::Unpool => (2.0 * (n * s * c) as f64 + (n * c) as f64, 0),
        FuserKind::Reproject => {
            let h = c * cfg.mlp_ratio;
            let per_frame = layer_norm(hw, c)
                + layer_norm(s, c)
                + 2.0 * dense(hw, c, c)
                + 2.0 * dense(s, c, c)
                + attention_core(hw, s, c, cfg.heads)
                + layer_norm(hw, c)
                + mlp(hw, c, h, c)
                + 2.0 * (hw * c) as f64;
            (
                frames as f64 * per_frame,
                ReprojectLayer::num_params(c, cfg.mlp_ratio),
            )
        }
    }
}

fn raw_costs(cfg: &ModelConfig) -> Result<Vec<CostEntry>> {
    let c = cfg.width;
    let mut out = Vec::new();
    for stage in plan(cfg)? {
        let (tokens, flops, params) = match &stage {
            Stage::Embed { tokens, patch_dim } => (
                *tokens,
                dense(*tokens, *patch_dim, c) + (tokens * c) as f64,
                DenseLayer::num_params(*patch_dim, c) + tokens * c,
            ),
            Stage::Block { tokens, vector, .. } => {
                let (f, p) = block(cfg, *tokens, *vector);
                (*tokens, f, p)
            }
            Stage::Pool {
                window,
                frames,
                rows,
                cols,
                ..
            } => {
                let n = frames * rows * cols;
                (n, (n * c) as f64 + (n / (window * window) * c) as f64, 0)
            }
            Stage::Tokenize {
                frames, rows, cols, ..
            } => {
                let (f, p) = tokenizer(cfg, *rows, *cols);
                (frames * rows * cols, *frames as f64 * f, p)
            }
            Stage::Group {
                frames,
                rows,
                cols,
                tokens,
                vector,
                ..
            } => {
                let hw = rows * cols;
                let (tf, tp) = tokenizer(cfg, *rows, *cols);
                let (bf, bp) = block(cfg, tokens * frames, *vector);
                let (ff, fp) = fuser(cfg, *frames, hw);
                (frames * hw, *frames as f64 * tf + bf + ff, tp + bp + fp)
            }
            Stage::Head { tokens, classes } => (
                *tokens,
                layer_norm(*tokens, c) + (tokens * c) as f64 + dense(1, c, *classes),
                2 * c + DenseLayer::num_params(c, *classes),
            ),
        };
        out.push(CostEntry {
            layer: stage.name(),
            tokens,
            flops,
            params,
        });
    }
    Ok(out)
}

fn report(cfg: &ModelConfig) -> Result<CostReport> {
    let convention = calibrate();
    let mut entries = raw_costs(cfg)?;
    for e in &mut entries {
        e.flops /= convention.divisor();
    }
    Ok(CostReport { entries, convention })
}

/// Per-layer FLOPs (and parameters) in the calibrated convention.
pub fn count_flops(cfg: &ModelConfig) -> Result<CostReport> {
    report(cfg)
}

/// Per-layer parameter counts; identical report to [`count_flops`].
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    report(cfg)
}

/// Costs with the TokenLearner inserted after `round(f · depth)` blocks for
/// each fraction `f`. A config without a TokenLearner gets an 8-token one.
pub fn placement_sweep(cfg: &ModelConfig, fractions: &[f64]) -> Result<Vec<CostReport>> {
    fractions
        .iter()
        .map(|&f| {
            if !(0.0..=1.0).contains(&f) {
                return Err(crate::error::Error::config(
                    "fraction",
                    format!("{f} is outside [0, 1]"),
                ));
            }
            let mut c = cfg.clone();
            c.tokenlearner.enabled = true;
            c.tokenlearner.insert_after_layer = (f * cfg.depth as f64).round() as usize;
            if c.attention == AttentionKind::Vector && !cfg.tokenlearner.enabled {
                c.attention = AttentionKind::Mhsa;
            }
            count_flops(&c)
        })
        .collect()
}
