//! Adaptive tokenization by spatial attention.
//!
//! For a frame `x: [H×W×C]`, each of the `S` tokens is
//! `z_i = mean_{p in H×W} ( x[p] * w_i[p] )` where `w_i = sigmoid(alpha_i(x))`
//! is an `H×W` weight map. `alpha` is either four 3×3 convolutions with `S`
//! channels (GELU between) or a position-wise two-layer MLP.
//!
//! The ablation tokenizers (fixed grid, direct dense, pool + MLP) share the
//! same `[H×W×C] -> [S×C]` contract and live in [`AltTokenizer`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, DenseLayer, Mlp, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenLearnerVariant {
    #[default]
    Conv4,
    Mlp,
}

#[derive(Clone, Debug)]
enum AlphaParams {
    Conv4 {
        kernels: [ParamId; 4],
        biases: [ParamId; 4],
    },
    Mlp(Mlp),
}

#[derive(Clone, Debug)]
pub struct TokenLearnerLayer {
    pub variant: TokenLearnerVariant,
    pub tokens: usize,
    pub channels: usize,
    alpha: AlphaParams,
}

/// Tokens of one frame plus the sigmoid weight maps that produced them.
#[derive(Clone, Copy, Debug)]
pub struct FrameTokens {
    /// `[S×C]`
    pub tokens: Var,
    /// `[H×W×S]`, present only for spatial-attention tokenizers.
    pub maps: Option<Var>,
}

/// Hidden width of the MLP attention variant.
pub fn mlp_hidden(tokens: usize, channels: usize) -> usize {
    tokens.max(channels / 2)
}

impl TokenLearnerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        variant: TokenLearnerVariant,
        tokens: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let alpha = match variant {
            TokenLearnerVariant::Conv4 => {
                let mut kernels = Vec::with_capacity(4);
                let mut biases = Vec::with_capacity(4);
                for i in 0..4 {
                    let cin = if i == 0 { channels } else { tokens };
                    kernels.push(store.add(
                        format!("{name}/conv{i}/kernel"),
                        Tensor::trunc_normal([3, 3, cin, tokens], store.init().weight_std(9 * cin), rng),
                    ));
                    biases.push(store.add(format!("{name}/conv{i}/bias"), Tensor::zeros([tokens])));
                }
                AlphaParams::Conv4 {
                    kernels: kernels.try_into().unwrap(),
                    biases: biases.try_into().unwrap(),
                }
            }
            TokenLearnerVariant::Mlp => AlphaParams::Mlp(Mlp::new(
                store,
                &format!("{name}/mlp"),
                channels,
                mlp_hidden(tokens, channels),
                tokens,
                rng,
            )),
        };
        TokenLearnerLayer {
            variant,
            tokens,
            channels,
            alpha,
        }
    }

    pub fn num_params(variant: TokenLearnerVariant, tokens: usize, channels: usize) -> usize {
        match variant {
            TokenLearnerVariant::Conv4 => 9 * (channels * tokens + 3 * tokens * tokens) + 4 * tokens,
            TokenLearnerVariant::Mlp => {
                Mlp::num_params(channels, mlp_hidden(tokens, channels), tokens)
            }
        }
    }

    /// Attention parameters as `(kernel, bias)` pairs, conv variant only.
    pub fn conv_params(&self) -> Option<([ParamId; 4], [ParamId; 4])> {
        match &self.alpha {
            AlphaParams::Conv4 { kernels, biases } => Some((*kernels, *biases)),
            AlphaParams::Mlp(_) => None,
        }
    }

    /// Bias of the layer that produces the map logits.
    pub fn map_bias_param(&self) -> ParamId {
        match &self.alpha {
            AlphaParams::Conv4 { biases, .. } => biases[3],
            AlphaParams::Mlp(m) => m.fc2.bias,
        }
    }

    /// Sets every map-logit bias to `b`; a negative value starts the maps near zero.
    pub fn init_map_bias(&self, store: &mut ParamStore, b: f64) {
        store.get_mut(self.map_bias_param()).data_mut().fill(b);
    }

    pub fn mlp_params(&self) -> Option<&Mlp> {
        match &self.alpha {
            AlphaParams::Mlp(m) => Some(m),
            AlphaParams::Conv4 { .. } => None,
        }
    }

    fn check_frame(&self, g: &Graph, x: Var) -> Result<(usize, usize)> {
        match *g.shape(x) {
            [h, w, c] if c == self.channels => Ok((h, w)),
            ref s => Err(Error::dim(
                "learn_tokens",
                format!("frame {s:?} for {} channels", self.channels),
            )),
        }
    }

    /// Sigmoid weight maps `[H×W×S]`.
    pub fn weight_maps(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (h, w) = self.check_frame(g, x)?;
        let logits = match &self.alpha {
            AlphaParams::Conv4 { kernels, biases } => {
                let mut a = x;
                for i in 0..4 {
                    a = g.conv3x3(a, p.var(kernels[i]), p.var(biases[i]))?;
                    if i < 3 {
                        a = g.gelu(a);
                    }
                }
                a
            }
            AlphaParams::Mlp(mlp) => {
                let flat = g.reshape(x, [h * w, self.channels])?;
                let a = mlp.forward(g, p, flat)?;
                g.reshape(a, [h, w, self.tokens])?
            }
        };
        Ok(g.sigmoid(logits))
    }

    /// `[H×W×C] -> [S×C]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<FrameTokens> {
        self.forward_split(g, p, x, x)
    }

    /// Like [`forward`](Self::forward), but the maps are computed from
    /// `map_input` (same shape as `x`) while `x` is pooled.
    pub fn forward_split(&self, g: &mut Graph, p: &Bound, x: Var, map_input: Var) -> Result<FrameTokens> {
        let (h, w) = self.check_frame(g, x)?;
        if g.shape(map_input) != g.shape(x) {
            return Err(Error::dim(
                "learn_tokens",
                format!("map input {:?} differs from features {:?}", g.shape(map_input), g.shape(x)),
            ));
        }
        let maps = self.weight_maps(g, p, map_input)?;
        let tokens = weighted_pool(g, x, maps, h * w, self.channels, self.tokens)?;
        Ok(FrameTokens {
            tokens,
            maps: Some(maps),
        })
    }

    /// `[T×H×W×C] -> [(S·T)×C]`, frames processed independently and stacked frame-major.
    pub fn forward_video(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (t, h, w) = match *g.shape(x) {
            [t, h, w, c] if c == self.channels => (t, h, w),
            ref s => {
                return Err(Error::dim(
                    "learn_tokens_video",
                    format!("video {s:?} for {} channels", self.channels),
                ))
            }
        };
        let mut parts = Vec::with_capacity(t);
        for f in 0..t {
            let frame = g.slice_rows(x, f, 1)?;
            let frame = g.reshape(frame, [h, w, self.channels])?;
            parts.push(self.forward(g, p, frame)?.tokens);
        }
        g.concat_rows(&parts)
    }
}

/// `mean_p x[p] * w_i[p]` for every map `i`, as `maps_flatᵀ · x_flat / HW`.
fn weighted_pool(
    g: &mut Graph,
    x: Var,
    maps: Var,
    pixels: usize,
    channels: usize,
    tokens: usize,
) -> Result<Var> {
    let xf = g.reshape(x, [pixels, channels])?;
    let mf = g.reshape(maps, [pixels, tokens])?;
    let mt = g.transpose(mf)?;
    let z = g.matmul(mt, xf)?;
    Ok(g.scale(z, 1.0 / pixels as f64))
}

pub fn learn_tokens(x: &Tensor, layer: &TokenLearnerLayer, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let out = layer.forward(&mut g, &p, xv)?;
    Ok(g.value(out.tokens).clone())
}

pub fn learn_tokens_video(
    x: &Tensor,
    layer: &TokenLearnerLayer,
    store: &ParamStore,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let out = layer.forward_video(&mut g, &p, xv)?;
    Ok(g.value(out).clone())
}

/// Weight maps `[H×W×S]` for a concrete frame.
pub fn weight_maps(x: &Tensor, layer: &TokenLearnerLayer, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let m = layer.weight_maps(&mut g, &p, xv)?;
    Ok(g.value(m).clone())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    /// Spatial-attention TokenLearner.
    #[default]
    Learned,
    FixedGrid,
    DirectDense,
    PoolMlp,
}

#[derive(Clone, Debug)]
enum AltParams {
    FixedGrid { rows: usize, cols: usize },
    DirectDense(DenseLayer),
    PoolMlp(Mlp),
}

/// Non-attention tokenizers producing `S` tokens per frame.
#[derive(Clone, Debug)]
pub struct AltTokenizer {
    pub kind: TokenizerKind,
    pub tokens: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    params: AltParams,
}

/// Most-square factorization `rows × cols == s` with `rows <= cols`.
pub fn grid_factors(s: usize) -> (usize, usize) {
    let mut rows = 1;
    let mut r = 1;
    while r * r <= s {
        if s.is_multiple_of(r) {
            rows = r;
        }
        r += 1;
    }
    (rows, s / rows)
}

impl AltTokenizer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: TokenizerKind,
        tokens: usize,
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let params = match kind {
            TokenizerKind::Learned => {
                return Err(Error::config(
                    "tokenlearner.tokenizer",
                    "`learned` is the attention tokenizer, not an alternative",
                ))
            }
            TokenizerKind::FixedGrid => {
                let (rows, cols) = grid_factors(tokens);
                if !height.is_multiple_of(rows) || !width.is_multiple_of(cols) {
                    return Err(Error::config(
                        "tokenlearner.tokens",
                        format!(
                            "{height}x{width} map cannot be split into a {rows}x{cols} grid of {tokens} cells"
                        ),
                    ));
                }
                AltParams::FixedGrid { rows, cols }
            }
            TokenizerKind::DirectDense => AltParams::DirectDense(DenseLayer::new(
                store,
                &format!("{name}/dense"),
                height * width * channels,
                tokens * channels,
                rng,
            )),
            TokenizerKind::PoolMlp => AltParams::PoolMlp(Mlp::new(
                store,
                &format!("{name}/mlp"),
                channels,
                channels,
                tokens * channels,
                rng,
            )),
        };
        Ok(AltTokenizer {
            kind,
            tokens,
            channels,
            height,
            width,
            params,
        })
    }

    pub fn num_params(kind: TokenizerKind, tokens: usize, channels: usize, height: usize, width: usize) -> usize {
        match kind {
            TokenizerKind::Learned | TokenizerKind::FixedGrid => 0,
            TokenizerKind::DirectDense => {
                DenseLayer::num_params(height * width * channels, tokens * channels)
            }
            TokenizerKind::PoolMlp => Mlp::num_params(channels, channels, tokens * channels),
        }
    }

    pub fn dense_params(&self) -> Option<&DenseLayer> {
        match &self.params {
            AltParams::DirectDense(d) => Some(d),
            _ => None,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (h, w, c) = (self.height, self.width, self.channels);
        if g.shape(x) != [h, w, c] {
            return Err(Error::dim(
                "alt_tokenize",
                format!("frame {:?}, tokenizer built for [{h}, {w}, {c}]", g.shape(x)),
            ));
        }
        match &self.params {
            AltParams::FixedGrid { rows, cols } => {
                let pool = g.leaf(cell_mean_matrix(h, w, *rows, *cols));
                let xf = g.reshape(x, [h * w, c])?;
                g.matmul(pool, xf)
            }
            AltParams::DirectDense(d) => {
                let xf = g.reshape(x, [1, h * w * c])?;
                let z = d.forward(g, p, xf)?;
                g.reshape(z, [self.tokens, c])
            }
            AltParams::PoolMlp(mlp) => {
                let m = g.spatial_mean(x)?;
                let m = g.reshape(m, [1, c])?;
                let z = mlp.forward(g, p, m)?;
                g.reshape(z, [self.tokens, c])
            }
        }
    }
}

/// `[(rows·cols) × (h·w)]` matrix averaging each rectangular cell, cells in row-major order.
pub fn cell_mean_matrix(h: usize, w: usize, rows: usize, cols: usize) -> Tensor {
    let (ch, cw) = (h / rows, w / cols);
    let inv = 1.0 / (ch * cw) as f64;
    let mut m = Tensor::zeros([rows * cols, h * w]);
    for y in 0..h {
        for x in 0..w {
            let cell = (y / ch) * cols + x / cw;
            m.set(&[cell, y * w + x], inv);
        }
    }
    m
}

pub fn alt_tokenize(x: &Tensor, alt: &AltTokenizer, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let z = alt.forward(&mut g, &p, xv)?;
    Ok(g.value(z).clone())
}
