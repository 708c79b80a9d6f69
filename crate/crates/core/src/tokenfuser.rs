//! Token fusion and remapping back to the spatial grid.
//!
//! Tokens `Y: [ST×C]` are first mixed across the token axis with a learned
//! `ST×ST` matrix (`Y <- (Yᵀ M)ᵀ`, channel-independent). Each frame slice
//! `Y_t: [S×C]` is then scattered back onto the residual feature map:
//! `out[p] = Σ_s sigmoid(β(x[p]))_s · Y_t[s] + x[p]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, DenseLayer, LayerNormLayer, MhsaLayer, Mlp, ParamId, ParamStore, INIT_STD};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TokenFuserLayer {
    /// `[(S·T)×(S·T)]` token-mixing matrix.
    pub mix: ParamId,
    /// Per-pixel remap logits, `C -> S`.
    pub beta: DenseLayer,
    pub tokens: usize,
    pub frames: usize,
    pub channels: usize,
}

/// Splits `x` into `[pixels×C]` rows, remembering the original shape.
fn flatten_map(g: &mut Graph, x: Var, channels: usize, op: &'static str) -> Result<(Var, Vec<usize>)> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 || *shape.last().unwrap() != channels {
        return Err(Error::dim(op, format!("residual {shape:?} for {channels} channels")));
    }
    let pixels = shape[..shape.len() - 1].iter().product::<usize>();
    let flat = if shape.len() == 2 {
        x
    } else {
        g.reshape(x, [pixels, channels])?
    };
    Ok((flat, shape))
}

impl TokenFuserLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        tokens: usize,
        frames: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let side = tokens * frames;
        let mut m = Tensor::randn([side, side], INIT_STD, rng);
        for i in 0..side {
            let v = m.at(&[i, i]);
            m.set(&[i, i], v + 1.0);
        }
        let mix = store.add(format!("{name}/mix"), m);
        let beta = DenseLayer::new(store, &format!("{name}/beta"), channels, tokens, rng);
        TokenFuserLayer {
            mix,
            beta,
            tokens,
            frames,
            channels,
        }
    }

    pub fn num_params(tokens: usize, frames: usize, channels: usize) -> usize {
        let side = tokens * frames;
        side * side + DenseLayer::num_params(channels, tokens)
    }

    /// `(Yᵀ M)ᵀ = Mᵀ Y`, mixing tokens independently per channel.
    pub fn tokenwise_mix(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        let side = self.tokens * self.frames;
        if g.shape(y).len() != 2 || g.shape(y)[0] != side {
            return Err(Error::dim(
                "tokenwise_mix",
                format!("tokens {:?} for a {side}x{side} mixing matrix", g.shape(y)),
            ));
        }
        let mt = g.transpose(p.var(self.mix))?;
        g.matmul(mt, y)
    }

    /// Per-pixel sigmoid remap weights `[pixels×S]` computed from the residual.
    pub fn remap_weights(&self, g: &mut Graph, p: &Bound, x_flat: Var) -> Result<Var> {
        let logits = self.beta.forward(g, p, x_flat)?;
        Ok(g.sigmoid(logits))
    }

    /// Remaps one frame's tokens `[S×C]` onto the residual map (`[H×W×C]` or `[HW×C]`).
    pub fn fuse_remap(&self, g: &mut Graph, p: &Bound, y_t: Var, x_residual: Var) -> Result<Var> {
        if g.shape(y_t) != [self.tokens, self.channels] {
            return Err(Error::dim(
                "fuse_remap",
                format!(
                    "tokens {:?}, expected [{}, {}]",
                    g.shape(y_t),
                    self.tokens,
                    self.channels
                ),
            ));
        }
        let (flat, shape) = flatten_map(g, x_residual, self.channels, "fuse_remap")?;
        let bw = self.remap_weights(g, p, flat)?;
        let spread = g.matmul(bw, y_t)?;
        let out = g.add(spread, flat)?;
        if shape.len() == 2 {
            Ok(out)
        } else {
            g.reshape(out, shape)
        }
    }

    /// Full fuser: mix all `S·T` tokens, then remap frame by frame.
    /// `x_residual` is `[T·pixels×C]`, frame-major.
    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var, x_residual: Var) -> Result<Var> {
        let mixed = self.tokenwise_mix(g, p, y)?;
        per_frame(g, x_residual, self.frames, |g, f, xf| {
            let yt = g.slice_rows(mixed, f * self.tokens, self.tokens)?;
            self.fuse_remap(g, p, yt, xf)
        })
    }
}

/// Applies `f` to each frame's `[pixels×C]` block of `x` and re-stacks the results.
pub(crate) fn per_frame(
    g: &mut Graph,
    x: Var,
    frames: usize,
    mut f: impl FnMut(&mut Graph, usize, Var) -> Result<Var>,
) -> Result<Var> {
    let rows = g.shape(x)[0];
    if !rows.is_multiple_of(frames) {
        return Err(Error::dim(
            "per_frame",
            format!("{rows} rows do not split into {frames} frames"),
        ));
    }
    let per = rows / frames;
    if frames == 1 {
        return f(g, 0, x);
    }
    let mut parts = Vec::with_capacity(frames);
    for t in 0..frames {
        let xf = g.slice_rows(x, t * per, per)?;
        parts.push(f(g, t, xf)?);
    }
    g.concat_rows(&parts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuserKind {
    /// Token mixing plus learned remap.
    #[default]
    Fuser,
    /// Scatter tokens back with the TokenLearner's own weight maps.
    Unpool,
    /// One cross-attention transformer layer from pixel queries to tokens.
    Reproject,
}

/// Cross-attention layer from `H·W` query slots to `S` tokens, followed by an
/// MLP; its output is added to the residual.
#[derive(Clone, Debug)]
pub struct ReprojectLayer {
    pub ln_q: LayerNormLayer,
    pub ln_kv: LayerNormLayer,
    pub attn: MhsaLayer,
    pub ln2: LayerNormLayer,
    pub mlp: Mlp,
    pub channels: usize,
}

impl ReprojectLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ReprojectLayer {
            ln_q: LayerNormLayer::new(store, &format!("{name}/ln_q"), channels),
            ln_kv: LayerNormLayer::new(store, &format!("{name}/ln_kv"), channels),
            attn: MhsaLayer::new(store, &format!("{name}/xattn"), channels, heads, rng)?,
            ln2: LayerNormLayer::new(store, &format!("{name}/ln2"), channels),
            mlp: Mlp::new(store, &format!("{name}/mlp"), channels, channels * mlp_ratio, channels, rng),
            channels,
        })
    }

    pub fn num_params(channels: usize, mlp_ratio: usize) -> usize {
        3 * 2 * channels
            + MhsaLayer::num_params(channels)
            + Mlp::num_params(channels, channels * mlp_ratio, channels)
    }

    fn forward(&self, g: &mut Graph, p: &Bound, y_t: Var, x_flat: Var) -> Result<Var> {
        let q = self.ln_q.forward(g, p, x_flat)?;
        let kv = self.ln_kv.forward(g, p, y_t)?;
        let u = self.attn.cross_forward(g, p, q, kv)?;
        let h = self.ln2.forward(g, p, u)?;
        let h = self.mlp.forward(g, p, h)?;
        let v = g.add(u, h)?;
        g.add(v, x_flat)
    }
}

#[derive(Clone, Debug)]
pub enum AltFuser {
    Unpool { tokens: usize, channels: usize },
    Reproject(ReprojectLayer),
}

impl AltFuser {
    /// Remaps one frame's tokens. `maps` are the `[H×W×S]` (or `[HW×S]`)
    /// weight maps of the paired TokenLearner call; required for unpooling.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        y_t: Var,
        x_residual: Var,
        maps: Option<Var>,
    ) -> Result<Var> {
        let channels = match self {
            AltFuser::Unpool { channels, .. } => *channels,
            AltFuser::Reproject(r) => r.channels,
        };
        let (flat, shape) = flatten_map(g, x_residual, channels, "alt_fuse")?;
        let out = match self {
            AltFuser::Unpool { tokens, .. } => {
                let maps = maps.ok_or_else(|| {
                    Error::Contract("unpool fusing needs the TokenLearner weight maps".into())
                })?;
                let pixels = g.shape(flat)[0];
                let mf = g.reshape(maps, [pixels, *tokens])?;
                let spread = g.matmul(mf, y_t)?;
                g.add(spread, flat)?
            }
            AltFuser::Reproject(r) => r.forward(g, p, y_t, flat)?,
        };
        if shape.len() == 2 {
            Ok(out)
        } else {
            g.reshape(out, shape)
        }
    }
}

pub fn tokenwise_mix(y: &Tensor, fuser: &TokenFuserLayer, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let yv = g.leaf(y.clone());
    let out = fuser.tokenwise_mix(&mut g, &p, yv)?;
    Ok(g.value(out).clone())
}

pub fn fuse_remap(
    y_t: &Tensor,
    x_residual: &Tensor,
    fuser: &TokenFuserLayer,
    store: &ParamStore,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let yv = g.leaf(y_t.clone());
    let xv = g.leaf(x_residual.clone());
    let out = fuser.fuse_remap(&mut g, &p, yv, xv)?;
    Ok(g.value(out).clone())
}

pub fn alt_fuse(
    y_t: &Tensor,
    x_residual: &Tensor,
    alt: &AltFuser,
    maps: Option<&Tensor>,
    store: &ParamStore,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let yv = g.leaf(y_t.clone());
    let xv = g.leaf(x_residual.clone());
    let mv = maps.map(|m| g.leaf(m.clone()));
    let out = alt.forward(&mut g, &p, yv, xv, mv)?;
    Ok(g.value(out).clone())
}
