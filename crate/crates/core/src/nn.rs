//! Transformer building blocks: dense, layer norm, MHSA, pre-norm blocks and
//! patch/tubelet embedding.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vector_attention::VectorAttentionLayer;

/// Standard deviation used for weight and positional-embedding init.
pub const INIT_STD: f64 = 0.02;

/// Weight initialization scale. Biases are always zero and positional
/// embeddings always use [`INIT_STD`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Truncated normal with std [`INIT_STD`].
    #[default]
    Fixed,
    /// Truncated normal with std `1/sqrt(fan_in)`; keeps activations at unit
    /// scale in narrow models where a fixed 0.02 would shrink them.
    FanIn,
}

impl InitScheme {
    pub fn weight_std(self, fan_in: usize) -> f64 {
        match self {
            InitScheme::Fixed => INIT_STD,
            InitScheme::FanIn => (1.0 / fan_in.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    init: InitScheme,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_init(init: InitScheme) -> Self {
        ParamStore {
            init,
            ..Self::default()
        }
    }

    pub fn init(&self) -> InitScheme {
        self.init
    }

    /// Registers a parameter. Panics on duplicate names, which are a builder bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a named leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(
            self.names
                .iter()
                .zip(&self.values)
                .map(|(n, t)| g.named_leaf(n.clone(), t.clone()))
                .collect(),
        )
    }
}

/// Graph leaves for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps leaves recorded in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// `y = x W + b` applied to every row of a rank-2 input.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}/w"),
            Tensor::trunc_normal([in_dim, out_dim], store.init.weight_std(in_dim), rng),
        );
        let bias = store.add(format!("{name}/b"), Tensor::zeros([out_dim]));
        DenseLayer {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add_bias(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNormLayer {
            gamma: store.add(format!("{name}/gamma"), Tensor::full([dim], 1.0)),
            beta: store.add(format!("{name}/beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Multi-head scaled dot-product attention. Queries may come from a different
/// token set than keys and values (cross-attention).
#[derive(Clone, Debug)]
pub struct MhsaLayer {
    pub wq: DenseLayer,
    pub wk: DenseLayer,
    pub wv: DenseLayer,
    pub wo: DenseLayer,
    pub heads: usize,
    pub head_dim: usize,
}

impl MhsaLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(
                "heads",
                format!("{heads} heads do not divide width {width}"),
            ));
        }
        Ok(MhsaLayer {
            wq: DenseLayer::new(store, &format!("{name}/wq"), width, width, rng),
            wk: DenseLayer::new(store, &format!("{name}/wk"), width, width, rng),
            wv: DenseLayer::new(store, &format!("{name}/wv"), width, width, rng),
            wo: DenseLayer::new(store, &format!("{name}/wo"), width, width, rng),
            heads,
            head_dim: width / heads,
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn num_params(width: usize) -> usize {
        4 * DenseLayer::num_params(width, width)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        self.cross_forward(g, p, tokens, tokens)
    }

    /// Attention of `queries: [Nq×C]` over `context: [Nk×C]`.
    pub fn cross_forward(&self, g: &mut Graph, p: &Bound, queries: Var, context: Var) -> Result<Var> {
        let c = self.width();
        for v in [queries, context] {
            let s = g.shape(v);
            if s.len() != 2 || s[1] != c {
                return Err(Error::dim(
                    "mhsa_forward",
                    format!("tokens {:?} for width {c}", s),
                ));
            }
        }
        let q = self.wq.forward(g, p, queries)?;
        let k = self.wk.forward(g, p, context)?;
        let v = self.wv.forward(g, p, context)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = g.slice_cols(q, start, self.head_dim)?;
            let kh = g.slice_cols(k, start, self.head_dim)?;
            let vh = g.slice_cols(v, start, self.head_dim)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale);
            let attn = g.softmax(logits);
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.wo.forward(g, p, cat)
    }
}

/// Evaluates self-attention on a concrete `[N×C]` token matrix.
pub fn mhsa_forward(tokens: &Tensor, layer: &MhsaLayer, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.leaf(tokens.clone());
    let y = layer.forward(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

/// Token-mixing sublayer of a [`TransformerBlock`].
#[derive(Clone, Debug)]
pub enum Attention {
    Mhsa(MhsaLayer),
    Vector(VectorAttentionLayer),
}

impl Attention {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Attention::Mhsa(m) => m.forward(g, p, x),
            Attention::Vector(v) => v.forward(g, p, x),
        }
    }
}

/// Two dense layers with GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            fc1: DenseLayer::new(store, &format!("{name}/fc1"), in_dim, hidden, rng),
            fc2: DenseLayer::new(store, &format!("{name}/fc2"), hidden, out_dim, rng),
        }
    }

    pub fn num_params(in_dim: usize, hidden: usize, out_dim: usize) -> usize {
        DenseLayer::num_params(in_dim, hidden) + DenseLayer::num_params(hidden, out_dim)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Pre-norm transformer block: `x + attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNormLayer,
    pub attn: Attention,
    pub ln2: LayerNormLayer,
    pub mlp: Mlp,
    pub width: usize,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ln1 = LayerNormLayer::new(store, &format!("{name}/ln1"), width);
        let attn = Attention::Mhsa(MhsaLayer::new(store, &format!("{name}/mhsa"), width, heads, rng)?);
        Ok(Self::finish(store, name, width, mlp_ratio, ln1, attn, rng))
    }

    /// Block whose token mixer is pairwise vector attention.
    pub fn new_vector(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let ln1 = LayerNormLayer::new(store, &format!("{name}/ln1"), width);
        let attn = Attention::Vector(VectorAttentionLayer::new(
            store,
            &format!("{name}/vattn"),
            width,
            width,
            rng,
        ));
        Self::finish(store, name, width, mlp_ratio, ln1, attn, rng)
    }

    fn finish(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        mlp_ratio: usize,
        ln1: LayerNormLayer,
        attn: Attention,
        rng: &mut impl Rng,
    ) -> Self {
        let ln2 = LayerNormLayer::new(store, &format!("{name}/ln2"), width);
        let mlp = Mlp::new(store, &format!("{name}/mlp"), width, width * mlp_ratio, width, rng);
        TransformerBlock {
            ln1,
            attn,
            ln2,
            mlp,
            width,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Splits images or videos into flattened (tubelet) patches, projects them to
/// the model width and adds learned positional embeddings.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub tubelet: usize,
    pub in_channels: usize,
    pub proj: DenseLayer,
    pub pos: ParamId,
    pub grid: [usize; 3],
}

impl PatchEmbed {
    /// `input` is `[frames, height, width, channels]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: [usize; 4],
        patch: usize,
        tubelet: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let grid = patch_grid(input, patch, tubelet)?;
        let tokens = grid.iter().product::<usize>();
        let patch_dim = patch * patch * tubelet * input[3];
        let proj = DenseLayer::new(store, &format!("{name}/proj"), patch_dim, width, rng);
        let pos = store.add(
            format!("{name}/pos"),
            Tensor::randn([tokens, width], INIT_STD, rng),
        );
        Ok(PatchEmbed {
            patch,
            tubelet,
            in_channels: input[3],
            proj,
            pos,
            grid,
        })
    }

    /// `[frames', grid rows, grid cols]` after tokenization.
    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, input: &Tensor) -> Result<Var> {
        Ok(self.forward_parts(g, p, input)?.1)
    }

    /// Projected patches before and after the positional embedding is added.
    pub fn forward_parts(&self, g: &mut Graph, p: &Bound, input: &Tensor) -> Result<(Var, Var)> {
        let patches = patchify(input, self.patch, self.tubelet)?;
        if patches.shape()[0] != self.tokens() || patches.shape()[1] != self.proj.in_dim {
            return Err(Error::dim(
                "patch_embed",
                format!(
                    "input {:?} gives {:?} patches, layer expects [{}, {}]",
                    input.shape(),
                    patches.shape(),
                    self.tokens(),
                    self.proj.in_dim
                ),
            ));
        }
        let x = g.leaf(patches);
        let content = self.proj.forward(g, p, x)?;
        let x = g.add(content, p.var(self.pos))?;
        Ok((content, x))
    }
}

/// Token grid `[T/tubelet, H/p, W/p]` for an input `[T, H, W, C]`.
pub fn patch_grid(input: [usize; 4], patch: usize, tubelet: usize) -> Result<[usize; 3]> {
    let [t, h, w, _] = input;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(
            "patch.size",
            format!("{h}x{w} input is not divisible by patch size {patch}"),
        ));
    }
    if tubelet == 0 || t % tubelet != 0 {
        return Err(Error::config(
            "patch.tubelet_depth",
            format!("{t} frames are not divisible by tubelet depth {tubelet}"),
        ));
    }
    Ok([t / tubelet, h / patch, w / patch])
}

/// Flattens an `[H, W, C]` image or `[T, H, W, C]` video into
/// `[tokens, tubelet * p * p * C]`, frame-major then row-major over the grid.
/// Each patch vector is ordered `(dt, dy, dx, c)`.
pub fn patchify(input: &Tensor, patch: usize, tubelet: usize) -> Result<Tensor> {
    let dims: [usize; 4] = match *input.shape() {
        [h, w, c] => [1, h, w, c],
        [t, h, w, c] => [t, h, w, c],
        ref s => {
            return Err(Error::dim(
                "patch_embed",
                format!("expected [H, W, C] or [T, H, W, C], got {s:?}"),
            ))
        }
    };
    let [gt, gh, gw] = patch_grid(dims, patch, tubelet)?;
    let [_, h, w, c] = dims;
    let src = input.data();
    let patch_dim = tubelet * patch * patch * c;
    let mut out = Vec::with_capacity(gt * gh * gw * patch_dim);
    for ft in 0..gt {
        for gy in 0..gh {
            for gx in 0..gw {
                for dt in 0..tubelet {
                    let t = ft * tubelet + dt;
                    for dy in 0..patch {
                        let y = gy * patch + dy;
                        let row = ((t * h + y) * w + gx * patch) * c;
                        out.extend_from_slice(&src[row..row + patch * c]);
                    }
                }
            }
        }
    }
    Tensor::new([gt * gh * gw, patch_dim], out)
}
