//! Declarative ViT/ViViT assembly with TokenLearner, TokenFuser and
//! pooling-based token reduction.
//!
//! A [`ModelConfig`] is first lowered to a static [`Stage`] plan, which both
//! the model builder and the cost model consume, so the token counts seen by
//! the FLOPs accounting are the ones the runtime actually processes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{patch_grid, Bound, InitScheme, DenseLayer, LayerNormLayer, ParamStore, PatchEmbed, TransformerBlock};
use crate::tensor::Tensor;
use crate::tokenfuser::{per_frame, AltFuser, FuserKind, ReprojectLayer, TokenFuserLayer};
use crate::tokenlearner::{
    cell_mean_matrix, grid_factors, AltTokenizer, FrameTokens, TokenLearnerLayer, TokenLearnerVariant,
    TokenizerKind,
};

fn one() -> usize {
    1
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_tokens() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub height: usize,
    pub width: usize,
    /// 1 for images.
    #[serde(default = "one")]
    pub frames: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub size: usize,
    #[serde(default = "one")]
    pub tubelet_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenLearnerConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Tokens per frame (`S`).
    #[serde(default = "default_tokens")]
    pub tokens: usize,
    #[serde(default)]
    pub variant: TokenLearnerVariant,
    /// Number of transformer blocks before the tokenizer; 0 places it right after patch embedding.
    #[serde(default)]
    pub insert_after_layer: usize,
    #[serde(default)]
    pub tokenizer: TokenizerKind,
    #[serde(default)]
    pub map_input: MapInput,
    /// Initial bias of the map logits of every learned tokenizer.
    #[serde(default)]
    pub map_bias: f64,
}

/// What the weight maps of a tokenizer placed right after patch embedding
/// are computed from. The pooled features always include the positional
/// embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapInput {
    #[default]
    Features,
    /// Projected patches without the positional embedding.
    Content,
}

impl Default for TokenLearnerConfig {
    fn default() -> Self {
        TokenLearnerConfig {
            enabled: false,
            tokens: default_tokens(),
            variant: TokenLearnerVariant::default(),
            insert_after_layer: 0,
            tokenizer: TokenizerKind::default(),
            map_input: MapInput::default(),
            map_bias: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenFuserConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub kind: FuserKind,
}

/// Pooling-based token reduction. Placement `k` pools the tokens entering
/// block `k` (1-based), so `k - 1` blocks run at full resolution.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Reduction {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "pool2x2")]
    Pool2x2 { at: Vec<usize> },
    #[serde(rename = "pool4x4")]
    Pool4x4 { at: usize },
}

impl Reduction {
    /// `(block index, window)` pairs.
    pub fn placements(&self) -> Vec<(usize, usize)> {
        match self {
            Reduction::None => Vec::new(),
            Reduction::Pool2x2 { at } => at.iter().map(|&k| (k, 2)).collect(),
            Reduction::Pool4x4 { at } => vec![(*at, 4)],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Mhsa,
    /// Pairwise vector attention; only for blocks that run on learned tokens.
    Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: InputConfig,
    pub patch: PatchConfig,
    /// Channel width `C`.
    pub width: usize,
    /// Transformer depth `L`.
    pub depth: usize,
    /// Additional blocks appended after the TokenLearner insertion point.
    #[serde(default)]
    pub extra_layers: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub attention: AttentionKind,
    #[serde(default)]
    pub tokenlearner: TokenLearnerConfig,
    #[serde(default)]
    pub tokenfuser: TokenFuserConfig,
    #[serde(default)]
    pub reduction: Reduction,
    pub head: HeadConfig,
    #[serde(default)]
    pub init: InitScheme,
}

impl ModelConfig {
    /// Standard ViT sizes: `"S"`, `"B"`, `"L"`, `"H"`.
    pub fn vit(size: &str, patch: usize, resolution: usize, classes: usize) -> Result<Self> {
        let (width, depth, heads) = match size {
            "Ti" => (192, 12, 3),
            "S" => (384, 12, 6),
            "B" => (768, 12, 12),
            "L" => (1024, 24, 16),
            "H" => (1280, 32, 16),
            other => return Err(Error::config("size", format!("unknown ViT size `{other}`"))),
        };
        Ok(ModelConfig {
            input: InputConfig {
                height: resolution,
                width: resolution,
                frames: 1,
                channels: 3,
            },
            patch: PatchConfig {
                size: patch,
                tubelet_depth: 1,
            },
            width,
            depth,
            extra_layers: 0,
            heads,
            mlp_ratio: 4,
            attention: AttentionKind::Mhsa,
            tokenlearner: TokenLearnerConfig::default(),
            tokenfuser: TokenFuserConfig::default(),
            reduction: Reduction::None,
            head: HeadConfig { classes },
            init: InitScheme::Fixed,
        })
    }

    /// ViViT with `frames` input frames and `p×p×2` tubelets.
    pub fn vivit(size: &str, patch: usize, resolution: usize, frames: usize, classes: usize) -> Result<Self> {
        let mut cfg = Self::vit(size, patch, resolution, classes)?;
        cfg.input.frames = frames;
        cfg.patch.tubelet_depth = 2;
        Ok(cfg)
    }

    /// Adds an `S`-token TokenLearner after `after` blocks.
    pub fn with_tokenlearner(mut self, tokens: usize, after: usize) -> Self {
        self.tokenlearner.enabled = true;
        self.tokenlearner.tokens = tokens;
        self.tokenlearner.insert_after_layer = after;
        self
    }

    /// Enables the TokenFuser, turning every later block into a fused group.
    pub fn with_fuser(mut self) -> Self {
        self.tokenfuser.enabled = true;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn input_dims(&self) -> [usize; 4] {
        [
            self.input.frames,
            self.input.height,
            self.input.width,
            self.input.channels,
        ]
    }

    /// Token grid `[frames', rows, cols]` after patch embedding.
    pub fn grid(&self) -> Result<[usize; 3]> {
        patch_grid(self.input_dims(), self.patch.size, self.patch.tubelet_depth)
    }

    /// TokenLearner → block → fuser groups.
    pub fn uses_fuser_groups(&self) -> bool {
        self.tokenlearner.enabled && self.tokenfuser.enabled
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input.height", self.input.height),
            ("input.width", self.input.width),
            ("input.frames", self.input.frames),
            ("input.channels", self.input.channels),
            ("width", self.width),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("head.classes", self.head.classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("{} heads do not divide width {}", self.heads, self.width),
            ));
        }
        let [_, gh, gw] = self.grid()?;
        let tl = &self.tokenlearner;
        if tl.enabled {
            if tl.tokens == 0 {
                return Err(Error::config("tokenlearner.tokens", "must be positive"));
            }
            if tl.insert_after_layer > self.depth {
                return Err(Error::config(
                    "tokenlearner.insert_after_layer",
                    format!("{} exceeds depth {}", tl.insert_after_layer, self.depth),
                ));
            }
            if !tl.map_bias.is_finite() {
                return Err(Error::config("tokenlearner.map_bias", "must be finite"));
            }
            if tl.map_input == MapInput::Content {
                if tl.insert_after_layer != 0 {
                    return Err(Error::config(
                        "tokenlearner.map_input",
                        "content maps need insert_after_layer 0",
                    ));
                }
                if tl.tokenizer != TokenizerKind::Learned {
                    return Err(Error::config(
                        "tokenlearner.map_input",
                        "content maps need the learned tokenizer",
                    ));
                }
            }
            if tl.tokenizer == TokenizerKind::FixedGrid {
                let (r, c) = grid_factors(tl.tokens);
                if gh % r != 0 || gw % c != 0 {
                    return Err(Error::config(
                        "tokenlearner.tokens",
                        format!("{gh}x{gw} token grid cannot be split into {r}x{c} cells"),
                    ));
                }
            }
        }
        if self.tokenfuser.enabled {
            if !tl.enabled {
                return Err(Error::config(
                    "tokenfuser.enabled",
                    "the fuser requires an enabled tokenlearner",
                ));
            }
            if self.tokenfuser.kind == FuserKind::Unpool && tl.tokenizer != TokenizerKind::Learned {
                return Err(Error::config(
                    "tokenfuser.kind",
                    "unpooling needs the weight maps of a learned tokenizer",
                ));
            }
        }
        if self.attention == AttentionKind::Vector && !tl.enabled {
            return Err(Error::config(
                "attention",
                "vector attention applies to blocks after an enabled tokenlearner",
            ));
        }
        let placements = self.reduction.placements();
        if !placements.is_empty() {
            if tl.enabled {
                return Err(Error::config(
                    "reduction",
                    "pooling reduction cannot be combined with a tokenlearner",
                ));
            }
            let (mut h, mut w) = (gh, gw);
            let mut prev = 0;
            for (k, win) in placements {
                if k <= prev || k > self.depth {
                    return Err(Error::config(
                        "reduction.at",
                        format!("placements must be strictly increasing within 1..={}", self.depth),
                    ));
                }
                if h % win != 0 || w % win != 0 {
                    return Err(Error::config(
                        "reduction.at",
                        format!("{h}x{w} token grid is not divisible by a {win}x{win} window"),
                    ));
                }
                h /= win;
                w /= win;
                prev = k;
            }
        }
        Ok(())
    }

    /// Non-fatal configuration remarks.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let (true, Ok([_, h, w])) = (self.tokenlearner.enabled, self.grid()) {
            if self.tokenlearner.tokens >= h * w {
                out.push(format!(
                    "tokenlearner.tokens = {} is not smaller than the {h}x{w} token grid",
                    self.tokenlearner.tokens
                ));
            }
        }
        out
    }
}

/// One step of the static layer plan.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Embed {
        tokens: usize,
        patch_dim: usize,
    },
    Block {
        name: String,
        tokens: usize,
        vector: bool,
    },
    /// Per-frame average pooling of the `rows×cols` token grid.
    Pool {
        name: String,
        window: usize,
        frames: usize,
        rows: usize,
        cols: usize,
    },
    /// Single tokenizer: `frames·rows·cols` tokens in, `frames·S` out.
    Tokenize {
        name: String,
        frames: usize,
        rows: usize,
        cols: usize,
        tokens: usize,
    },
    /// TokenLearner → block → fuser; token count is restored.
    Group {
        name: String,
        frames: usize,
        rows: usize,
        cols: usize,
        tokens: usize,
        vector: bool,
    },
    Head {
        tokens: usize,
        classes: usize,
    },
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::Embed { .. } => "embed".into(),
            Stage::Head { .. } => "head".into(),
            Stage::Block { name, .. }
            | Stage::Pool { name, .. }
            | Stage::Tokenize { name, .. }
            | Stage::Group { name, .. } => name.clone(),
        }
    }

    /// Tokens leaving this stage (logit count for the head).
    pub fn tokens_out(&self) -> usize {
        match self {
            Stage::Embed { tokens, .. } | Stage::Block { tokens, .. } => *tokens,
            Stage::Pool {
                window,
                frames,
                rows,
                cols,
                ..
            } => frames * (rows / window) * (cols / window),
            Stage::Tokenize { frames, tokens, .. } => frames * tokens,
            Stage::Group {
                frames, rows, cols, ..
            } => frames * rows * cols,
            Stage::Head { classes, .. } => *classes,
        }
    }
}

/// Lowers a config to its ordered stage list.
pub fn plan(cfg: &ModelConfig) -> Result<Vec<Stage>> {
    cfg.validate()?;
    let [frames, mut rows, mut cols] = cfg.grid()?;
    let patch_dim = cfg.patch.size * cfg.patch.size * cfg.patch.tubelet_depth * cfg.input.channels;
    let mut stages = vec![Stage::Embed {
        tokens: frames * rows * cols,
        patch_dim,
    }];
    let tl = &cfg.tokenlearner;
    let dense_blocks = if tl.enabled { tl.insert_after_layer } else { cfg.depth };
    let pools = cfg.reduction.placements();
    for i in 1..=dense_blocks {
        if let Some(&(_, window)) = pools.iter().find(|(k, _)| *k == i) {
            stages.push(Stage::Pool {
                name: format!("pool{i}"),
                window,
                frames,
                rows,
                cols,
            });
            rows /= window;
            cols /= window;
        }
        stages.push(Stage::Block {
            name: format!("block{i}"),
            tokens: frames * rows * cols,
            vector: false,
        });
    }
    let vector = cfg.attention == AttentionKind::Vector;
    let tail = cfg.depth + cfg.extra_layers;
    if tl.enabled && cfg.tokenfuser.enabled {
        for j in dense_blocks + 1..=tail {
            stages.push(Stage::Group {
                name: format!("group{j}"),
                frames,
                rows,
                cols,
                tokens: tl.tokens,
                vector,
            });
        }
    } else {
        let mut tokens = frames * rows * cols;
        if tl.enabled {
            stages.push(Stage::Tokenize {
                name: "tokenlearner".into(),
                frames,
                rows,
                cols,
                tokens: tl.tokens,
            });
            tokens = frames * tl.tokens;
        }
        for j in dense_blocks + 1..=tail {
            stages.push(Stage::Block {
                name: format!("block{j}"),
                tokens,
                vector,
            });
        }
    }
    let tokens = stages.last().map(Stage::tokens_out).unwrap_or(0);
    stages.push(Stage::Head {
        tokens,
        classes: cfg.head.classes,
    });
    Ok(stages)
}

/// `(stage name, tokens out)` for every stage except the head.
pub fn token_trace(cfg: &ModelConfig) -> Result<Vec<(String, usize)>> {
    Ok(plan(cfg)?
        .iter()
        .filter(|s| !matches!(s, Stage::Head { .. }))
        .map(|s| (s.name(), s.tokens_out()))
        .collect())
}

#[derive(Clone, Debug)]
pub enum Tokenizer {
    Learned(TokenLearnerLayer),
    Alt(AltTokenizer),
}

impl Tokenizer {
    fn build(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let tl = &cfg.tokenlearner;
        Ok(match tl.tokenizer {
            TokenizerKind::Learned => {
                let layer = TokenLearnerLayer::new(store, name, tl.variant, tl.tokens, cfg.width, rng);
                if tl.map_bias != 0.0 {
                    layer.init_map_bias(store, tl.map_bias);
                }
                Tokenizer::Learned(layer)
            }
            kind => Tokenizer::Alt(AltTokenizer::new(
                store, name, kind, tl.tokens, cfg.width, rows, cols, rng,
            )?),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, frame: Var) -> Result<FrameTokens> {
        match self {
            Tokenizer::Learned(t) => t.forward(g, p, frame),
            Tokenizer::Alt(a) => Ok(FrameTokens {
                tokens: a.forward(g, p, frame)?,
                maps: None,
            }),
        }
    }

    /// Tokenizes each frame of frame-major `[frames·rows·cols × C]` tokens.
    /// Returns `[frames·S × C]` and the per-frame weight maps, if any.
    fn forward_frames(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        map_input: Option<Var>,
        frames: usize,
        rows: usize,
        cols: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let c = *g.shape(x).last().unwrap();
        let mut maps = Vec::new();
        let tokens = per_frame(g, x, frames, |g, t, xf| {
            let frame = g.reshape(xf, [rows, cols, c])?;
            let out = match (self, map_input) {
                (Tokenizer::Learned(tl), Some(m)) => {
                    let per = rows * cols;
                    let mf = if frames == 1 { m } else { g.slice_rows(m, t * per, per)? };
                    let mf = g.reshape(mf, [rows, cols, c])?;
                    tl.forward_split(g, p, frame, mf)?
                }
                _ => self.forward(g, p, frame)?,
            };
            maps.extend(out.maps);
            Ok(out.tokens)
        })?;
        Ok((tokens, maps))
    }
}

#[derive(Clone, Debug)]
pub enum Fuser {
    Learned(TokenFuserLayer),
    Alt(AltFuser),
}

#[derive(Clone, Debug)]
enum Layer {
    Block(TransformerBlock),
    Pool {
        matrix: Tensor,
        frames: usize,
    },
    Tokenize {
        tokenizer: Tokenizer,
        frames: usize,
        rows: usize,
        cols: usize,
    },
    Group {
        tokenizer: Tokenizer,
        block: TransformerBlock,
        fuser: Fuser,
        frames: usize,
        rows: usize,
        cols: usize,
    },
}

/// A built model: configuration, parameters and layer sequence.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    embed: PatchEmbed,
    layers: Vec<Layer>,
    head_norm: LayerNormLayer,
    head: DenseLayer,
    plan: Vec<Stage>,
}

/// Graph nodes produced by one forward pass over a single sample.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// `[1×K]`
    pub logits: Var,
    /// Tokens leaving each stage, in plan order (head excluded).
    pub trace: Vec<usize>,
    /// Per-frame `[rows×cols×S]` weight maps of the first TokenLearner.
    pub first_maps: Vec<Var>,
}

fn block(
    store: &mut ParamStore,
    name: &str,
    cfg: &ModelConfig,
    vector: bool,
    rng: &mut ChaCha8Rng,
) -> Result<TransformerBlock> {
    if vector {
        Ok(TransformerBlock::new_vector(store, name, cfg.width, cfg.mlp_ratio, rng))
    } else {
        TransformerBlock::new(store, name, cfg.width, cfg.heads, cfg.mlp_ratio, rng)
    }
}

/// Builds a model with parameters drawn deterministically from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let stages = plan(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::with_init(cfg.init);
    let embed = PatchEmbed::new(
        &mut store,
        "embed",
        cfg.input_dims(),
        cfg.patch.size,
        cfg.patch.tubelet_depth,
        cfg.width,
        &mut rng,
    )?;
    let mut layers = Vec::new();
    for stage in &stages {
        match stage {
            Stage::Embed { .. } | Stage::Head { .. } => {}
            Stage::Block { name, vector, .. } => {
                layers.push(Layer::Block(block(&mut store, name, cfg, *vector, &mut rng)?));
            }
            Stage::Pool {
                window,
                frames,
                rows,
                cols,
                ..
            } => layers.push(Layer::Pool {
                matrix: cell_mean_matrix(*rows, *cols, rows / window, cols / window),
                frames: *frames,
            }),
            Stage::Tokenize {
                name,
                frames,
                rows,
                cols,
                ..
            } => layers.push(Layer::Tokenize {
                tokenizer: Tokenizer::build(&mut store, name, cfg, *rows, *cols, &mut rng)?,
                frames: *frames,
                rows: *rows,
                cols: *cols,
            }),
            Stage::Group {
                name,
                frames,
                rows,
                cols,
                tokens,
                vector,
            } => {
                let tokenizer = Tokenizer::build(
                    &mut store,
                    &format!("{name}/tokenlearner"),
                    cfg,
                    *rows,
                    *cols,
                    &mut rng,
                )?;
                let blk = block(&mut store, &format!("{name}/block"), cfg, *vector, &mut rng)?;
                let fname = format!("{name}/fuser");
                let fuser = match cfg.tokenfuser.kind {
                    FuserKind::Fuser => Fuser::Learned(TokenFuserLayer::new(
                        &mut store, &fname, *tokens, *frames, cfg.width, &mut rng,
                    )),
                    FuserKind::Unpool => Fuser::Alt(AltFuser::Unpool {
                        tokens: *tokens,
                        channels: cfg.width,
                    }),
                    FuserKind::Reproject => Fuser::Alt(AltFuser::Reproject(ReprojectLayer::new(
                        &mut store,
                        &fname,
                        cfg.width,
                        cfg.heads,
                        cfg.mlp_ratio,
                        &mut rng,
                    )?)),
                };
                layers.push(Layer::Group {
                    tokenizer,
                    block: blk,
                    fuser,
                    frames: *frames,
                    rows: *rows,
                    cols: *cols,
                });
            }
        }
    }
    let head_norm = LayerNormLayer::new(&mut store, "head/ln", cfg.width);
    let head = DenseLayer::new(&mut store, "head/dense", cfg.width, cfg.head.classes, &mut rng);
    Ok(Model {
        config: cfg.clone(),
        params: store,
        embed,
        layers,
        head_norm,
        head,
        plan: stages,
    })
}

impl Model {
    pub fn plan(&self) -> &[Stage] {
        &self.plan
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn has_tokenlearner(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::Tokenize { .. } | Layer::Group { .. }))
    }

    /// Shape of one input sample: `[H, W, C]` for images, `[T, H, W, C]` for video.
    pub fn sample_shape(&self) -> Vec<usize> {
        let [t, h, w, c] = self.config.input_dims();
        if t == 1 {
            vec![h, w, c]
        } else {
            vec![t, h, w, c]
        }
    }

    fn check_sample(&self, input: &Tensor) -> Result<()> {
        let [t, h, w, c] = self.config.input_dims();
        let ok = match *input.shape() {
            [ih, iw, ic] => t == 1 && [ih, iw, ic] == [h, w, c],
            [it, ih, iw, ic] => [it, ih, iw, ic] == [t, h, w, c],
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dim(
                "forward",
                format!(
                    "sample {:?}, model expects {:?}",
                    input.shape(),
                    self.sample_shape()
                ),
            ))
        }
    }

    /// Records the forward pass of one sample into `g`.
    pub fn forward_sample(&self, g: &mut Graph, p: &Bound, input: &Tensor) -> Result<SampleOutput> {
        self.check_sample(input)?;
        let (content, mut x) = self.embed.forward_parts(g, p, input)?;
        let content = (self.config.tokenlearner.map_input == MapInput::Content).then_some(content);
        let mut trace = vec![g.shape(x)[0]];
        let mut first_maps: Option<Vec<Var>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let map_input = if i == 0 { content } else { None };
            x = match layer {
                Layer::Block(b) => b.forward(g, p, x)?,
                Layer::Pool { matrix, frames } => {
                    let m = g.leaf(matrix.clone());
                    per_frame(g, x, *frames, |g, _, xf| g.matmul(m, xf))?
                }
                Layer::Tokenize {
                    tokenizer,
                    frames,
                    rows,
                    cols,
                } => {
                    let (z, maps) = tokenizer.forward_frames(g, p, x, map_input, *frames, *rows, *cols)?;
                    first_maps.get_or_insert(maps);
                    z
                }
                Layer::Group {
                    tokenizer,
                    block,
                    fuser,
                    frames,
                    rows,
                    cols,
                } => {
                    let (z, maps) = tokenizer.forward_frames(g, p, x, map_input, *frames, *rows, *cols)?;
                    let y = block.forward(g, p, z)?;
                    let out = match fuser {
                        Fuser::Learned(f) => f.forward(g, p, y, x)?,
                        Fuser::Alt(alt) => {
                            let s = g.shape(y)[0] / frames;
                            per_frame(g, x, *frames, |g, t, xf| {
                                let yt = g.slice_rows(y, t * s, s)?;
                                alt.forward(g, p, yt, xf, maps.get(t).copied())
                            })?
                        }
                    };
                    first_maps.get_or_insert(maps);
                    out
                }
            };
            trace.push(g.shape(x)[0]);
        }
        let n = g.shape(x)[0];
        let c = self.config.width;
        let h = self.head_norm.forward(g, p, x)?;
        let h = g.reshape(h, [n, 1, c])?;
        let pooled = g.spatial_mean(h)?;
        let pooled = g.reshape(pooled, [1, c])?;
        let logits = self.head.forward(g, p, pooled)?;
        Ok(SampleOutput {
            logits,
            trace,
            first_maps: first_maps.unwrap_or_default(),
        })
    }

    /// Logits `[B×K]` for `samples`, all recorded in `g`.
    pub fn forward_batch(&self, g: &mut Graph, p: &Bound, samples: &[Tensor]) -> Result<Var> {
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            rows.push(self.forward_sample(g, p, s)?.logits);
        }
        g.concat_rows(&rows)
    }

    /// Logits for a batch tensor whose leading axis indexes samples.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let b = batch.shape()[0];
        let samples = split_batch(batch, b)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let logits = self.forward_batch(&mut g, &p, &samples)?;
        Ok(g.value(logits).clone())
    }

    /// Per-frame weight maps `[rows×cols×S]` of the first TokenLearner for one sample.
    pub fn first_tokenlearner_maps(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let learned = self.layers.iter().find_map(|l| match l {
            Layer::Tokenize { tokenizer, .. } | Layer::Group { tokenizer, .. } => Some(tokenizer),
            _ => None,
        });
        match learned {
            Some(Tokenizer::Learned(_)) => {}
            Some(Tokenizer::Alt(_)) => {
                return Err(Error::config(
                    "tokenlearner.tokenizer",
                    "the first tokenizer has no spatial attention maps",
                ))
            }
            None => return Err(Error::config("tokenlearner.enabled", "model has no TokenLearner")),
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward_sample(&mut g, &p, input)?;
        Ok(out.first_maps.iter().map(|&m| g.value(m).clone()).collect())
    }
}

/// Splits a `[B, ...]` tensor into `B` samples.
pub fn split_batch(batch: &Tensor, b: usize) -> Result<Vec<Tensor>> {
    if batch.rank() < 2 || batch.shape()[0] != b {
        return Err(Error::dim("forward", format!("batch {:?}", batch.shape())));
    }
    let inner = batch.shape()[1..].to_vec();
    (0..b)
        .map(|i| batch.slice_leading(i, 1)?.reshape(inner.clone()))
        .collect()
}

/// Logits `[B×K]` for `batch`.
pub fn forward(model: &Model, batch: &Tensor) -> Result<Tensor> {
    model.forward(batch)
}

/// Average-pools a frame's `rows×cols` token grid with a square window.
pub fn pooling_reduction(tokens: &Tensor, rows: usize, cols: usize, window: usize) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != rows * cols {
        return Err(Error::config(
            "reduction",
            format!("{:?} tokens do not form a {rows}x{cols} grid", s),
        ));
    }
    if window == 0 || !rows.is_multiple_of(window) || !cols.is_multiple_of(window) {
        return Err(Error::config(
            "reduction",
            format!("{rows}x{cols} grid is not divisible by a {window}x{window} window"),
        ));
    }
    let mut g = Graph::new();
    let m = g.leaf(cell_mean_matrix(rows, cols, rows / window, cols / window));
    let x = g.leaf(tokens.clone());
    let y = g.matmul(m, x)?;
    Ok(g.value(y).clone())
}
