//! Caption-conditioned velocity network.
//!
//! A stack of transformer blocks over feature frames. Each block is modulated
//! (shift/scale/gate from an adaptive affine map of `c_t`, zero-initialized),
//! runs rotary self-attention over the frames, adds a `tanh(α)`-gated
//! cross-attention to the caption tokens, and finishes with a residual MLP.
//!
//! Captions go through a small stand-in encoder: token and position
//! embeddings, whose masked mean is the pooled vector, and a two-layer MLP
//! producing the token sequence `c` that every block attends to.
//!
//! All parameters live in one flat list so the same forward pass can run on
//! the model's own storage or on arbitrary graph variables (gradient checks).

mod checkpoint;
mod optim;
pub mod text;
mod train;


use std::f64::consts::LN_10;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{self, FlowError, VelocityField};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, load_optimizer, save_optimizer, CHECKPOINT_VERSION};
pub use optim::{AdamW, AdamWConfig};
pub use text::Vocabulary;
pub use train::TrainItem;

/// Rotary embedding base.
pub const ROPE_BASE: f64 = 10_000.0;
const NORM_EPS: f64 = 1e-6;
/// Additive logit for padded caption tokens.
const MASKED: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown token `{token}` at byte {offset}")]
    UnknownToken { token: String, offset: usize },
    #[error("caption is empty")]
    EmptyCaption,
    #[error("{what} has {actual} entries, limit is {limit}")]
    TooLong {
        what: &'static str,
        actual: usize,
        limit: usize,
    },
    #[error("bad batch: {0}")]
    Batch(String),
    #[error("non-finite {0}; step aborted, parameters unchanged")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub feature_channels: usize,
    pub vocab_size: usize,
    pub max_frames: usize,
    pub time_embed_dim: usize,
    /// MLP hidden width as a multiple of `hidden_dim`.
    pub mlp_ratio: usize,
    /// Longest caption, in tokens.
    pub max_tokens: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 blocks, hidden 256, 8 heads, 64 channels,
    /// 250 frames (10 s at 25 frames/s).
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            num_blocks: 4,
            hidden_dim: 256,
            num_heads: 8,
            feature_channels: 64,
            vocab_size,
            max_frames: 250,
            time_embed_dim: 128,
            mlp_ratio: 4,
            max_tokens: 128,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_blocks", self.num_blocks),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("feature_channels", self.feature_channels),
            ("vocab_size", self.vocab_size),
            ("max_frames", self.max_frames),
            ("time_embed_dim", self.time_embed_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("max_tokens", self.max_tokens),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "head_dim {} must be even for rotary embedding",
                self.head_dim()
            )));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(ModelError::Config("time_embed_dim must be even".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden_dim;
        let linear = |i: usize, o: usize| i * o + o;
        let text = self.vocab_size * h + self.max_tokens * h + 2 * linear(h, h);
        let time = linear(self.time_embed_dim, h) + linear(h, h);
        let block = linear(h, 6 * h)
            + linear(h, 3 * h)
            + 2 * linear(h, h)
            + linear(h, h)
            + linear(h, self.mlp_ratio * h)
            + linear(self.mlp_ratio * h, h)
            + 1;
        let head = linear(h, 2 * h) + linear(h, self.feature_channels);
        text + time + linear(self.feature_channels, h) + self.num_blocks * block + head
    }

    pub(crate) fn to_pairs(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("num_blocks", self.num_blocks),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("feature_channels", self.feature_channels),
            ("vocab_size", self.vocab_size),
            ("max_frames", self.max_frames),
            ("time_embed_dim", self.time_embed_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("max_tokens", self.max_tokens),
        ]
    }

    /// Sets a field by name; returns false for unknown names.
    pub fn set(&mut self, key: &str, value: usize) -> bool {
        let slot = match key {
            "num_blocks" => &mut self.num_blocks,
            "hidden_dim" => &mut self.hidden_dim,
            "num_heads" => &mut self.num_heads,
            "feature_channels" => &mut self.feature_channels,
            "vocab_size" => &mut self.vocab_size,
            "max_frames" => &mut self.max_frames,
            "time_embed_dim" => &mut self.time_embed_dim,
            "mlp_ratio" => &mut self.mlp_ratio,
            "max_tokens" => &mut self.max_tokens,
            _ => return false,
        };
        *slot = value;
        true
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Normal(f64),
    Zeros,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    ada: Linear,
    qkv: Linear,
    text_k: Linear,
    text_v: Linear,
    out: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
    gate: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    token: usize,
    position: usize,
    text_in: Linear,
    text_out: Linear,
    time_in: Linear,
    time_out: Linear,
    input: Linear,
    blocks: Vec<BlockLayout>,
    final_ada: Linear,
    output: Linear,
}

/// Registers parameters in a fixed order; the callback returns the new index.
struct Builder<F: FnMut(String, Vec<usize>, Init) -> usize>(F);

impl<F: FnMut(String, Vec<usize>, Init) -> usize> Builder<F> {
    fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> usize {
        (self.0)(name.into(), shape, init)
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, init: Init) -> Linear {
        Linear {
            w: self.add(format!("{name}.w"), vec![i, o], init),
            b: self.add(format!("{name}.b"), vec![o], Init::Zeros),
        }
    }
}

impl Layout {
    fn build(cfg: &ModelConfig, add: impl FnMut(String, Vec<usize>, Init) -> usize) -> Self {
        let h = cfg.hidden_dim;
        let mut p = Builder(add);
        let token = p.add("text.token", vec![cfg.vocab_size, h], Init::Normal(1.0));
        let position = p.add("text.position", vec![cfg.max_tokens, h], Init::Normal(0.1));
        let text_in = p.linear("text.mlp_in", h, h, Init::Xavier);
        let text_out = p.linear("text.mlp_out", h, h, Init::Xavier);
        let time_in = p.linear("time.mlp_in", cfg.time_embed_dim, h, Init::Xavier);
        let time_out = p.linear("time.mlp_out", h, h, Init::Xavier);
        let input = p.linear("input", cfg.feature_channels, h, Init::Xavier);
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                let n = |s: &str| format!("blocks.{i}.{s}");
                BlockLayout {
                    ada: p.linear(&n("ada"), h, 6 * h, Init::Zeros),
                    qkv: p.linear(&n("qkv"), h, 3 * h, Init::Xavier),
                    text_k: p.linear(&n("text_k"), h, h, Init::Xavier),
                    text_v: p.linear(&n("text_v"), h, h, Init::Xavier),
                    gate: p.add(n("gate"), vec![1], Init::Zeros),
                    out: p.linear(&n("out"), h, h, Init::Xavier),
                    mlp_in: p.linear(&n("mlp_in"), h, cfg.mlp_ratio * h, Init::Xavier),
                    mlp_out: p.linear(&n("mlp_out"), cfg.mlp_ratio * h, h, Init::Xavier),
                }
            })
            .collect();
        let final_ada = p.linear("final.ada", h, 2 * h, Init::Zeros);
        let output = p.linear("output", h, cfg.feature_channels, Init::Zeros);
        Self {
            token,
            position,
            text_in,
            text_out,
            time_in,
            time_out,
            input,
            blocks,
            final_ada,
            output,
        }
    }
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape).expect("positive shape"),
        Init::Normal(std) => Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .expect("positive shape"),
        Init::Xavier => {
            let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-a..a)).expect("positive shape")
        }
    }
}

/// Text-derived conditioning for one caption at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    /// Token sequence after the text MLP, `[tokens, hidden]`.
    pub c: Tensor,
    /// Token mean of the embeddings, `[hidden]`.
    pub pooled: Tensor,
    /// Time embedding plus `pooled`, `[hidden]`.
    pub c_t: Tensor,
}

/// Per-batch conditioning input.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    /// No caption: the cross-attention term is skipped and `pooled` is zero.
    Unconditional,
    /// One token-id list per batch item.
    Captions(Vec<Vec<usize>>),
}

/// Caption tokens prepared for attention inside a graph.
#[derive(Clone)]
pub struct TextContext<'g> {
    /// `[batch, tokens, hidden]`.
    pub c: Var<'g>,
    /// `[batch, hidden]`.
    pub pooled: Var<'g>,
    /// Additive key mask, `[batch, tokens]`: 0 for real tokens, large negative for padding.
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
    layout: Layout,
}

fn linear<'g>(x: Var<'g>, p: &[Var<'g>], l: Linear) -> Result<Var<'g>> {
    Ok(x.matmul(p[l.w])?.add_bias(p[l.b])?)
}

/// Modulation rows `[batch or 1, h]` broadcast over frames to `[batch, frames, h]`.
fn per_frame(rows: Var<'_>, batch: usize, frames: usize) -> Result<Var<'_>> {
    let s = rows.shape();
    if s[0] == batch {
        return Ok(rows.expand(1, frames)?);
    }
    Ok(rows.reshape(&[s[1]])?.expand(0, frames)?.expand(0, batch)?)
}

/// `x·(1 + scale) + shift` with per-item vectors broadcast over frames.
fn modulate<'g>(x: Var<'g>, shift: Var<'g>, scale: Var<'g>) -> Result<Var<'g>> {
    Ok(x.add(x.mul(scale)?)?.add(shift)?)
}

/// Layer normalization without learned affine parameters.
fn plain_norm<'g>(g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let n = *x.shape().last().expect("rank >= 1");
    let ones = g.constant(Tensor::full(&[n], 1.0)?);
    let zeros = g.constant(Tensor::zeros(&[n])?);
    Ok(x.layer_norm(ones, zeros, NORM_EPS)?)
}

/// `[batch, len, hidden]` → `[batch, heads, len, head_dim]`.
fn split_heads(x: Var<'_>, heads: usize) -> Result<Var<'_>> {
    let s = x.shape();
    Ok(x.reshape(&[s[0], s[1], heads, s[2] / heads])?
        .permute(&[0, 2, 1, 3])?)
}

fn merge_heads(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    Ok(x.permute(&[0, 2, 1, 3])?
        .reshape(&[s[0], s[2], s[1] * s[3]])?)
}

/// Applies rotary position embedding (base 10 000) to `[..., frames, d]`.
pub fn rope_apply<'g>(x: Var<'g>, positions: &[f64]) -> Result<Var<'g>> {
    Ok(x.rotary(positions, ROPE_BASE)?)
}

/// Audio self-attention plus gated text cross-attention, all `[batch, heads, ·, d]`:
///
/// `softmax(ρ(q)ρ(k)ᵀ/√d)·v + tanh(α)·softmax(ρ(q)c_kᵀ/√d + mask)·c_v`
///
/// `text` carries `(c_k, c_v, mask)`; `q` and `k` must already be rotated.
pub fn attention<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    text: Option<(Var<'g>, Var<'g>, &Tensor)>,
    alpha: Var<'g>,
) -> Result<Var<'g>> {
    let g = q.graph();
    let d = *q.shape().last().expect("rank 4");
    let inv = 1.0 / (d as f64).sqrt();
    let audio = q.matmul_t(k)?.scale(inv).softmax().matmul(v)?;
    let Some((ck, cv, mask)) = text else {
        return Ok(audio);
    };
    let logits = q.matmul_t(ck)?.scale(inv);
    let s = logits.shape();
    let (b, heads, frames, tokens) = (s[0], s[1], s[2], s[3]);
    if mask.shape() != [b, tokens] {
        return Err(TensorError::ShapeMismatch {
            op: "attention mask",
            lhs: s,
            rhs: mask.shape().to_vec(),
        }
        .into());
    }
    let full = Tensor::from_fn(&s, |i| {
        mask.data()[(i / (heads * frames * tokens)) * tokens + i % tokens]
    })?;
    let cross = logits.add(g.constant(full))?.softmax().matmul(cv)?;
    Ok(audio.add(cross.scale_by(alpha.tanh())?)?)
}

fn time_features(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[t.len(), dim], |i| {
        let (b, j) = (i / dim, i % dim);
        let freq = (-(4.0 * LN_10) * (j % half) as f64 / half as f64).exp();
        let arg = 1000.0 * t[b] * freq;
        if j < half {
            arg.cos()
        } else {
            arg.sin()
        }
    })
    .expect("positive shape")
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(ModelError::Config(format!(
                "vocab_size {} does not match vocabulary of {} words",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let layout = Layout::build(&config, |name, shape, init| {
            names.push(name);
            params.push(Arc::new(init_tensor(&shape, init, &mut rng)));
            params.len() - 1
        });
        Ok(Self {
            config,
            vocab,
            names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameters(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub(crate) fn parameters_mut(&mut self) -> &mut [Arc<Tensor>] {
        &mut self.params
    }

    /// Current `tanh(α)` of every block's cross-attention gate.
    pub fn gate_openings(&self) -> Vec<f64> {
        self.layout
            .blocks
            .iter()
            .map(|b| self.params[b.gate].data()[0].tanh())
            .collect()
    }

    /// Adds `N(0, scale²)` noise to every parameter, including zero-initialized
    /// gates; used to exercise all gradient paths away from the initial point.
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            for v in Arc::make_mut(p).data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += scale * z;
            }
        }
    }

    /// Sets one named parameter; shapes must agree.
    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ModelError::Config(format!("no parameter named {name}")))?;
        if value.shape() != self.params[i].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_parameter",
                lhs: self.params[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            }
            .into());
        }
        self.params[i] = Arc::new(value);
        Ok(())
    }

    pub fn tokenize(&self, caption: &str) -> Result<Vec<usize>> {
        let ids = self.vocab.encode(caption)?;
        if ids.len() > self.config.max_tokens {
            return Err(ModelError::TooLong {
                what: "caption",
                actual: ids.len(),
                limit: self.config.max_tokens,
            });
        }
        Ok(ids)
    }

    /// Binds every parameter as a gradient-receiving leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.params.iter().map(|p| g.param(p)).collect()
    }

    /// Embeds and transforms a batch of token lists, padding to the longest.
    pub fn text_context<'g>(
        &self,
        g: &'g Graph,
        p: &[Var<'g>],
        tokens: &[Vec<usize>],
    ) -> Result<TextContext<'g>> {
        let lay = &self.layout;
        let h = self.config.hidden_dim;
        let b = tokens.len();
        let len = tokens.iter().map(Vec::len).max().unwrap_or(0);
        if b == 0 || len == 0 {
            return Err(ModelError::EmptyCaption);
        }
        if len > self.config.max_tokens {
            return Err(ModelError::TooLong {
                what: "caption",
                actual: len,
                limit: self.config.max_tokens,
            });
        }
        let mut ids = Vec::with_capacity(b * len);
        let mut pool = vec![0.0; b * len];
        let mut mask = vec![MASKED; b * len];
        for (i, row) in tokens.iter().enumerate() {
            if row.is_empty() {
                return Err(ModelError::EmptyCaption);
            }
            for j in 0..len {
                ids.push(row.get(j).copied().unwrap_or(text::PAD));
                if j < row.len() {
                    pool[i * len + j] = 1.0 / row.len() as f64;
                    mask[i * len + j] = 0.0;
                }
            }
        }
        let positions: Vec<usize> = (0..b * len).map(|i| i % len).collect();
        let emb = g
            .embedding(p[lay.token], &ids)?
            .add(g.embedding(p[lay.position], &positions)?)?
            .reshape(&[b, len, h])?;
        let pooled = g
            .constant(Tensor::new(&[b, 1, len], pool)?)
            .matmul(emb)?
            .reshape(&[b, h])?;
        let c = linear(linear(emb, p, lay.text_in)?.silu(), p, lay.text_out)?;
        Ok(TextContext {
            c,
            pooled,
            mask: Tensor::new(&[b, len], mask)?,
        })
    }

    /// Sinusoidal features of `t` through a two-layer MLP, `[batch, hidden]`.
    pub fn time_embedding<'g>(&self, g: &'g Graph, p: &[Var<'g>], t: &[f64]) -> Result<Var<'g>> {
        let lay = &self.layout;
        let feats = g.constant(time_features(t, self.config.time_embed_dim));
        linear(linear(feats, p, lay.time_in)?.silu(), p, lay.time_out)
    }

    /// One transformer block on `x: [batch, frames, hidden]` given `c_t: [batch, hidden]`.
    pub fn dit_block<'g>(
        &self,
        p: &[Var<'g>],
        index: usize,
        x: Var<'g>,
        c_t: Var<'g>,
        text: Option<&TextContext<'g>>,
    ) -> Result<Var<'g>> {
        let g = x.graph();
        let lay = self.layout.blocks.get(index).ok_or_else(|| {
            ModelError::Config(format!(
                "block {index} out of range ({} blocks)",
                self.config.num_blocks
            ))
        })?;
        let h = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let s = x.shape();
        if s.len() != 3 || s[2] != h || (c_t.shape() != [s[0], h] && c_t.shape() != [1, h]) {
            return Err(TensorError::ShapeMismatch {
                op: "dit_block",
                lhs: s,
                rhs: c_t.shape(),
            }
            .into());
        }
        let frames = s[1];
        let ada = linear(c_t.silu(), p, lay.ada)?;
        let chunk = |i: usize| per_frame(ada.narrow(1, i * h, h)?, s[0], frames);

        let xm = modulate(plain_norm(g, x)?, chunk(0)?, chunk(1)?)?;
        let qkv = linear(xm, p, lay.qkv)?;
        let positions: Vec<f64> = (0..frames).map(|f| f as f64).collect();
        let q = rope_apply(split_heads(qkv.narrow(2, 0, h)?, heads)?, &positions)?;
        let k = rope_apply(split_heads(qkv.narrow(2, h, h)?, heads)?, &positions)?;
        let v = split_heads(qkv.narrow(2, 2 * h, h)?, heads)?;
        let text_kv = match text {
            Some(t) => Some((
                split_heads(linear(t.c, p, lay.text_k)?, heads)?,
                split_heads(linear(t.c, p, lay.text_v)?, heads)?,
                &t.mask,
            )),
            None => None,
        };
        let a = attention(q, k, v, text_kv, p[lay.gate])?;
        let a = linear(merge_heads(a)?, p, lay.out)?;
        let x = x.add(a.mul(chunk(2)?)?)?;

        let xm = modulate(plain_norm(g, x)?, chunk(3)?, chunk(4)?)?;
        let m = linear(linear(xm, p, lay.mlp_in)?.silu(), p, lay.mlp_out)?;
        Ok(x.add(m.mul(chunk(5)?)?)?)
    }

    /// Velocity for `z_t: [batch, frames, channels]` at per-item times `t`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        p: &[Var<'g>],
        z_t: Var<'g>,
        t: &[f64],
        cond: &Conditioning,
    ) -> Result<Var<'g>> {
        let cfg = &self.config;
        let lay = &self.layout;
        let s = z_t.shape();
        if s.len() != 3 || s[2] != cfg.feature_channels || s[0] != t.len() {
            return Err(ModelError::Batch(format!(
                "expected [batch={}, frames, {}] features, got {s:?}",
                t.len(),
                cfg.feature_channels
            )));
        }
        if s[1] > cfg.max_frames {
            return Err(ModelError::TooLong {
                what: "feature sequence",
                actual: s[1],
                limit: cfg.max_frames,
            });
        }
        let (b, frames) = (s[0], s[1]);
        let text = match cond {
            Conditioning::Unconditional => None,
            Conditioning::Captions(tokens) => {
                if tokens.len() != b {
                    return Err(ModelError::Batch(format!(
                        "{} captions for {b} items",
                        tokens.len()
                    )));
                }
                Some(self.text_context(g, p, tokens)?)
            }
        };
        // one time and no caption: a single modulation row serves the whole batch
        let shared = text.is_none() && !t.is_empty() && t.windows(2).all(|w| w[0] == w[1]);
        let temb = self.time_embedding(g, p, if shared { &t[..1] } else { t })?;
        let c_t = match &text {
            Some(tc) => temb.add(tc.pooled)?,
            None => temb,
        };
        let mut x = linear(z_t, p, lay.input)?;
        for i in 0..cfg.num_blocks {
            x = self.dit_block(p, i, x, c_t, text.as_ref())?;
        }
        let h = cfg.hidden_dim;
        let ada = linear(c_t.silu(), p, lay.final_ada)?;
        let shift = per_frame(ada.narrow(1, 0, h)?, b, frames)?;
        let scale = per_frame(ada.narrow(1, h, h)?, b, frames)?;
        let x = modulate(plain_norm(g, x)?, shift, scale)?;
        linear(x, p, lay.output)
    }

    /// Value-only velocity for a batch `[batch, frames, channels]` at a shared time.
    pub fn velocity(&self, z_t: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor> {
        let g = Graph::new();
        let p: Vec<Var<'_>> = self.params.iter().map(|t| g.param(t)).collect();
        let b = z_t.shape().first().copied().unwrap_or(0);
        let v = self.forward(&g, &p, g.constant(z_t.clone()), &vec![t; b], cond)?;
        let out = v.value();
        if !out.is_finite() {
            return Err(ModelError::NonFinite("velocity"));
        }
        Ok(Tensor::clone(&out))
    }

    /// Single-item velocity for `z_t: [frames, channels]`.
    pub fn forward_velocity(&self, z_t: &Tensor, t: f64, caption: Option<&str>) -> Result<Tensor> {
        let cond = match caption {
            Some(c) => Conditioning::Captions(vec![self.tokenize(c)?]),
            None => Conditioning::Unconditional,
        };
        let s = z_t.shape().to_vec();
        let mut batch = vec![1];
        batch.extend_from_slice(&s);
        let v = self.velocity(&z_t.clone().reshaped(&batch)?, t, &cond)?;
        Ok(v.reshaped(&s)?)
    }

    /// Conditioning vectors for one caption at time `t`.
    pub fn encode_text(&self, caption: &str, t: f64) -> Result<ConditionBundle> {
        let tokens = self.tokenize(caption)?;
        let n = tokens.len();
        let h = self.config.hidden_dim;
        let g = Graph::new();
        let p = self.bind(&g);
        let tc = self.text_context(&g, &p, &[tokens])?;
        let c_t = self.time_embedding(&g, &p, &[t])?.add(tc.pooled)?;
        Ok(ConditionBundle {
            c: Tensor::clone(&tc.c.value()).reshaped(&[n, h])?,
            pooled: Tensor::clone(&tc.pooled.value()).reshaped(&[h])?,
            c_t: Tensor::clone(&c_t.value()).reshaped(&[h])?,
        })
    }

    /// Integrates the learned flow from `eps: [batch, frames, channels]`.
    pub fn sample(
        &self,
        eps: &Tensor,
        steps: usize,
        cond: &Conditioning,
    ) -> Result<Tensor, FlowError> {
        flow::sample_ode(self, eps, steps, cond)
    }
}

impl VelocityField for Model {
    type Condition = Conditioning;

    fn velocity(&self, x: &Tensor, t: f64, cond: &Conditioning) -> flow::Result<Tensor> {
        match Model::velocity(self, x, t, cond) {
            Ok(v) => Ok(v),
            // report non-finite output through the sampler, which knows the step
            Err(ModelError::NonFinite(_)) => Ok(Tensor::full(x.shape(), f64::NAN)?),
            Err(e) => Err(FlowError::Field(e.to_string())),
        }
    }
}
