use biofuse_tensor::{Graph, Mask, Tensor, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{Bound, ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

/// Per-token modality tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Cls,
    /// Index of the input stream the token was embedded from.
    Stream(usize),
}

/// Tokens `[batch, T, E]` on a tape together with their modality tags.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    tags: Vec<Tag>,
    pub positional: bool,
}

impl TokenSequence {
    pub fn new(g: &Graph, tokens: Var, tags: Vec<Tag>, positional: bool) -> Result<Self> {
        let shape = g.shape(tokens);
        if shape.len() != 3 || shape[1] != tags.len() {
            return Err(Error::usage(format!(
                "token tensor {shape:?} does not match {} tags",
                tags.len()
            )));
        }
        check_tags(&tags)?;
        Ok(Self { tokens, tags, positional })
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Exactly one CLS, in front.
pub fn check_tags(tags: &[Tag]) -> Result<()> {
    let cls = tags.iter().filter(|t| **t == Tag::Cls).count();
    if cls != 1 || tags.first() != Some(&Tag::Cls) {
        return Err(Error::usage(format!(
            "token sequence needs exactly one CLS at position 0, found {cls} in {} tokens",
            tags.len()
        )));
    }
    Ok(())
}

/// Supplies attention-edge masks at inference. Implementations must be pure:
/// the same arguments always give the same mask.
pub trait AttentionHook: Sync {
    /// Mask (`true` = silenced) of shape `[heads, T, T]` for attention layer
    /// `layer` (1-based, model-wide numbering), or `None` to leave it untouched.
    fn edge_mask(&self, layer: usize, heads: usize, tags: &[Tag]) -> Result<Option<Mask>>;
}

/// State threaded through one forward pass.
pub struct Pass<'a> {
    pub training: bool,
    pub rng: &'a mut dyn RngCore,
    pub hook: Option<&'a dyn AttentionHook>,
    /// Keep attention weights and sublayer outputs of every layer.
    pub trace: bool,
}

impl<'a> Pass<'a> {
    pub fn eval(rng: &'a mut dyn RngCore) -> Self {
        Self {
            training: false,
            rng,
            hook: None,
            trace: false,
        }
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Self {
            training: true,
            rng,
            hook: None,
            trace: false,
        }
    }

    pub fn with_hook(mut self, hook: Option<&'a dyn AttentionHook>) -> Self {
        self.hook = hook;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = true;
        self
    }

    pub(crate) fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Result<Var> {
        Ok(g.dropout(x, rate, &mut *self.rng, self.training)?)
    }
}

/// One attention layer as seen by a probe.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub layer: usize,
    /// Input stream for per-stream encoders, `None` for shared stacks.
    pub stream: Option<usize>,
    pub tags: Vec<Tag>,
    /// Softmax weights `[batch, heads, T, T]`.
    pub weights: Var,
    /// Attention sublayer output `[batch, T, E]` before the residual.
    pub output: Var,
    pub mask: Option<Mask>,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng),
            b: store.uniform(format!("{name}.b"), &[fan_out], fan_in, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        Ok(g.add_broadcast(y, p.var(self.b))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)?)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed: usize,
        heads: usize,
        ffn: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), embed, embed, rng),
            k: Linear::new(store, &format!("{name}.k"), embed, embed, rng),
            v: Linear::new(store, &format!("{name}.v"), embed, embed, rng),
            o: Linear::new(store, &format!("{name}.o"), embed, embed, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), embed),
            ff1: Linear::new(store, &format!("{name}.ff1"), embed, ffn, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ffn, embed, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), embed),
            dropout,
        }
    }

    /// `[B, T, E] → [B·H, T, E/H]`
    fn split_heads(&self, g: &mut Graph, x: Var, b: usize, t: usize, dh: usize) -> Result<Var> {
        let x = g.reshape(x, &[b, t, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[b * self.heads, t, dh])?)
    }

    /// Returns the new tokens, the attention weights `[B, H, T, T]` and the
    /// attention sublayer output.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mask: Option<&Mask>,
        pass: &mut Pass<'_>,
    ) -> Result<(Var, Var, Var)> {
        let &[b, t, e] = g.shape(x) else {
            return Err(Error::usage(format!("encoder input must be [B, T, E], got {:?}", g.shape(x))));
        };
        let h = self.heads;
        if let Some(m) = mask {
            if m.shape() != [h, t, t] {
                return Err(Error::usage(format!(
                    "attention mask {:?} does not match [{h}, {t}, {t}]",
                    m.shape()
                )));
            }
        }
        let dh = e / h;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let q = self.split_heads(g, q, b, t, dh)?;
        let k = self.split_heads(g, k, b, t, dh)?;
        let v = self.split_heads(g, v, b, t, dh)?;
        let s = g.batch_matmul(q, k, true)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
        let s = g.reshape(s, &[b, h, t, t])?;
        let a = g.masked_softmax(s, mask)?;
        let a3 = g.reshape(a, &[b * h, t, t])?;
        let c = g.batch_matmul(a3, v, false)?;
        let c = g.reshape(c, &[b, h, t, dh])?;
        let c = g.permute(c, &[0, 2, 1, 3])?;
        let c = g.reshape(c, &[b, t, e])?;
        let attn_out = self.o.forward(g, p, c)?;
        let d = pass.dropout(g, attn_out, self.dropout)?;
        let x = g.add(x, d)?;
        let x = self.ln1.forward(g, p, x)?;
        let f = self.ff1.forward(g, p, x)?;
        let f = g.gelu(f)?;
        let f = self.ff2.forward(g, p, f)?;
        let f = pass.dropout(g, f, self.dropout)?;
        let y = g.add(x, f)?;
        let y = self.ln2.forward(g, p, y)?;
        Ok((y, a, attn_out))
    }
}

/// Runs `layers` over `seq`, numbering them from `first_layer`, asking the
/// hook for masks and recording traces when requested.
pub fn run_stack(
    g: &mut Graph,
    p: &Bound,
    layers: &[EncoderLayer],
    mut seq: TokenSequence,
    first_layer: usize,
    stream: Option<usize>,
    pass: &mut Pass<'_>,
    traces: &mut Vec<AttentionTrace>,
) -> Result<TokenSequence> {
    for (i, layer) in layers.iter().enumerate() {
        let number = first_layer + i;
        let mask = match pass.hook {
            Some(hook) => hook.edge_mask(number, layer.heads, seq.tags())?,
            None => None,
        };
        let (y, weights, output) = layer
            .forward(g, p, seq.tokens, mask.as_ref(), pass)
            .map_err(|e| e.context(format!("attention layer {number}")))?;
        if pass.trace {
            traces.push(AttentionTrace {
                layer: number,
                stream,
                tags: seq.tags.clone(),
                weights,
                output,
                mask,
            });
        }
        seq.tokens = y;
    }
    Ok(seq)
}

/// Fixed sinusoidal encoding `[positions, dim]`.
pub fn sinusoidal_encoding(positions: usize, dim: usize) -> Tensor {
    Tensor::from_fn([positions, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let freq = 10000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}
