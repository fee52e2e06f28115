use biofuse_tensor::{Graph, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::config::{Family, InputSpec, ModelConfig, TokenMode};
use crate::model::layers::{run_stack, sinusoidal_encoding, AttentionTrace, EncoderLayer, Linear, Pass, Tag, TokenSequence};
use crate::model::params::{Bound, ParamId, ParamStore};

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Logits used for reported accuracy (the CLS head for IsoNet).
    pub logits: Var,
    /// IsoNet's head on the mean of non-CLS tokens.
    pub avg_logits: Option<Var>,
    pub traces: Vec<AttentionTrace>,
}

#[derive(Clone, Debug)]
struct MlpBranch {
    l1: Linear,
    l2: Linear,
}

#[derive(Clone, Debug)]
struct Mmmlp {
    branches: Vec<MlpBranch>,
    shared: Linear,
    out: Linear,
}

/// Tubelet embedding, CLS and encoder stack for one stream.
#[derive(Clone, Debug)]
struct StreamEncoder {
    embed: Linear,
    cls: ParamId,
    layers: Vec<EncoderLayer>,
    patches: usize,
}

#[derive(Clone, Debug)]
struct FusionHead {
    fuse: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Mmt {
    streams: Vec<StreamEncoder>,
    head: FusionHead,
}

#[derive(Clone, Debug)]
enum HierHead {
    Stage2 { cls: ParamId, layers: Vec<EncoderLayer>, out: Linear },
    Fusion(FusionHead),
}

#[derive(Clone, Debug)]
struct HierT {
    streams: Vec<StreamEncoder>,
    head: HierHead,
}

#[derive(Clone, Debug)]
struct IsoNet {
    /// `[C, W, E]`, one map per channel.
    embed_w: ParamId,
    /// `[C, E]`
    embed_b: ParamId,
    cls: ParamId,
    layers: Vec<EncoderLayer>,
    cls_head: Linear,
    avg_head: Linear,
    /// Tubelets per channel; 1 in per-channel mode.
    windows: usize,
    width: usize,
}

#[derive(Clone, Debug)]
enum Arch {
    Mmmlp(Mmmlp),
    Mmt(Mmt),
    HierT(HierT),
    IsoNet(IsoNet),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub inputs: InputSpec,
    pub params: ParamStore,
    arch: Arch,
}

fn stream_encoder(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    name: &str,
    channels: usize,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<StreamEncoder> {
    let patches = samples / cfg.patch;
    if patches == 0 {
        return Err(Error::config(
            "model.patch",
            format!("stream `{name}` has {samples} samples, fewer than one tubelet of {}", cfg.patch),
        ));
    }
    let e = cfg.embed_dim;
    let embed = Linear::new(store, &format!("{name}.embed"), channels * cfg.patch, e, rng);
    let cls = store.uniform(format!("{name}.cls"), &[e], e, rng);
    let layers = (0..cfg.layers)
        .map(|l| EncoderLayer::new(store, &format!("{name}.layer{}", l + 1), e, cfg.heads, cfg.ffn_dim, cfg.dropout, rng))
        .collect();
    Ok(StreamEncoder { embed, cls, layers, patches })
}

fn fusion_head(store: &mut ParamStore, cfg: &ModelConfig, streams: usize, classes: usize, rng: &mut impl Rng) -> FusionHead {
    FusionHead {
        fuse: Linear::new(store, "fusion", streams * cfg.embed_dim, cfg.fusion_dim, rng),
        out: Linear::new(store, "classifier", cfg.fusion_dim, classes, rng),
    }
}

impl Model {
    /// Builds a freshly initialised model. Parameter draws follow creation
    /// order, so the same rng state always gives the same weights.
    pub fn new(config: ModelConfig, inputs: InputSpec, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if inputs.streams.is_empty() || inputs.streams.len() > 2 {
            return Err(Error::config("streams", format!("need 1 or 2 input streams, got {}", inputs.streams.len())));
        }
        if inputs.classes < 2 {
            return Err(Error::config("classes", format!("need at least 2 classes, got {}", inputs.classes)));
        }
        let k = inputs.classes;
        let mut store = ParamStore::new();
        let arch = match config.family {
            Family::Mmmlp => {
                let h = config.mlp_hidden;
                let branches = inputs
                    .streams
                    .iter()
                    .map(|s| MlpBranch {
                        l1: Linear::new(&mut store, &format!("{}.l1", s.name), s.channels * s.samples, h, rng),
                        l2: Linear::new(&mut store, &format!("{}.l2", s.name), h, h, rng),
                    })
                    .collect();
                let shared = Linear::new(&mut store, "shared", inputs.streams.len() * h, h, rng);
                let out = Linear::new(&mut store, "classifier", h, k, rng);
                Arch::Mmmlp(Mmmlp { branches, shared, out })
            }
            Family::Mmt => {
                let streams = inputs
                    .streams
                    .iter()
                    .map(|s| stream_encoder(&mut store, &config, &s.name, s.channels, s.samples, rng))
                    .collect::<Result<Vec<_>>>()?;
                let head = fusion_head(&mut store, &config, streams.len(), k, rng);
                Arch::Mmt(Mmt { streams, head })
            }
            Family::HierT => {
                let streams = inputs
                    .streams
                    .iter()
                    .map(|s| stream_encoder(&mut store, &config, &s.name, s.channels, s.samples, rng))
                    .collect::<Result<Vec<_>>>()?;
                let head = if config.stage2_layers == 0 {
                    HierHead::Fusion(fusion_head(&mut store, &config, streams.len(), k, rng))
                } else {
                    let e = config.embed_dim;
                    let cls = store.uniform("stage2.cls", &[e], e, rng);
                    let first = config.layers + 1;
                    let layers = (0..config.stage2_layers)
                        .map(|l| {
                            let name = format!("stage2.layer{}", first + l);
                            EncoderLayer::new(&mut store, &name, e, config.heads, config.ffn_dim, config.dropout, rng)
                        })
                        .collect();
                    let out = Linear::new(&mut store, "classifier", e, k, rng);
                    HierHead::Stage2 { cls, layers, out }
                };
                Arch::HierT(HierT { streams, head })
            }
            Family::IsoNet => {
                let samples = inputs.streams[0].samples;
                if let Some(s) = inputs.streams.iter().find(|s| s.samples != samples) {
                    return Err(Error::config(
                        "streams",
                        format!("IsoNet needs equal window lengths, `{}` has {} vs {samples}", s.name, s.samples),
                    ));
                }
                let (windows, width) = match config.isonet_tokens {
                    TokenMode::PerChannel => (1, samples),
                    TokenMode::Windowed => (samples / config.patch, config.patch),
                };
                if windows == 0 {
                    return Err(Error::config("model.patch", format!("{samples} samples is shorter than one tubelet")));
                }
                let c = inputs.total_channels();
                let e = config.embed_dim;
                let embed_w = store.uniform("embed.w", &[c, width, e], width, rng);
                let embed_b = store.uniform("embed.b", &[c, e], width, rng);
                let cls = store.uniform("cls", &[e], e, rng);
                let layers = (0..config.layers)
                    .map(|l| EncoderLayer::new(&mut store, &format!("layer{}", l + 1), e, config.heads, config.ffn_dim, config.dropout, rng))
                    .collect();
                let cls_head = Linear::new(&mut store, "cls_head", e, k, rng);
                let avg_head = Linear::new(&mut store, "avg_head", e, k, rng);
                Arch::IsoNet(IsoNet {
                    embed_w,
                    embed_b,
                    cls,
                    layers,
                    cls_head,
                    avg_head,
                    windows,
                    width,
                })
            }
        };
        Ok(Self {
            config,
            inputs,
            params: store,
            arch,
        })
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn classes(&self) -> usize {
        self.inputs.classes
    }

    /// Number of attention layers addressable by a hook.
    pub fn attention_layers(&self) -> usize {
        match &self.arch {
            Arch::Mmmlp(_) => 0,
            Arch::Mmt(_) | Arch::IsoNet(_) => self.config.layers,
            Arch::HierT(h) => match &h.head {
                HierHead::Stage2 { layers, .. } => self.config.layers + layers.len(),
                HierHead::Fusion(_) => self.config.layers,
            },
        }
    }

    /// Parameter ids of IsoNet's mean-token head.
    pub fn avg_head_params(&self) -> Option<[ParamId; 2]> {
        match &self.arch {
            Arch::IsoNet(n) => Some([n.avg_head.w, n.avg_head.b]),
            _ => None,
        }
    }

    /// Token tags of each attention sequence the model builds, in layer order.
    pub fn token_tags(&self) -> Vec<Vec<Tag>> {
        match &self.arch {
            Arch::Mmmlp(_) => Vec::new(),
            Arch::Mmt(m) => m.streams.iter().enumerate().map(|(s, enc)| stream_tags(s, enc.patches)).collect(),
            Arch::HierT(h) => {
                let mut out: Vec<Vec<Tag>> =
                    h.streams.iter().enumerate().map(|(s, enc)| stream_tags(s, enc.patches)).collect();
                if matches!(h.head, HierHead::Stage2 { .. }) {
                    out.push(stage2_tags(&h.streams));
                }
                out
            }
            Arch::IsoNet(n) => vec![self.isonet_tags(n)],
        }
    }

    fn isonet_tags(&self, n: &IsoNet) -> Vec<Tag> {
        let mut tags = vec![Tag::Cls];
        for (s, info) in self.inputs.streams.iter().enumerate() {
            tags.extend(std::iter::repeat_n(Tag::Stream(s), info.channels * n.windows));
        }
        tags
    }

    fn check_inputs(&self, g: &Graph, inputs: &[Var]) -> Result<usize> {
        if inputs.len() != self.inputs.streams.len() {
            return Err(Error::usage(format!(
                "model expects {} input streams, got {}",
                self.inputs.streams.len(),
                inputs.len()
            )));
        }
        let n = g.shape(inputs[0]).first().copied().unwrap_or(0);
        for (x, s) in inputs.iter().zip(&self.inputs.streams) {
            if g.shape(*x) != [n, s.channels, s.samples] {
                return Err(Error::usage(format!(
                    "stream `{}` input {:?} does not match [{n}, {}, {}]",
                    s.name,
                    g.shape(*x),
                    s.channels,
                    s.samples
                )));
            }
        }
        if n == 0 {
            return Err(Error::usage("empty batch"));
        }
        Ok(n)
    }

    /// Forward pass over per-stream inputs `[N, C, T]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, inputs: &[Var], pass: &mut Pass<'_>) -> Result<Forward> {
        let n = self.check_inputs(g, inputs)?;
        let mut traces = Vec::new();
        let rate = self.config.dropout;
        let (logits, avg_logits) = match &self.arch {
            Arch::Mmmlp(m) => {
                let mut feats = Vec::with_capacity(inputs.len());
                for (x, br) in inputs.iter().zip(&m.branches) {
                    let numel = g.shape(*x)[1..].iter().product::<usize>();
                    let x = g.reshape(*x, &[n, numel])?;
                    let h = br.l1.forward(g, p, x)?;
                    let h = g.relu(h)?;
                    let h = pass.dropout(g, h, rate)?;
                    let h = br.l2.forward(g, p, h)?;
                    let h = g.relu(h)?;
                    feats.push(pass.dropout(g, h, rate)?);
                }
                let h = if feats.len() == 1 { feats[0] } else { g.concat(&feats, 1)? };
                let h = m.shared.forward(g, p, h)?;
                let h = g.relu(h)?;
                let h = pass.dropout(g, h, rate)?;
                (m.out.forward(g, p, h)?, None)
            }
            Arch::Mmt(m) => {
                let mut cls = Vec::with_capacity(inputs.len());
                for (s, (x, enc)) in inputs.iter().zip(&m.streams).enumerate() {
                    let seq = self.encode_stream(g, p, enc, s, *x, pass, &mut traces)?;
                    cls.push(cls_token(g, seq.tokens)?);
                }
                (fusion_forward(g, p, &m.head, &cls)?, None)
            }
            Arch::HierT(h) => {
                let mut seqs = Vec::with_capacity(inputs.len());
                for (s, (x, enc)) in inputs.iter().zip(&h.streams).enumerate() {
                    seqs.push(self.encode_stream(g, p, enc, s, *x, pass, &mut traces)?);
                }
                match &h.head {
                    HierHead::Fusion(head) => {
                        let cls = seqs.iter().map(|s| cls_token(g, s.tokens)).collect::<Result<Vec<_>>>()?;
                        (fusion_forward(g, p, head, &cls)?, None)
                    }
                    HierHead::Stage2 { cls, layers, out } => {
                        let e = self.config.embed_dim;
                        let c = g.expand(p.var(*cls), n)?;
                        let c = g.reshape(c, &[n, 1, e])?;
                        let mut parts = vec![c];
                        parts.extend(seqs.iter().map(|s| s.tokens));
                        let tokens = g.concat(&parts, 1)?;
                        let seq = TokenSequence::new(g, tokens, stage2_tags(&h.streams), true)?;
                        let first = self.config.layers + 1;
                        let seq = run_stack(g, p, layers, seq, first, None, pass, &mut traces)?;
                        let z = cls_token(g, seq.tokens)?;
                        (out.forward(g, p, z)?, None)
                    }
                }
            }
            Arch::IsoNet(net) => {
                let tokens = self.isonet_embed(g, p, net, inputs, n)?;
                let tokens = pass.dropout(g, tokens, rate)?;
                let seq = TokenSequence::new(g, tokens, self.isonet_tags(net), net.windows > 1)?;
                let seq = run_stack(g, p, &net.layers, seq, 1, None, pass, &mut traces)?;
                let t = seq.len();
                let z = cls_token(g, seq.tokens)?;
                let rest = g.slice(seq.tokens, 1, 1, t - 1)?;
                let mean = g.mean_axis(rest, 1)?;
                (net.cls_head.forward(g, p, z)?, Some(net.avg_head.forward(g, p, mean)?))
            }
        };
        Ok(Forward {
            logits,
            avg_logits,
            traces,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_stream(
        &self,
        g: &mut Graph,
        p: &Bound,
        enc: &StreamEncoder,
        s: usize,
        x: Var,
        pass: &mut Pass<'_>,
        traces: &mut Vec<AttentionTrace>,
    ) -> Result<TokenSequence> {
        let &[n, c, _] = g.shape(x) else { unreachable!("checked by check_inputs") };
        let (np, patch, e) = (enc.patches, self.config.patch, self.config.embed_dim);
        let x = g.slice(x, 2, 0, np * patch)?;
        let x = g.reshape(x, &[n, c, np, patch])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        let x = g.reshape(x, &[n, np, c * patch])?;
        let tok = enc.embed.forward(g, p, x)?;
        let cls = g.expand(p.var(enc.cls), n)?;
        let cls = g.reshape(cls, &[n, 1, e])?;
        let tok = g.concat(&[cls, tok], 1)?;
        let pe = g.constant(sinusoidal_encoding(np + 1, e));
        let tok = g.add_broadcast(tok, pe)?;
        let tok = pass.dropout(g, tok, self.config.dropout)?;
        let seq = TokenSequence::new(g, tok, stream_tags(s, np), true)?;
        run_stack(g, p, &enc.layers, seq, 1, Some(s), pass, traces)
    }

    /// `[N, 1 + C·windows, E]`, CLS first, then channels in stream order
    /// (window-major within a channel).
    fn isonet_embed(&self, g: &mut Graph, p: &Bound, net: &IsoNet, inputs: &[Var], n: usize) -> Result<Var> {
        let e = self.config.embed_dim;
        let c = self.inputs.total_channels();
        let x = if inputs.len() == 1 { inputs[0] } else { g.concat(inputs, 1)? };
        let (w, nw) = (net.width, net.windows);
        let x = g.slice(x, 2, 0, w * nw)?;
        let x = g.reshape(x, &[n, c, nw, w])?;
        let x = g.permute(x, &[1, 0, 2, 3])?;
        let x = g.reshape(x, &[c, n * nw, w])?;
        let y = g.batch_matmul(x, p.var(net.embed_w), false)?;
        let y = g.reshape(y, &[c, n, nw, e])?;
        let y = g.permute(y, &[1, 0, 2, 3])?;
        let bias = if nw == 1 {
            g.reshape(p.var(net.embed_b), &[c, 1, e])?
        } else {
            let b = g.expand(p.var(net.embed_b), nw)?;
            let b = g.permute(b, &[1, 0, 2])?;
            let pe = sinusoidal_encoding(nw, e);
            let pe = Tensor::from_fn([c, nw, e], |i| pe.data()[i % (nw * e)]);
            let pe = g.constant(pe);
            g.add(b, pe)?
        };
        let y = g.add_broadcast(y, bias)?;
        let y = g.reshape(y, &[n, c * nw, e])?;
        let cls = g.expand(p.var(net.cls), n)?;
        let cls = g.reshape(cls, &[n, 1, e])?;
        Ok(g.concat(&[cls, y], 1)?)
    }
}

fn stream_tags(s: usize, patches: usize) -> Vec<Tag> {
    let mut tags = vec![Tag::Cls];
    tags.extend(std::iter::repeat_n(Tag::Stream(s), patches));
    tags
}

/// Stage-2 sequence: new CLS, then every stage-1 token, stage-1 CLS tokens
/// retagged with their stream.
fn stage2_tags(streams: &[StreamEncoder]) -> Vec<Tag> {
    let mut tags = vec![Tag::Cls];
    for (s, enc) in streams.iter().enumerate() {
        tags.extend(std::iter::repeat_n(Tag::Stream(s), enc.patches + 1));
    }
    tags
}

fn cls_token(g: &mut Graph, tokens: Var) -> Result<Var> {
    let &[n, _, e] = g.shape(tokens) else { unreachable!("token sequences are rank 3") };
    let z = g.slice(tokens, 1, 0, 1)?;
    Ok(g.reshape(z, &[n, e])?)
}

fn fusion_forward(g: &mut Graph, p: &Bound, head: &FusionHead, cls: &[Var]) -> Result<Var> {
    let z = if cls.len() == 1 { cls[0] } else { g.concat(cls, 1)? };
    let z = head.fuse.forward(g, p, z)?;
    head.out.forward(g, p, z)
}
