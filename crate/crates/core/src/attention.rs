//! Agent-aware multi-head attention and the encoder/decoder stacks.
//!
//! Logits for a query/key pair of the same agent come from the "self"
//! projections, all other pairs from the "other" projections:
//!
//! ```text
//! A = M ⊙ (Q_self K_selfᵀ) + (1 − M) ⊙ (Q_other K_otherᵀ)
//! out = softmax(A / √d_head) · V
//! ```
//!
//! Projections are stored as `d_model × d_k` matrices; head `h` uses columns
//! `h·d_head .. (h+1)·d_head`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AttentionKind, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{LayerNormParams, Linear, ParamGroup, ParamStore};
use crate::seq::{causal_mask, identity_mask, Connectivity, MaskMatrix, Tag};
use crate::tensor::{Tape, Var, MASKED};

/// Inverted dropout with its own generator; `rng: None` disables it.
#[derive(Debug, Default)]
pub struct Dropout {
    pub rate: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout::default()
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) if self.rate > 0.0 => tape.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

/// Post-softmax attention rows of one call, `[heads][query][key]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights {
    pub query_tags: Vec<Tag>,
    pub key_tags: Vec<Tag>,
    pub heads: Vec<Vec<Vec<f64>>>,
}

impl AttnWeights {
    /// `(query tag, key tag, head, weight)` for every pair.
    pub fn triplets(&self) -> Vec<(Tag, Tag, usize, f64)> {
        let mut out = Vec::new();
        for (h, rows) in self.heads.iter().enumerate() {
            for (q, row) in rows.iter().enumerate() {
                for (k, &w) in row.iter().enumerate() {
                    out.push((self.query_tags[q], self.key_tags[k], h, w));
                }
            }
        }
        out
    }
}

/// Projected keys and values, `[L × d_k]` each.
#[derive(Clone, Debug)]
pub struct KeyProj {
    pub k_self: Var,
    pub k_other: Option<Var>,
    pub v: Var,
    pub tags: Vec<Tag>,
}

#[derive(Clone, Debug)]
pub struct QueryProj {
    pub q_self: Var,
    pub q_other: Option<Var>,
    pub tags: Vec<Tag>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq_self: Linear,
    pub wk_self: Linear,
    /// Absent for [`AttentionKind::Standard`].
    pub wq_other: Option<Linear>,
    pub wk_other: Option<Linear>,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: ParamGroup,
        name: &str,
        model_dim: usize,
        key_dim: usize,
        heads: usize,
        kind: AttentionKind,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || key_dim % heads != 0 {
            return Err(Error::Config(format!("key_dim {key_dim} not divisible by heads {heads}")));
        }
        let mut proj = |tag: &str, rng: &mut R| {
            Linear::new(store, group, &format!("{name}.{tag}"), model_dim, key_dim, false, rng)
        };
        let wq_self = proj("wq_self", rng);
        let wk_self = proj("wk_self", rng);
        let (wq_other, wk_other) = match kind {
            AttentionKind::AgentAware => (Some(proj("wq_other", rng)), Some(proj("wk_other", rng))),
            AttentionKind::Standard => (None, None),
        };
        let wv = proj("wv", rng);
        let wo = Linear::new(store, group, &format!("{name}.wo"), key_dim, model_dim, true, rng);
        Ok(MultiHeadAttention {
            wq_self,
            wk_self,
            wq_other,
            wk_other,
            wv,
            wo,
            heads,
            head_dim: key_dim / heads,
        })
    }

    pub fn project_queries(&self, tape: &mut Tape, store: &ParamStore, x: Var, tags: &[Tag]) -> Result<QueryProj> {
        Ok(QueryProj {
            q_self: self.wq_self.forward(tape, store, x)?,
            q_other: match &self.wq_other {
                Some(w) => Some(w.forward(tape, store, x)?),
                None => None,
            },
            tags: tags.to_vec(),
        })
    }

    pub fn project_keys(&self, tape: &mut Tape, store: &ParamStore, x: Var, tags: &[Tag]) -> Result<KeyProj> {
        Ok(KeyProj {
            k_self: self.wk_self.forward(tape, store, x)?,
            k_other: match &self.wk_other {
                Some(w) => Some(w.forward(tape, store, x)?),
                None => None,
            },
            v: self.wv.forward(tape, store, x)?,
            tags: tags.to_vec(),
        })
    }

    /// Attention of projected queries over projected keys.
    ///
    /// `forbidden` entries are excluded from the softmax. Returns the
    /// output-projected rows and the per-head weights.
    pub fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: &QueryProj,
        k: &KeyProj,
        forbidden: Option<&MaskMatrix>,
    ) -> Result<(Var, AttnWeights)> {
        let (lq, lk) = (q.tags.len(), k.tags.len());
        if tape.value(q.q_self).rows() != lq || tape.value(k.v).rows() != lk {
            return Err(Error::shape("attention", "one tag per query and key row required"));
        }
        if let Some(m) = forbidden {
            if (m.rows, m.cols) != (lq, lk) {
                return Err(Error::shape(
                    "attention",
                    format!("mask {}×{} for {lq}×{lk} logits", m.rows, m.cols),
                ));
            }
        }
        let same = identity_mask(&q.tags, &k.tags);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (start, w) = (h * self.head_dim, self.head_dim);
            let logits_self = head_logits(tape, q.q_self, k.k_self, start, w)?;
            let logits = match (q.q_other, k.k_other) {
                (Some(qo), Some(ko)) => {
                    let logits_other = head_logits(tape, qo, ko, start, w)?;
                    tape.select(same.bits(), logits_self, logits_other)?
                }
                _ => logits_self,
            };
            let mut logits = tape.scale(logits, scale)?;
            if let Some(m) = forbidden {
                logits = tape.fill(logits, m.bits(), MASKED)?;
            }
            let attn = tape.softmax_last(logits).map_err(|e| match e {
                Error::DegenerateSlice { slice } => Error::Data(format!(
                    "query {:?} has no visible key",
                    q.tags.get(slice)
                )),
                e => e,
            })?;
            weights.push(
                (0..lq)
                    .map(|r| tape.value(attn).row(r).to_vec())
                    .collect::<Vec<_>>(),
            );
            let v = tape.slice_cols(k.v, start, w)?;
            outs.push(tape.matmul(attn, v)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_last(&outs)? };
        let out = self.wo.forward(tape, store, cat)?;
        Ok((
            out,
            AttnWeights {
                query_tags: q.tags.clone(),
                key_tags: k.tags.clone(),
                heads: weights,
            },
        ))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_q: Var,
        q_tags: &[Tag],
        x_kv: Var,
        k_tags: &[Tag],
        forbidden: Option<&MaskMatrix>,
    ) -> Result<(Var, AttnWeights)> {
        let q = self.project_queries(tape, store, x_q, q_tags)?;
        let k = self.project_keys(tape, store, x_kv, k_tags)?;
        self.attend(tape, store, &q, &k, forbidden)
    }
}

fn head_logits(tape: &mut Tape, q: Var, k: Var, start: usize, width: usize) -> Result<Var> {
    let qh = tape.slice_cols(q, start, width)?;
    let kh = tape.slice_cols(k, start, width)?;
    let kt = tape.transpose(kh)?;
    tape.matmul(qh, kt)
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: ParamGroup,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            w1: Linear::new(store, group, &format!("{name}.ff1"), dim, hidden, true, rng),
            w2: Linear::new(store, group, &format!("{name}.ff2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.w1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = drop.apply(tape, h)?;
        self.w2.forward(tape, store, h)
    }
}

/// `norm(x + dropout(f))`.
fn residual(tape: &mut Tape, store: &ParamStore, norm: &LayerNormParams, x: Var, f: Var, drop: &mut Dropout) -> Result<Var> {
    let f = drop.apply(tape, f)?;
    let s = tape.add(x, f)?;
    norm.forward(tape, store, s)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    pub norm3: LayerNormParams,
}

/// Stack of self-attention layers over a past sequence.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

/// Stack of causal self-attention plus cross-attention layers.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: ParamGroup,
        name: &str,
        cfg: &ModelConfig,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.time_dim;
        let layers = (0..depth)
            .map(|i| {
                let n = format!("{name}.{i}");
                Ok(EncoderLayer {
                    attn: MultiHeadAttention::new(store, group, &format!("{n}.attn"), d, cfg.key_dim, cfg.heads, cfg.attention, rng)?,
                    ff: FeedForward::new(store, group, &n, d, cfg.ff_dim, rng),
                    norm1: LayerNormParams::new(store, group, &format!("{n}.norm1"), d),
                    norm2: LayerNormParams::new(store, group, &format!("{n}.norm2"), d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { layers })
    }

    /// Self-attention with the connectivity mask applied in every layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        tags: &[Tag],
        conn: &Connectivity,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let forbidden = conn.mask(tags, tags)?;
        let mut x = x;
        for layer in &self.layers {
            let (a, _) = layer.attn.forward(tape, store, x, tags, x, tags, Some(&forbidden))?;
            let x1 = residual(tape, store, &layer.norm1, x, a, drop)?;
            let f = layer.ff.forward(tape, store, x1, drop)?;
            x = residual(tape, store, &layer.norm2, x1, f, drop)?;
        }
        Ok(x)
    }
}

/// Keys already seen by a decoder: cross-attention memory projected once and
/// the growing self-attention prefix, per layer.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    memory: Vec<KeyProj>,
    prefix: Vec<Option<KeyProj>>,
    causal: bool,
}

impl DecoderCache {
    pub fn len(&self) -> usize {
        self.prefix
            .first()
            .and_then(|p| p.as_ref())
            .map_or(0, |p| p.tags.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weights of the last decoder call, `(self, cross)` per layer.
pub type DecoderWeights = Vec<(AttnWeights, AttnWeights)>;

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: ParamGroup,
        name: &str,
        cfg: &ModelConfig,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.time_dim;
        let layers = (0..depth)
            .map(|i| {
                let n = format!("{name}.{i}");
                Ok(DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, group, &format!("{n}.self"), d, cfg.key_dim, cfg.heads, cfg.attention, rng)?,
                    cross_attn: MultiHeadAttention::new(store, group, &format!("{n}.cross"), d, cfg.key_dim, cfg.heads, cfg.attention, rng)?,
                    ff: FeedForward::new(store, group, &n, d, cfg.ff_dim, rng),
                    norm1: LayerNormParams::new(store, group, &format!("{n}.norm1"), d),
                    norm2: LayerNormParams::new(store, group, &format!("{n}.norm2"), d),
                    norm3: LayerNormParams::new(store, group, &format!("{n}.norm3"), d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Decoder { layers })
    }

    /// Projects the memory for every layer. With `causal`, queries see only
    /// keys from their own or earlier timesteps.
    pub fn start(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: Var,
        memory_tags: &[Tag],
        causal: bool,
    ) -> Result<DecoderCache> {
        let memory = self
            .layers
            .iter()
            .map(|l| l.cross_attn.project_keys(tape, store, memory, memory_tags))
            .collect::<Result<_>>()?;
        Ok(DecoderCache {
            memory,
            prefix: vec![None; self.layers.len()],
            causal,
        })
    }

    /// Runs new query rows through every layer, appending them to the cache.
    ///
    /// Rows already in the cache are never recomputed, so feeding a sequence
    /// in several calls gives the same outputs as one call when `causal` is set
    /// and every call only adds timesteps later than those already cached.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cache: &mut DecoderCache,
        x: Var,
        tags: &[Tag],
        conn: &Connectivity,
        drop: &mut Dropout,
    ) -> Result<(Var, DecoderWeights)> {
        let mut x = x;
        let mut weights = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let q = layer.self_attn.project_queries(tape, store, x, tags)?;
            let new = layer.self_attn.project_keys(tape, store, x, tags)?;
            let keys = match cache.prefix[i].take() {
                None => new,
                Some(old) => append_keys(tape, old, new)?,
            };
            let mut forbidden = conn.mask(tags, &keys.tags)?;
            if cache.causal {
                forbidden = MaskMatrix::union(&[&forbidden, &causal_mask(tags, &keys.tags)]).expect("two masks");
            }
            let (a, w_self) = layer.self_attn.attend(tape, store, &q, &keys, Some(&forbidden))?;
            cache.prefix[i] = Some(keys);
            let x1 = residual(tape, store, &layer.norm1, x, a, drop)?;

            let mem = &cache.memory[i];
            let q = layer.cross_attn.project_queries(tape, store, x1, tags)?;
            let forbidden = conn.mask(tags, &mem.tags)?;
            let (c, w_cross) = layer.cross_attn.attend(tape, store, &q, mem, Some(&forbidden))?;
            let x2 = residual(tape, store, &layer.norm2, x1, c, drop)?;

            let f = layer.ff.forward(tape, store, x2, drop)?;
            x = residual(tape, store, &layer.norm3, x2, f, drop)?;
            weights.push((w_self, w_cross));
        }
        Ok((x, weights))
    }

    /// One-shot decoding of a whole query sequence.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        tags: &[Tag],
        memory: Var,
        memory_tags: &[Tag],
        conn: &Connectivity,
        causal: bool,
        drop: &mut Dropout,
    ) -> Result<(Var, DecoderWeights)> {
        let mut cache = self.start(tape, store, memory, memory_tags, causal)?;
        self.step(tape, store, &mut cache, x, tags, conn, drop)
    }
}

fn append_keys(tape: &mut Tape, old: KeyProj, new: KeyProj) -> Result<KeyProj> {
    let mut tags = old.tags;
    tags.extend(new.tags);
    Ok(KeyProj {
        k_self: tape.concat_rows(&[old.k_self, new.k_self])?,
        k_other: match (old.k_other, new.k_other) {
            (Some(a), Some(b)) => Some(tape.concat_rows(&[a, b])?),
            _ => None,
        },
        v: tape.concat_rows(&[old.v, new.v])?,
        tags,
    })
}
