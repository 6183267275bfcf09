//! Flattened multi-agent sequences, time encoding and attention masks.
//!
//! A scene with agents `1..N` over timesteps `-H..=0` becomes one sequence
//! ordered by timestep first and agent slot second. Agents missing at a
//! timestep are left out rather than padded; every element carries a
//! [`Tag`] so masks can be computed from identities instead of positions.

use std::rc::Rc;

use crate::data::{AgentId, Scene};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::params::ParamId;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tag {
    pub t: i32,
    pub agent: AgentId,
}

impl Tag {
    pub fn new(t: i32, agent: AgentId) -> Self {
        Tag { t, agent }
    }
}

/// Tagged rows of a `[len × dim]` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiAgentSequence {
    pub tags: Vec<Tag>,
    pub features: Tensor,
}

impl MultiAgentSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Past states as a flattened sequence of `[x, y, vx, vy (, heading)]` rows.
pub fn flatten_history(scene: &Scene, use_heading: bool) -> Result<MultiAgentSequence> {
    if scene.num_agents() == 0 {
        return Err(Error::Data("empty scene".into()));
    }
    let h = scene.past_horizon() as i32;
    let mut tags = Vec::new();
    let mut data = Vec::new();
    for t in -h..=0 {
        for (n, &agent) in scene.agents.iter().enumerate() {
            if let Some(state) = scene.state(n, t) {
                tags.push(Tag::new(t, agent));
                data.extend(state.features(use_heading)?);
            }
        }
    }
    if tags.is_empty() {
        return Err(Error::Data("scene has no observed past state".into()));
    }
    let dim = data.len() / tags.len();
    Ok(MultiAgentSequence {
        features: Tensor::new(&[tags.len(), dim], data)?,
        tags,
    })
}

/// Sinusoidal timestamp of timestep `t` for a past horizon `h`.
///
/// Entry `k` is `sin((t+h) / 10000^(k/d))` for even `k` and
/// `cos((t+h) / 10000^((k-1)/d))` for odd `k`.
pub fn timestamp(t: i32, h: usize, dim: usize) -> Vec<f64> {
    let pos = (t + h as i32) as f64;
    (0..dim)
        .map(|k| {
            let even = k - (k % 2);
            let arg = pos / 10000f64.powf(even as f64 / dim as f64);
            if k % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

pub fn timestamp_matrix(tags: &[Tag], h: usize, dim: usize) -> Tensor {
    let data = tags.iter().flat_map(|tag| timestamp(tag.t, h, dim)).collect();
    Tensor::from_parts(vec![tags.len(), dim], data)
}

/// `W2 · (W1 · x ⊕ τ)` for every row of `x`, with weights stored `in × out`.
pub fn embed_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    tags: &[Tag],
    h: usize,
    w1: ParamId,
    w2: ParamId,
) -> Result<Var> {
    let w1 = tape.param(store, w1);
    let w2 = tape.param(store, w2);
    embed_with_vars(tape, x, tags, h, w1, w2)
}

fn embed_with_vars(tape: &mut Tape, x: Var, tags: &[Tag], h: usize, w1: Var, w2: Var) -> Result<Var> {
    let dim = tape.value(w1).cols();
    if tape.value(w2).rows() != 2 * dim {
        return Err(Error::shape(
            "embed_with_time",
            format!("W2 {:?} for time dim {dim}", tape.shape(w2)),
        ));
    }
    if tape.value(x).rows() != tags.len() {
        return Err(Error::shape("embed_with_time", "one tag per row required"));
    }
    let proj = tape.matmul(x, w1)?;
    let tau = tape.constant(timestamp_matrix(tags, h, dim));
    let cat = tape.concat_last(&[proj, tau])?;
    tape.matmul(cat, w2)
}

/// Value-level time embedding; `w1` is `d_in × d_τ`, `w2` is `2d_τ × d_τ`.
pub fn embed_with_time(
    seq: &MultiAgentSequence,
    w1: &Tensor,
    w2: &Tensor,
    h: usize,
) -> Result<MultiAgentSequence> {
    let mut tape = Tape::new();
    let x = tape.constant(seq.features.clone());
    let w1 = tape.constant(w1.clone());
    let w2 = tape.constant(w2.clone());
    let out = embed_with_vars(&mut tape, x, &seq.tags, h, w1, w2)?;
    Ok(MultiAgentSequence {
        tags: seq.tags.clone(),
        features: tape.value(out).clone(),
    })
}

/// Boolean `rows × cols` matrix over (query, key) pairs.
///
/// For [`identity_mask`] a set entry means "same agent"; for
/// [`connectivity_mask`] and [`causal_mask`] it means "forbidden".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Rc<[bool]>,
}

impl MaskMatrix {
    pub fn from_fn(q: &[Tag], k: &[Tag], f: impl Fn(&Tag, &Tag) -> bool) -> Self {
        let data: Vec<bool> = q.iter().flat_map(|a| k.iter().map(move |b| (a, b))).map(|(a, b)| f(a, b)).collect();
        MaskMatrix {
            rows: q.len(),
            cols: k.len(),
            data: data.into(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn bits(&self) -> Rc<[bool]> {
        Rc::clone(&self.data)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Elementwise OR of same-sized masks.
    pub fn union(masks: &[&MaskMatrix]) -> Option<MaskMatrix> {
        let first = masks.first()?;
        let data: Vec<bool> = (0..first.data.len())
            .map(|i| masks.iter().any(|m| m.data[i]))
            .collect();
        Some(MaskMatrix {
            rows: first.rows,
            cols: first.cols,
            data: data.into(),
        })
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j) as u8).collect())
            .collect()
    }
}

/// `M_ij = 1` iff query `i` and key `j` belong to the same agent.
pub fn identity_mask(q: &[Tag], k: &[Tag]) -> MaskMatrix {
    MaskMatrix::from_fn(q, k, |a, b| a.agent == b.agent)
}

/// Pairwise agent connectivity at `t = 0`, precomputed once per scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Connectivity {
    agents: Vec<AgentId>,
    blocked: Vec<bool>,
}

impl Connectivity {
    /// Agents `n != m` are disconnected when their distance at `t = 0` is at least `eta`.
    pub fn new(scene: &Scene, eta: f64) -> Result<Self> {
        let n = scene.num_agents();
        let pos: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                scene
                    .position(i, 0)
                    .ok_or_else(|| Error::Data(format!("agent {} has no position at t=0", scene.agents[i].0)))
            })
            .collect::<Result<_>>()?;
        let mut blocked = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let d = ((pos[i][0] - pos[j][0]).powi(2) + (pos[i][1] - pos[j][1]).powi(2)).sqrt();
                blocked[i * n + j] = i != j && d >= eta;
            }
        }
        Ok(Connectivity {
            agents: scene.agents.clone(),
            blocked,
        })
    }

    /// Every agent connected to every other.
    pub fn full(agents: &[AgentId]) -> Self {
        Connectivity {
            agents: agents.to_vec(),
            blocked: vec![false; agents.len() * agents.len()],
        }
    }

    fn index(&self, id: AgentId) -> Result<usize> {
        self.agents
            .iter()
            .position(|&a| a == id)
            .ok_or_else(|| Error::Data(format!("agent {} not in scene", id.0)))
    }

    pub fn connected(&self, a: AgentId, b: AgentId) -> Result<bool> {
        let n = self.agents.len();
        Ok(!self.blocked[self.index(a)? * n + self.index(b)?])
    }

    /// Set where the query/key agents are disconnected.
    pub fn mask(&self, q: &[Tag], k: &[Tag]) -> Result<MaskMatrix> {
        let n = self.agents.len();
        let qi: Vec<usize> = q.iter().map(|t| self.index(t.agent)).collect::<Result<_>>()?;
        let ki: Vec<usize> = k.iter().map(|t| self.index(t.agent)).collect::<Result<_>>()?;
        let data: Vec<bool> = qi
            .iter()
            .flat_map(|&a| ki.iter().map(move |&b| (a, b)))
            .map(|(a, b)| self.blocked[a * n + b])
            .collect();
        Ok(MaskMatrix {
            rows: q.len(),
            cols: k.len(),
            data: data.into(),
        })
    }
}

/// Forbids every cross-agent pair whose distance at `t = 0` is at least `eta`.
pub fn connectivity_mask(scene: &Scene, eta: f64, q: &[Tag], k: &[Tag]) -> Result<MaskMatrix> {
    Connectivity::new(scene, eta)?.mask(q, k)
}

/// Forbids keys from later timesteps than the query.
pub fn causal_mask(q: &[Tag], k: &[Tag]) -> MaskMatrix {
    MaskMatrix::from_fn(q, k, |a, b| b.t > a.t)
}
