//! Named parameter storage and the small dense building blocks built on it.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Which part of the model owns a parameter. Groups are trained in separate
/// stages and written to separate checkpoint sections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Cvae,
    Sampler,
}

impl ParamGroup {
    pub fn tag(self) -> &'static str {
        match self {
            ParamGroup::Cvae => "cvae",
            ParamGroup::Sampler => "sampler",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "cvae" => Some(ParamGroup::Cvae),
            "sampler" => Some(ParamGroup::Sampler),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    group: ParamGroup,
    tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            group,
            tensor: tensor.requiring_grad(),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Marks every parameter of `group` as trainable or frozen. Frozen
    /// parameters enter tapes as constants and never receive gradients.
    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.tensor.set_requires_grad(trainable);
        }
    }

    /// Drops every parameter of `group` added after all others. Only valid
    /// when that group's entries form the tail of the store.
    pub(crate) fn truncate_group(&mut self, group: ParamGroup) {
        while self.entries.last().is_some_and(|e| e.group == group) {
            self.entries.pop();
        }
    }

    /// Bit-level snapshot of a group, used to verify freezing.
    pub fn fingerprint(&self, group: ParamGroup) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .flat_map(|e| e.tensor.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Affine map `x·W (+ b)` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: ParamGroup,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            init_uniform(rng, in_dim, &[in_dim, out_dim]),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stack of `tanh` hidden layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: ParamGroup,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut d = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(store, group, &format!("{name}.{i}"), d, h, true, rng));
            d = h;
        }
        Mlp { layers }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        self.layers.last().map_or(in_dim, |l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            let h = layer.forward(tape, store, x)?;
            x = tape.tanh(h)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, group: ParamGroup, name: &str, dim: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), group, Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}
