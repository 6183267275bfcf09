//! Model and run configuration in a flat `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! time_dim = 256
//! mlp_hidden = 512,256
//! eta = inf
//! ```
//!
//! Serialising and re-parsing any configuration yields the same value. In
//! run configurations `preset = default|desk|tiny` replaces every model field,
//! so it belongs before the model keys it is combined with.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::metrics::Distance;

/// How the per-agent KL term is clipped at `kl_clip`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlClip {
    /// `min(KL, c)`: no gradient once an agent's KL exceeds `c`.
    Upper,
    /// `max(KL, c)`: free-bits floor, no gradient below `c`.
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Separate self/other query-key projections blended by the identity mask.
    AgentAware,
    /// Plain scaled dot-product attention (self projections only, no identity mask).
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Cvae,
    Sampler,
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Past horizon `H`; the past covers timesteps `-H..=0`.
    pub past_horizon: usize,
    /// Future horizon `T`.
    pub future_horizon: usize,
    /// Appends the heading angle to the state (`d_s` = 5 instead of 4).
    pub use_heading: bool,
    /// Length of the optional per-agent context vector.
    pub context_dim: usize,
    /// `d_τ`: timestamp and model width.
    pub time_dim: usize,
    /// `d_k`: total query/key/value width over all heads.
    pub key_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    /// `d_z`.
    pub latent_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub beta: f64,
    pub kl_clip: f64,
    pub kl_clip_mode: KlClip,
    /// Connectivity threshold in meters.
    pub eta: f64,
    /// Number of samples `K` for evaluation and the trajectory sampler.
    pub k: usize,
    /// Number of prior samples in the variety loss.
    pub variety_k: usize,
    pub variety_weight: f64,
    pub sigma_d: f64,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub epochs: usize,
    pub sampler_lr: f64,
    pub sampler_halve_every: usize,
    pub sampler_epochs: usize,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub attention: AttentionKind,
    pub agent_encoding: bool,
    pub sampler_diagonal: bool,
    pub sampler_delta: f64,
    pub rotate_augment: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            past_horizon: 7,
            future_horizon: 12,
            use_heading: false,
            context_dim: 0,
            time_dim: 256,
            key_dim: 256,
            heads: 8,
            ff_dim: 512,
            enc_layers: 2,
            dec_layers: 2,
            dropout: 0.1,
            latent_dim: 32,
            mlp_hidden: vec![512, 256],
            beta: 1.0,
            kl_clip: 2.0,
            kl_clip_mode: KlClip::Upper,
            eta: 100.0,
            k: 20,
            variety_k: 20,
            variety_weight: 1.0,
            sigma_d: 5.0,
            lr: 1e-4,
            lr_halve_every: 10,
            epochs: 100,
            sampler_lr: 1e-4,
            sampler_halve_every: 5,
            sampler_epochs: 50,
            grad_clip: 1.0,
            batch_size: 1,
            attention: AttentionKind::AgentAware,
            agent_encoding: false,
            sampler_diagonal: false,
            sampler_delta: 1e-3,
            rotate_augment: true,
        }
    }
}

impl ModelConfig {
    /// Small model that trains on a single CPU core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            time_dim: 32,
            key_dim: 32,
            heads: 4,
            ff_dim: 64,
            enc_layers: 1,
            dec_layers: 1,
            dropout: 0.0,
            latent_dim: 8,
            mlp_hidden: vec![64, 32],
            variety_k: 5,
            lr: 1e-3,
            lr_halve_every: 20,
            epochs: 60,
            sampler_lr: 1e-3,
            sampler_halve_every: 10,
            sampler_epochs: 20,
            ..Self::default()
        }
    }

    /// Minimal configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            past_horizon: 2,
            future_horizon: 2,
            time_dim: 8,
            key_dim: 8,
            heads: 2,
            ff_dim: 8,
            enc_layers: 1,
            dec_layers: 1,
            dropout: 0.0,
            latent_dim: 4,
            mlp_hidden: vec![8],
            k: 3,
            variety_k: 3,
            ..Self::default()
        }
    }

    /// State dimension `d_s`.
    pub fn state_dim(&self) -> usize {
        if self.use_heading {
            5
        } else {
            4
        }
    }

    pub fn head_dim(&self) -> usize {
        self.key_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let dims = [
            ("future_horizon", self.future_horizon),
            ("time_dim", self.time_dim),
            ("key_dim", self.key_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("latent_dim", self.latent_dim),
            ("k", self.k),
            ("variety_k", self.variety_k),
            ("batch_size", self.batch_size),
            ("lr_halve_every", self.lr_halve_every),
            ("sampler_halve_every", self.sampler_halve_every),
        ];
        for (name, v) in dims {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.mlp_hidden.contains(&0) {
            return bad("mlp_hidden entries must be positive".into());
        }
        if self.key_dim % self.heads != 0 {
            return bad(format!(
                "key_dim {} is not divisible by heads {}",
                self.key_dim, self.heads
            ));
        }
        if self.time_dim % 2 != 0 {
            return bad(format!("time_dim {} must be even", self.time_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.eta.is_nan() || self.eta < 0.0 {
            return bad(format!("eta {} must be nonnegative", self.eta));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("sigma_d", self.sigma_d),
            ("lr", self.lr),
            ("sampler_lr", self.sampler_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.sampler_delta > 0.0) {
            return bad("sampler_delta must be positive".into());
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "past_horizon" => self.past_horizon = parse(key, value)?,
            "future_horizon" => self.future_horizon = parse(key, value)?,
            "use_heading" => self.use_heading = parse(key, value)?,
            "context_dim" => self.context_dim = parse(key, value)?,
            "time_dim" => self.time_dim = parse(key, value)?,
            "key_dim" => self.key_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ff_dim" => self.ff_dim = parse(key, value)?,
            "enc_layers" => self.enc_layers = parse(key, value)?,
            "dec_layers" => self.dec_layers = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse_list(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "kl_clip" => self.kl_clip = parse(key, value)?,
            "kl_clip_mode" => {
                self.kl_clip_mode = match value {
                    "upper" => KlClip::Upper,
                    "lower" => KlClip::Lower,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "eta" => self.eta = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "variety_k" => self.variety_k = parse(key, value)?,
            "variety_weight" => self.variety_weight = parse(key, value)?,
            "sigma_d" => self.sigma_d = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_halve_every" => self.lr_halve_every = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "sampler_lr" => self.sampler_lr = parse(key, value)?,
            "sampler_halve_every" => self.sampler_halve_every = parse(key, value)?,
            "sampler_epochs" => self.sampler_epochs = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "attention" => {
                self.attention = match value {
                    "agent_aware" => AttentionKind::AgentAware,
                    "standard" => AttentionKind::Standard,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "agent_encoding" => self.agent_encoding = parse(key, value)?,
            "sampler_diagonal" => self.sampler_diagonal = parse(key, value)?,
            "sampler_delta" => self.sampler_delta = parse(key, value)?,
            "rotate_augment" => self.rotate_augment = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("past_horizon", self.past_horizon.to_string()),
            ("future_horizon", self.future_horizon.to_string()),
            ("use_heading", self.use_heading.to_string()),
            ("context_dim", self.context_dim.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("key_dim", self.key_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("dropout", self.dropout.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("mlp_hidden", join(&self.mlp_hidden)),
            ("beta", self.beta.to_string()),
            ("kl_clip", self.kl_clip.to_string()),
            (
                "kl_clip_mode",
                match self.kl_clip_mode {
                    KlClip::Upper => "upper",
                    KlClip::Lower => "lower",
                }
                .into(),
            ),
            ("eta", self.eta.to_string()),
            ("k", self.k.to_string()),
            ("variety_k", self.variety_k.to_string()),
            ("variety_weight", self.variety_weight.to_string()),
            ("sigma_d", self.sigma_d.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_halve_every", self.lr_halve_every.to_string()),
            ("epochs", self.epochs.to_string()),
            ("sampler_lr", self.sampler_lr.to_string()),
            ("sampler_halve_every", self.sampler_halve_every.to_string()),
            ("sampler_epochs", self.sampler_epochs.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("batch_size", self.batch_size.to_string()),
            (
                "attention",
                match self.attention {
                    AttentionKind::AgentAware => "agent_aware",
                    AttentionKind::Standard => "standard",
                }
                .into(),
            ),
            ("agent_encoding", self.agent_encoding.to_string()),
            ("sampler_diagonal", self.sampler_diagonal.to_string()),
            ("sampler_delta", self.sampler_delta.to_string()),
            ("rotate_augment", self.rotate_augment.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        render(self.entries())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, key, value) in lines(text)? {
            if !cfg.set(key, value)? {
                return Err(unknown_key(line, key));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub out_dir: String,
    pub train_files: Vec<String>,
    pub test_files: Vec<String>,
    /// Window stride for training scenes.
    pub train_stride: usize,
    /// Window stride for evaluation scenes; 0 means non-overlapping (`H+T+1`).
    pub eval_stride: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_kinds: Vec<SyntheticKind>,
    pub synthetic_noise: f64,
    pub stage: Stage,
    pub distance: Distance,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            seed: 0,
            out_dir: "out".into(),
            train_files: Vec::new(),
            test_files: Vec::new(),
            train_stride: 1,
            eval_stride: 0,
            synthetic_train: 0,
            synthetic_test: 0,
            synthetic_kinds: vec![
                SyntheticKind::Crossing,
                SyntheticKind::Following,
                SyntheticKind::Avoidance,
            ],
            synthetic_noise: 0.05,
            stage: Stage::Both,
            distance: Distance::Euclidean,
        }
    }
}

impl RunConfig {
    pub fn eval_stride(&self) -> usize {
        if self.eval_stride == 0 {
            self.model.past_horizon + self.model.future_horizon + 1
        } else {
            self.eval_stride
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "preset" => {
                self.model = match value {
                    "default" => ModelConfig::default(),
                    "desk" => ModelConfig::desk(),
                    "tiny" => ModelConfig::tiny(),
                    _ => return Err(bad_value(key, value)),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "train_files" => self.train_files = split_list(value),
            "test_files" => self.test_files = split_list(value),
            "train_stride" => self.train_stride = parse(key, value)?,
            "eval_stride" => self.eval_stride = parse(key, value)?,
            "synthetic_train" => self.synthetic_train = parse(key, value)?,
            "synthetic_test" => self.synthetic_test = parse(key, value)?,
            "synthetic_kinds" => {
                self.synthetic_kinds = split_list(value)
                    .iter()
                    .map(|s| s.parse().map_err(|_| bad_value(key, s)))
                    .collect::<Result<_>>()?
            }
            "synthetic_noise" => self.synthetic_noise = parse(key, value)?,
            "stage" => {
                self.stage = match value {
                    "cvae" => Stage::Cvae,
                    "sampler" => Stage::Sampler,
                    "both" => Stage::Both,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "distance" => {
                self.distance = match value {
                    "euclidean" => Distance::Euclidean,
                    "squared" => Distance::Squared,
                    _ => return Err(bad_value(key, value)),
                }
            }
            _ => return self.model.set(key, value),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e = vec![
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.clone()),
            ("train_files", self.train_files.join(",")),
            ("test_files", self.test_files.join(",")),
            ("train_stride", self.train_stride.to_string()),
            ("eval_stride", self.eval_stride.to_string()),
            ("synthetic_train", self.synthetic_train.to_string()),
            ("synthetic_test", self.synthetic_test.to_string()),
            (
                "synthetic_kinds",
                self.synthetic_kinds
                    .iter()
                    .map(|k| k.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("synthetic_noise", self.synthetic_noise.to_string()),
            (
                "stage",
                match self.stage {
                    Stage::Cvae => "cvae",
                    Stage::Sampler => "sampler",
                    Stage::Both => "both",
                }
                .into(),
            ),
            (
                "distance",
                match self.distance {
                    Distance::Euclidean => "euclidean",
                    Distance::Squared => "squared",
                }
                .into(),
            ),
        ];
        e.extend(self.model.entries());
        e
    }

    pub fn to_text(&self) -> String {
        render(self.entries())
    }

    /// Parses on top of the defaults; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::default().apply_text(text)
    }

    pub fn apply_text(mut self, text: &str) -> Result<Self> {
        for (line, key, value) in lines(text)? {
            if !self.set(key, value)? {
                return Err(unknown_key(line, key));
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train_stride == 0 {
            return Err(Error::Config("train_stride must be positive".into()));
        }
        if !(self.synthetic_noise >= 0.0) {
            return Err(Error::Config("synthetic_noise must be nonnegative".into()));
        }
        if self.synthetic_kinds.is_empty() {
            return Err(Error::Config("synthetic_kinds is empty".into()));
        }
        Ok(())
    }
}

fn lines(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((i + 1, key.trim(), value.trim()));
    }
    Ok(out)
}

fn render(entries: Vec<(&'static str, String)>) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

fn unknown_key(line: usize, key: &str) -> Error {
    Error::Config(format!("line {line}: unknown key `{key}`"))
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value `{value}` for `{key}`"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad_value(key, value))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    split_list(value).iter().map(|s| parse(key, s)).collect()
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}
