//! The forecasting model: past encoder, factorised Gaussian prior and
//! posterior over per-agent latent codes, and an autoregressive decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{Decoder, DecoderWeights, Dropout, Encoder};
use crate::config::{KlClip, ModelConfig};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::metrics::SampleSet;
use crate::params::{init_uniform, Linear, Mlp, ParamGroup, ParamId, ParamStore};
use crate::sampler::SamplerParams;
use crate::seq::{embed_on_tape, flatten_history, timestamp, Connectivity, Tag};
use crate::tensor::{Tape, Tensor, Var};

/// Diagonal Gaussian per agent, as tape nodes of shape `[N × d_z]`.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Value-level diagonal Gaussian for one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|v| v.exp()).collect()
    }
}

impl Gaussian {
    pub fn to_params(&self, tape: &Tape) -> Vec<GaussianParams> {
        let (mu, ls) = (tape.value(self.mu), tape.value(self.log_sigma));
        (0..mu.rows())
            .map(|n| GaussianParams {
                mu: mu.row(n).to_vec(),
                log_sigma: ls.row(n).to_vec(),
            })
            .collect()
    }
}

/// Past feature sequence `C` of one scene.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub c: Var,
    pub tags: Vec<Tag>,
    pub conn: Connectivity,
    /// Agent-wise mean of `C`, `[N × d_τ]`.
    pub pooled: Var,
}

/// How the decoder revisits earlier steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rollout {
    /// Cached keys; each step only processes the newest rows.
    Incremental,
    /// Every step re-decodes the whole generated prefix.
    FullPrefix,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// Predicted positions `[T·N × 2]`, rows ordered by timestep then agent.
    pub y: Var,
    pub tags: Vec<Tag>,
    /// Attention weights of the pass producing each future step.
    pub weights: Vec<DecoderWeights>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboDiagnostics {
    pub mse: f64,
    /// Unclipped KL per agent.
    pub kl: Vec<f64>,
    pub kl_clipped: f64,
}

/// Model parameters and structure.
#[derive(Clone, Debug)]
pub struct AgentFormer {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    past_w1: ParamId,
    past_w2: ParamId,
    encoder: Encoder,
    prior_mlp: Mlp,
    prior_head: Linear,
    fut_w1: ParamId,
    fut_w2: ParamId,
    fut_decoder: Decoder,
    post_mlp: Mlp,
    post_head: Linear,
    dec_w1: ParamId,
    dec_w2: ParamId,
    decoder: Decoder,
    out_mlp: Mlp,
    out_head: Linear,
    pub sampler: Option<SamplerParams>,
}

fn embed_params(store: &mut ParamStore, name: &str, d_in: usize, d: usize, rng: &mut ChaCha8Rng) -> (ParamId, ParamId) {
    let g = ParamGroup::Cvae;
    (
        store.add(format!("{name}.w1"), g, init_uniform(rng, d_in, &[d_in, d])),
        store.add(format!("{name}.w2"), g, init_uniform(rng, 2 * d, &[2 * d, d])),
    )
}

impl AgentFormer {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = ParamGroup::Cvae;
        let (d, dz, ctx) = (cfg.time_dim, cfg.latent_dim, cfg.context_dim);
        let (past_w1, past_w2) = embed_params(&mut store, "past_embed", cfg.state_dim() + ctx, d, &mut rng);
        let encoder = Encoder::new(&mut store, g, "encoder", &cfg, cfg.enc_layers, &mut rng)?;
        let prior_mlp = Mlp::new(&mut store, g, "prior_mlp", d, &cfg.mlp_hidden, &mut rng);
        let prior_head = Linear::new(&mut store, g, "prior_head", prior_mlp.out_dim(d), 2 * dz, true, &mut rng);
        let (fut_w1, fut_w2) = embed_params(&mut store, "future_embed", 2 + ctx, d, &mut rng);
        let fut_decoder = Decoder::new(&mut store, g, "future_encoder", &cfg, cfg.dec_layers, &mut rng)?;
        let post_mlp = Mlp::new(&mut store, g, "posterior_mlp", d, &cfg.mlp_hidden, &mut rng);
        let post_head = Linear::new(&mut store, g, "posterior_head", post_mlp.out_dim(d), 2 * dz, true, &mut rng);
        let (dec_w1, dec_w2) = embed_params(&mut store, "decoder_embed", 2 + dz + ctx, d, &mut rng);
        let decoder = Decoder::new(&mut store, g, "decoder", &cfg, cfg.dec_layers, &mut rng)?;
        let out_mlp = Mlp::new(&mut store, g, "out_mlp", d, &cfg.mlp_hidden, &mut rng);
        let out_head = Linear::new(&mut store, g, "out_head", out_mlp.out_dim(d), 2, true, &mut rng);
        Ok(AgentFormer {
            cfg,
            store,
            past_w1,
            past_w2,
            encoder,
            prior_mlp,
            prior_head,
            fut_w1,
            fut_w2,
            fut_decoder,
            post_mlp,
            post_head,
            dec_w1,
            dec_w2,
            decoder,
            out_mlp,
            out_head,
            sampler: None,
        })
    }

    /// Adds freshly initialised sampler parameters, replacing any existing ones.
    pub fn init_sampler(&mut self, seed: u64) -> Result<()> {
        self.store.truncate_group(ParamGroup::Sampler);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sampler = Some(SamplerParams::new(&mut self.store, &self.cfg, &mut rng)?);
        Ok(())
    }

    pub fn check_scene(&self, scene: &Scene) -> Result<()> {
        if scene.past_horizon() != self.cfg.past_horizon || scene.future_horizon() != self.cfg.future_horizon {
            return Err(Error::Data(format!(
                "scene horizons H={} T={} differ from the model's H={} T={}",
                scene.past_horizon(),
                scene.future_horizon(),
                self.cfg.past_horizon,
                self.cfg.future_horizon
            )));
        }
        if scene.context_dim() != self.cfg.context_dim {
            return Err(Error::Data(format!(
                "scene context length {} differs from context_dim {}",
                scene.context_dim(),
                self.cfg.context_dim
            )));
        }
        Ok(())
    }

    fn context_row<'s>(&self, scene: &'s Scene, n: usize) -> &'s [f64] {
        scene.context.as_ref().map_or(&[][..], |c| &c[n])
    }

    /// Adds a sinusoidal code of each row's agent slot (ablation only).
    fn agent_code(&self, tape: &mut Tape, x: Var, tags: &[Tag], scene: &Scene) -> Result<Var> {
        if !self.cfg.agent_encoding {
            return Ok(x);
        }
        let d = self.cfg.time_dim;
        let mut data = Vec::with_capacity(tags.len() * d);
        for tag in tags {
            let slot = scene
                .agent_index(tag.agent)
                .ok_or_else(|| Error::Data(format!("agent {} not in scene", tag.agent.0)))?;
            data.extend(timestamp(slot as i32, 0, d));
        }
        let code = tape.constant(Tensor::from_parts(vec![tags.len(), d], data));
        tape.add(x, code)
    }

    fn embed(&self, tape: &mut Tape, x: Tensor, tags: &[Tag], w: (ParamId, ParamId), scene: &Scene) -> Result<Var> {
        let x = tape.constant(x);
        let e = embed_on_tape(tape, &self.store, x, tags, self.cfg.past_horizon, w.0, w.1)?;
        self.agent_code(tape, e, tags, scene)
    }

    /// Agent-wise mean of the rows of `x`, in scene agent order.
    fn pool(&self, tape: &mut Tape, x: Var, tags: &[Tag], scene: &Scene) -> Result<Var> {
        let mut rows = Vec::with_capacity(scene.num_agents());
        for &agent in &scene.agents {
            let idx: Vec<usize> = tags.iter().enumerate().filter(|(_, t)| t.agent == agent).map(|(i, _)| i).collect();
            if idx.is_empty() {
                return Err(Error::Data(format!("agent {} has no elements to pool", agent.0)));
            }
            let sel = tape.select_rows(x, &idx)?;
            rows.push(tape.mean_rows(sel)?);
        }
        tape.concat_rows(&rows)
    }

    fn gaussian_head(&self, tape: &mut Tape, mlp: &Mlp, head: &Linear, x: Var) -> Result<Gaussian> {
        let h = mlp.forward(tape, &self.store, x)?;
        let out = head.forward(tape, &self.store, h)?;
        let dz = self.cfg.latent_dim;
        Ok(Gaussian {
            mu: tape.slice_cols(out, 0, dz)?,
            log_sigma: tape.slice_cols(out, dz, dz)?,
        })
    }

    /// Past feature sequence `C`.
    pub fn encode_past(&self, tape: &mut Tape, scene: &Scene, drop: &mut Dropout) -> Result<Encoded> {
        self.check_scene(scene)?;
        let seq = flatten_history(scene, self.cfg.use_heading)?;
        let x = if self.cfg.context_dim > 0 {
            let mut data = Vec::with_capacity(seq.len() * (seq.dim() + self.cfg.context_dim));
            for (i, tag) in seq.tags.iter().enumerate() {
                let n = scene.agent_index(tag.agent).expect("tag from scene");
                data.extend_from_slice(seq.features.row(i));
                data.extend_from_slice(self.context_row(scene, n));
            }
            Tensor::from_parts(vec![seq.len(), seq.dim() + self.cfg.context_dim], data)
        } else {
            seq.features
        };
        let conn = Connectivity::new(scene, self.cfg.eta)?;
        let e = self.embed(tape, x, &seq.tags, (self.past_w1, self.past_w2), scene)?;
        let c = self.encoder.forward(tape, &self.store, e, &seq.tags, &conn, drop)?;
        let pooled = self.pool(tape, c, &seq.tags, scene)?;
        Ok(Encoded {
            c,
            tags: seq.tags,
            conn,
            pooled,
        })
    }

    pub fn prior_params(&self, tape: &mut Tape, enc: &Encoded) -> Result<Gaussian> {
        self.gaussian_head(tape, &self.prior_mlp, &self.prior_head, enc.pooled)
    }

    /// Posterior from the ground-truth future, attending to `C`.
    pub fn posterior_params(&self, tape: &mut Tape, scene: &Scene, enc: &Encoded, drop: &mut Dropout) -> Result<Gaussian> {
        let (n, t) = (scene.num_agents(), scene.future_horizon());
        let mut tags = Vec::with_capacity(n * t);
        let mut data = Vec::with_capacity(n * t * (2 + self.cfg.context_dim));
        for s in 1..=t {
            for (i, &agent) in scene.agents.iter().enumerate() {
                tags.push(Tag::new(s as i32, agent));
                data.extend_from_slice(&scene.future[i][s - 1]);
                data.extend_from_slice(self.context_row(scene, i));
            }
        }
        let x = Tensor::from_parts(vec![n * t, 2 + self.cfg.context_dim], data);
        let e = self.embed(tape, x, &tags, (self.fut_w1, self.fut_w2), scene)?;
        let (f, _) = self
            .fut_decoder
            .forward(tape, &self.store, e, &tags, enc.c, &enc.tags, &enc.conn, false, drop)?;
        let pooled = self.pool(tape, f, &tags, scene)?;
        self.gaussian_head(tape, &self.post_mlp, &self.post_head, pooled)
    }

    /// Decodes `T` future steps for latent codes `z` (`[N × d_z]`).
    #[allow(clippy::too_many_arguments)]
    pub fn decode_future(
        &self,
        tape: &mut Tape,
        scene: &Scene,
        enc: &Encoded,
        z: Var,
        rollout: Rollout,
        keep_weights: bool,
        drop: &mut Dropout,
    ) -> Result<Decoded> {
        let (n, t) = (scene.num_agents(), scene.future_horizon());
        if tape.shape(z) != [n, self.cfg.latent_dim] {
            return Err(Error::shape("decode_future", format!("latents {:?} for {n} agents", tape.shape(z))));
        }
        let origin: Vec<f64> = (0..n).flat_map(|i| scene.current(i)).collect();
        let origin = tape.constant(Tensor::from_parts(vec![n, 2], origin));
        let ctx = (self.cfg.context_dim > 0).then(|| {
            let data = (0..n).flat_map(|i| self.context_row(scene, i).to_vec()).collect();
            tape.constant(Tensor::from_parts(vec![n, self.cfg.context_dim], data))
        });
        let w1 = tape.param(&self.store, self.dec_w1);
        let w2 = tape.param(&self.store, self.dec_w2);

        let mut cache = self.decoder.start(tape, &self.store, enc.c, &enc.tags, true)?;
        let mut current = origin;
        let mut inputs: Vec<Var> = Vec::with_capacity(t);
        let mut all_tags: Vec<Tag> = Vec::with_capacity(n * t);
        let mut outputs = Vec::with_capacity(t);
        let mut weights = Vec::new();
        for step in 0..t {
            let tags: Vec<Tag> = scene.agents.iter().map(|&a| Tag::new(step as i32, a)).collect();
            let mut parts = vec![current, z];
            parts.extend(ctx);
            let x = tape.concat_last(&parts)?;
            let proj = tape.matmul(x, w1)?;
            let tau = tape.constant(crate::seq::timestamp_matrix(&tags, self.cfg.past_horizon, self.cfg.time_dim));
            let cat = tape.concat_last(&[proj, tau])?;
            let e = tape.matmul(cat, w2)?;
            let e = self.agent_code(tape, e, &tags, scene)?;
            all_tags.extend_from_slice(&tags);

            let (h, w) = match rollout {
                Rollout::Incremental => self.decoder.step(tape, &self.store, &mut cache, e, &tags, &enc.conn, drop)?,
                Rollout::FullPrefix => {
                    inputs.push(e);
                    let prefix = if inputs.len() == 1 { e } else { tape.concat_rows(&inputs)? };
                    let (h, w) = self.decoder.forward(
                        tape, &self.store, prefix, &all_tags, enc.c, &enc.tags, &enc.conn, true, drop,
                    )?;
                    let last: Vec<usize> = (step * n..(step + 1) * n).collect();
                    (tape.select_rows(h, &last)?, w)
                }
            };
            if keep_weights {
                weights.push(w);
            }
            let h = self.out_mlp.forward(tape, &self.store, h)?;
            let offset = self.out_head.forward(tape, &self.store, h)?;
            current = tape.add(origin, offset)?;
            outputs.push(current);
        }
        let y = tape.concat_rows(&outputs)?;
        let tags = (1..=t as i32)
            .flat_map(|s| scene.agents.iter().map(move |&a| Tag::new(s, a)))
            .collect();
        Ok(Decoded { y, tags, weights })
    }

    /// `z = μ + σ ⊙ ε` with `ε ~ N(0, I)`.
    pub fn sample_latents(&self, tape: &mut Tape, g: &Gaussian, rng: &mut ChaCha8Rng) -> Result<Var> {
        let shape = tape.shape(g.mu).to_vec();
        let len = shape.iter().product();
        let eps: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        let eps = tape.constant(Tensor::from_parts(shape, eps));
        let sigma = tape.exp(g.log_sigma)?;
        let noise = tape.mul(sigma, eps)?;
        tape.add(g.mu, noise)
    }

    /// Ground truth as a constant in the decoder's row layout.
    pub fn truth(&self, tape: &mut Tape, scene: &Scene) -> Var {
        let (n, t) = (scene.num_agents(), scene.future_horizon());
        let data = (0..t).flat_map(|s| (0..n).flat_map(move |i| scene.future[i][s])).collect();
        tape.constant(Tensor::from_parts(vec![n * t, 2], data))
    }

    pub(crate) fn clip_kl(&self, tape: &mut Tape, kl: Var) -> Result<Var> {
        match self.cfg.kl_clip_mode {
            KlClip::Upper => tape.clamp_max(kl, self.cfg.kl_clip),
            KlClip::Lower => tape.clamp_min(kl, self.cfg.kl_clip),
        }
    }

    /// Negative ELBO with a single posterior sample.
    pub fn elbo_loss(
        &self,
        tape: &mut Tape,
        scene: &Scene,
        enc: &Encoded,
        rng: &mut ChaCha8Rng,
        drop: &mut Dropout,
    ) -> Result<(Var, ElboDiagnostics)> {
        let prior = self.prior_params(tape, enc)?;
        let post = self.posterior_params(tape, scene, enc, drop)?;
        let z = self.sample_latents(tape, &post, rng)?;
        let dec = self.decode_future(tape, scene, enc, z, Rollout::Incremental, false, drop)?;
        let y = self.truth(tape, scene);
        let diff = tape.sub(dec.y, y)?;
        let sq = tape.sum_squares(diff)?;
        let mse = tape.scale(sq, 1.0 / (2.0 * self.cfg.beta))?;
        let kl = kl_per_agent(tape, &post, &prior)?;
        let clipped = self.clip_kl(tape, kl)?;
        let kl_sum = tape.sum(clipped)?;
        let loss = tape.add(mse, kl_sum)?;
        let diag = ElboDiagnostics {
            mse: tape.scalar(mse),
            kl: tape.data(kl).to_vec(),
            kl_clipped: tape.scalar(kl_sum),
        };
        Ok((loss, diag))
    }

    /// Best of `k` prior samples by mean squared displacement. Sample `i`
    /// draws from stream `i` of `seed`, so smaller `k` uses a prefix of the
    /// same samples.
    pub fn variety_loss(
        &self,
        tape: &mut Tape,
        scene: &Scene,
        enc: &Encoded,
        k: usize,
        seed: u64,
        drop: &mut Dropout,
    ) -> Result<Var> {
        if k == 0 {
            return Err(Error::Config("variety loss needs k >= 1".into()));
        }
        let prior = self.prior_params(tape, enc)?;
        let y = self.truth(tape, scene);
        let norm = 1.0 / (scene.num_agents() * scene.future_horizon()) as f64;
        let mut errs = Vec::with_capacity(k);
        for i in 0..k {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let z = self.sample_latents(tape, &prior, &mut rng)?;
            let dec = self.decode_future(tape, scene, enc, z, Rollout::Incremental, false, drop)?;
            let diff = tape.sub(dec.y, y)?;
            let sq = tape.sum_squares(diff)?;
            errs.push(tape.scale(sq, norm)?);
        }
        tape.min_of(&errs)
    }

    /// Training objective for one scene: negative ELBO plus weighted variety loss.
    pub fn cvae_loss(&self, tape: &mut Tape, scene: &Scene, seed: u64, drop: &mut Dropout) -> Result<(Var, ElboDiagnostics)> {
        let enc = self.encode_past(tape, scene, drop)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (elbo, diag) = self.elbo_loss(tape, scene, &enc, &mut rng, drop)?;
        if self.cfg.variety_weight == 0.0 {
            return Ok((elbo, diag));
        }
        let v = self.variety_loss(tape, scene, &enc, self.cfg.variety_k, seed ^ 0x5eed, drop)?;
        let v = tape.scale(v, self.cfg.variety_weight)?;
        Ok((tape.add(elbo, v)?, diag))
    }

    /// `k` futures in the scene's frame: through the sampler when one is
    /// trained and `use_sampler` is set, otherwise by independent prior draws.
    pub fn predict(&self, scene: &Scene, k: usize, seed: u64, use_sampler: bool) -> Result<SampleSet> {
        let mut tape = Tape::new();
        let mut drop = Dropout::off();
        let enc = self.encode_past(&mut tape, scene, &mut drop)?;
        let latents = match (&self.sampler, use_sampler) {
            (Some(s), true) => s.generate_latent_sets(&mut tape, self, &enc, k, seed)?.z,
            _ => {
                let prior = self.prior_params(&mut tape, &enc)?;
                (0..k)
                    .map(|i| {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(i as u64);
                        self.sample_latents(&mut tape, &prior, &mut rng)
                    })
                    .collect::<Result<_>>()?
            }
        };
        let mut samples = Vec::with_capacity(k);
        for z in latents {
            let dec = self.decode_future(&mut tape, scene, &enc, z, Rollout::Incremental, false, &mut drop)?;
            samples.push(rows_to_tracks(tape.value(dec.y), scene.num_agents()));
        }
        SampleSet::new(samples)
    }
}

/// `[T·N × 2]` rows to `[agent][step]` positions.
pub fn rows_to_tracks(y: &Tensor, n: usize) -> Vec<Vec<[f64; 2]>> {
    let t = y.rows() / n;
    (0..n)
        .map(|i| (0..t).map(|s| [y.at(s * n + i, 0), y.at(s * n + i, 1)]).collect())
        .collect()
}

/// Per-agent `KL(q ‖ p)` between diagonal Gaussians, `[N × 1]`.
pub fn kl_per_agent(tape: &mut Tape, q: &Gaussian, p: &Gaussian) -> Result<Var> {
    let log_ratio = tape.sub(p.log_sigma, q.log_sigma)?;
    let two_lq = tape.scale(q.log_sigma, 2.0)?;
    let var_q = tape.exp(two_lq)?;
    let diff = tape.sub(q.mu, p.mu)?;
    let diff_sq = tape.square(diff)?;
    let num = tape.add(var_q, diff_sq)?;
    let neg_two_lp = tape.scale(p.log_sigma, -2.0)?;
    let inv_var_p = tape.exp(neg_two_lp)?;
    let frac = tape.mul(num, inv_var_p)?;
    let half = tape.scale(frac, 0.5)?;
    let terms = tape.add(log_ratio, half)?;
    let terms = tape.add_scalar(terms, -0.5)?;
    row_sums(tape, terms)
}

/// `[N × d] → [N × 1]`.
pub fn row_sums(tape: &mut Tape, x: Var) -> Result<Var> {
    let ones = tape.constant(Tensor::ones(&[tape.value(x).cols(), 1]));
    tape.matmul(x, ones)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticKind};

    fn setup() -> (AgentFormer, Scene) {
        let cfg = ModelConfig::tiny();
        let scene = generate_synthetic(SyntheticKind::Crossing, 1, 0.05, 3, cfg.past_horizon, cfg.future_horizon)
            .unwrap()
            .remove(0);
        let scene = crate::data::scene_center(&scene);
        (AgentFormer::new(cfg, 1).unwrap(), scene)
    }

    #[test]
    fn shapes_and_tags() {
        let (m, s) = setup();
        let mut tape = Tape::new();
        let mut drop = Dropout::off();
        let enc = m.encode_past(&mut tape, &s, &mut drop).unwrap();
        let seq = flatten_history(&s, false).unwrap();
        assert_eq!(enc.tags, seq.tags);
        let prior = m.prior_params(&mut tape, &enc).unwrap();
        assert_eq!(tape.shape(prior.mu), [s.num_agents(), 4]);
        let post = m.posterior_params(&mut tape, &s, &enc, &mut drop).unwrap();
        assert_eq!(tape.shape(post.log_sigma), [s.num_agents(), 4]);
        let dec = m.decode_future(&mut tape, &s, &enc, prior.mu, Rollout::Incremental, false, &mut drop).unwrap();
        assert_eq!(tape.shape(dec.y), [2 * s.num_agents(), 2]);
        assert_eq!(dec.tags.len(), 2 * s.num_agents());
    }

    #[test]
    fn kl_zero_when_posterior_is_prior() {
        let (m, s) = setup();
        let mut tape = Tape::new();
        let enc = m.encode_past(&mut tape, &s, &mut Dropout::off()).unwrap();
        let prior = m.prior_params(&mut tape, &enc).unwrap();
        let kl = kl_per_agent(&mut tape, &prior, &prior).unwrap();
        assert!(tape.data(kl).iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_sigma_sample_is_mean() {
        let (m, _) = setup();
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(1, 2, vec![0.3, -1.0]).unwrap());
        let ls = tape.constant(Tensor::full(&[1, 2], -700.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = m.sample_latents(&mut tape, &Gaussian { mu, log_sigma: ls }, &mut rng).unwrap();
        assert_eq!(tape.data(z), &[0.3, -1.0]);
    }

    #[test]
    fn variety_k1_is_single_sample_mse() {
        let (m, s) = setup();
        let mut tape = Tape::new();
        let mut drop = Dropout::off();
        let enc = m.encode_past(&mut tape, &s, &mut drop).unwrap();
        let v1 = m.variety_loss(&mut tape, &s, &enc, 1, 9, &mut drop).unwrap();
        let v5 = m.variety_loss(&mut tape, &s, &enc, 5, 9, &mut drop).unwrap();
        let prior = m.prior_params(&mut tape, &enc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(0);
        let z = m.sample_latents(&mut tape, &prior, &mut rng).unwrap();
        let dec = m.decode_future(&mut tape, &s, &enc, z, Rollout::Incremental, false, &mut drop).unwrap();
        let y = m.truth(&mut tape, &s);
        let mse: f64 = tape
            .data(dec.y)
            .iter()
            .zip(tape.data(y))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / (2 * s.num_agents()) as f64;
        assert!((tape.scalar(v1) - mse).abs() < 1e-12);
        assert!(tape.scalar(v5) <= tape.scalar(v1));
    }

    #[test]
    fn predictions_are_seeded() {
        let (m, s) = setup();
        assert_eq!(m.predict(&s, 3, 4, false).unwrap(), m.predict(&s, 3, 4, false).unwrap());
    }
}
