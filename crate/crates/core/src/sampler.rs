//! Trajectory sampler: `K` learned affine maps of one shared Gaussian noise
//! per agent, `z_n^(k) = A_n^(k) ε_n + b_n^(k)`.
//!
//! `A = L + δI` with `L` predicted from the pooled past features, or
//! `A = diag(exp(l))` in diagonal mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::Dropout;
use crate::config::ModelConfig;
use crate::cvae::{row_sums, AgentFormer, Encoded, Gaussian, Rollout};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::params::{Linear, Mlp, ParamGroup, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SamplerParams {
    pub mlp: Mlp,
    pub head_a: Linear,
    pub head_b: Linear,
    pub k: usize,
    pub latent_dim: usize,
    pub diagonal: bool,
    pub delta: f64,
}

/// `K` latent sets with the affine maps that produced them.
#[derive(Clone, Debug)]
pub struct LatentSets {
    /// `[N × d_z]` per sample index.
    pub z: Vec<Var>,
    /// Row `n` holds `A_n^(k)` flattened row-major (`[N × d_z²]`), or the
    /// log-diagonal (`[N × d_z]`) in diagonal mode.
    pub a: Vec<Var>,
    pub b: Vec<Var>,
    /// Shared noise `[N × d_z]`.
    pub eps: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerDiagnostics {
    pub recon: f64,
    pub kl: f64,
    pub diversity: f64,
}

impl SamplerParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::Config("sampler needs k >= 1".into()));
        }
        let g = ParamGroup::Sampler;
        let (d, dz, k) = (cfg.time_dim, cfg.latent_dim, cfg.k);
        let mlp = Mlp::new(store, g, "sampler_mlp", d, &cfg.mlp_hidden, rng);
        let h = mlp.out_dim(d);
        let a_width = if cfg.sampler_diagonal { k * dz } else { k * dz * dz };
        let head_a = Linear::new(store, g, "sampler_a", h, a_width, true, rng);
        let head_b = Linear::new(store, g, "sampler_b", h, k * dz, true, rng);
        Ok(SamplerParams {
            mlp,
            head_a,
            head_b,
            k,
            latent_dim: dz,
            diagonal: cfg.sampler_diagonal,
            delta: cfg.sampler_delta,
        })
    }

    /// The first `k` latent sets for a scene; `ε` is drawn from `seed`.
    pub fn generate_latent_sets(
        &self,
        tape: &mut Tape,
        model: &AgentFormer,
        enc: &Encoded,
        k: usize,
        seed: u64,
    ) -> Result<LatentSets> {
        if k == 0 || k > self.k {
            return Err(Error::Config(format!("sampler trained for k={} cannot produce {k} samples", self.k)));
        }
        let n = tape.value(enc.pooled).rows();
        let dz = self.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = Tensor::from_parts(vec![n, dz], (0..n * dz).map(|_| StandardNormal.sample(&mut rng)).collect());
        let (a_all, b_all) = self.heads(tape, &model.store, enc.pooled)?;
        self.apply(tape, a_all, b_all, eps, k)
    }

    fn heads(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<(Var, Var)> {
        let h = self.mlp.forward(tape, store, pooled)?;
        Ok((self.head_a.forward(tape, store, h)?, self.head_b.forward(tape, store, h)?))
    }

    /// Affine maps from raw head outputs applied to `eps`.
    fn apply(&self, tape: &mut Tape, a_all: Var, b_all: Var, eps: Tensor, k: usize) -> Result<LatentSets> {
        let n = eps.rows();
        let dz = self.latent_dim;
        let eps_v = tape.constant(eps.clone());
        let mut z = Vec::with_capacity(k);
        let mut a = Vec::with_capacity(k);
        let mut b = Vec::with_capacity(k);
        // ε_n repeated once per row of A_n, and the block-sum matrix that
        // turns elementwise products back into A_n ε_n
        let tiled = (!self.diagonal).then(|| {
            let data = (0..n).flat_map(|r| (0..dz).flat_map(|_| eps.row(r).to_vec()).collect::<Vec<_>>()).collect();
            tape.constant(Tensor::from_parts(vec![n, dz * dz], data))
        });
        let block_sum = (!self.diagonal).then(|| {
            let mut data = vec![0.0; dz * dz * dz];
            for i in 0..dz {
                for j in 0..dz {
                    data[(i * dz + j) * dz + i] = 1.0;
                }
            }
            tape.constant(Tensor::from_parts(vec![dz * dz, dz], data))
        });
        for s in 0..k {
            let bk = tape.slice_cols(b_all, s * dz, dz)?;
            let zk = if self.diagonal {
                let lk = tape.slice_cols(a_all, s * dz, dz)?;
                let scale = tape.exp(lk)?;
                let m = tape.mul(scale, eps_v)?;
                a.push(lk);
                tape.add(m, bk)?
            } else {
                let lk = tape.slice_cols(a_all, s * dz * dz, dz * dz)?;
                let ident = tape.constant(identity_row(dz, self.delta));
                let ak = tape.add_row(lk, ident)?;
                let prod = tape.mul(ak, tiled.expect("full mode"))?;
                let aeps = tape.matmul(prod, block_sum.expect("full mode"))?;
                a.push(ak);
                tape.add(aeps, bk)?
            };
            b.push(bk);
            z.push(zk);
        }
        Ok(LatentSets { z, a, b, eps })
    }

    /// `KL(N(b, AAᵀ) ‖ N(μ, diag σ²))` per agent for sample `s`, `[N × 1]`.
    pub fn kl_to_prior(&self, tape: &mut Tape, sets: &LatentSets, s: usize, prior: &Gaussian) -> Result<Var> {
        let dz = self.latent_dim;
        let n = tape.value(prior.mu).rows();
        let neg_two_ls = tape.scale(prior.log_sigma, -2.0)?;
        let inv_var = tape.exp(neg_two_ls)?;
        // Σ_ij A_ij² / σ_i² and −2 log|det A|
        let (trace, log_det) = if self.diagonal {
            let two_l = tape.scale(sets.a[s], 2.0)?;
            let var = tape.exp(two_l)?;
            let t = tape.mul(var, inv_var)?;
            (row_sums(tape, t)?, row_sums(tape, sets.a[s])?)
        } else {
            let sq = tape.square(sets.a[s])?;
            let mut spread = vec![0.0; dz * dz * dz];
            for i in 0..dz {
                for j in 0..dz {
                    spread[i * dz * dz + i * dz + j] = 1.0;
                }
            }
            let spread = tape.constant(Tensor::from_parts(vec![dz, dz * dz], spread));
            let inv_tiled = tape.matmul(inv_var, spread)?;
            let t = tape.mul(sq, inv_tiled)?;
            let trace = row_sums(tape, t)?;
            let mut dets = Vec::with_capacity(n);
            for r in 0..n {
                let row = tape.select_rows(sets.a[s], &[r])?;
                let m = tape.reshape(row, &[dz, dz])?;
                let ld = tape.log_abs_det(m)?;
                dets.push(tape.reshape(ld, &[1, 1])?);
            }
            (trace, tape.concat_rows(&dets)?)
        };
        let diff = tape.sub(sets.b[s], prior.mu)?;
        let diff_sq = tape.square(diff)?;
        let maha = tape.mul(diff_sq, inv_var)?;
        let maha = row_sums(tape, maha)?;
        let log_sig = row_sums(tape, prior.log_sigma)?;
        let log_sig = tape.scale(log_sig, 2.0)?;
        let neg_det = tape.scale(log_det, -2.0)?;
        let total = tape.add(trace, maha)?;
        let total = tape.add(total, log_sig)?;
        let total = tape.add(total, neg_det)?;
        let total = tape.add_scalar(total, -(dz as f64))?;
        tape.scale(total, 0.5)
    }

    /// Best-sample reconstruction, mean clipped KL over sample indices and
    /// the pairwise diversity penalty. With `K = 1` the diversity term is
    /// left out.
    pub fn sampler_loss(
        &self,
        tape: &mut Tape,
        model: &AgentFormer,
        scene: &Scene,
        seed: u64,
    ) -> Result<(Var, SamplerDiagnostics)> {
        let mut drop = Dropout::off();
        let enc = model.encode_past(tape, scene, &mut drop)?;
        let prior = model.prior_params(tape, &enc)?;
        let k = self.k;
        let sets = self.generate_latent_sets(tape, model, &enc, k, seed)?;
        let y = model.truth(tape, scene);
        let mut preds = Vec::with_capacity(k);
        let mut errs = Vec::with_capacity(k);
        let mut kls = Vec::with_capacity(k);
        for s in 0..k {
            let dec = model.decode_future(tape, scene, &enc, sets.z[s], Rollout::Incremental, false, &mut drop)?;
            let diff = tape.sub(dec.y, y)?;
            errs.push(tape.sum_squares(diff)?);
            preds.push(dec.y);
            let kl = self.kl_to_prior(tape, &sets, s, &prior)?;
            let kl = model.clip_kl(tape, kl)?;
            kls.push(tape.sum(kl)?);
        }
        let recon = tape.min_of(&errs)?;
        let kl_cat = tape.concat_rows(&kls)?;
        let kl_sum = tape.sum(kl_cat)?;
        let kl = tape.scale(kl_sum, 1.0 / k as f64)?;
        let mut loss = tape.add(recon, kl)?;
        let mut diversity = 0.0;
        if k > 1 {
            let mut terms = Vec::with_capacity(k * (k - 1) / 2);
            for i in 0..k {
                for j in i + 1..k {
                    let d = tape.sub(preds[i], preds[j])?;
                    let d2 = tape.sum_squares(d)?;
                    let e = tape.scale(d2, -1.0 / model.cfg.sigma_d)?;
                    terms.push(tape.exp(e)?);
                }
            }
            let cat = tape.concat_rows(&terms)?;
            let sum = tape.sum(cat)?;
            // ordered pairs count each unordered pair twice
            let div = tape.scale(sum, 2.0 / (k * (k - 1)) as f64)?;
            diversity = tape.scalar(div);
            loss = tape.add(loss, div)?;
        }
        let diag = SamplerDiagnostics {
            recon: tape.scalar(recon),
            kl: tape.scalar(kl),
            diversity,
        };
        Ok((loss, diag))
    }
}

/// Row-major `δI` as a `[d²]` vector.
fn identity_row(d: usize, delta: f64) -> Tensor {
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        data[i * d + i] = delta;
    }
    Tensor::from_parts(vec![d * d], data)
}
