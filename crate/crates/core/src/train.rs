//! Training loops for the CVAE and the trajectory sampler.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::Dropout;
use crate::cvae::AgentFormer;
use crate::data::{rotate_augment, scene_center, Scene};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, step_decay, Adam, Grads};
use crate::params::ParamGroup;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: &'static str,
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-scene loss.
    pub loss: f64,
    /// Reconstruction term (ELBO MSE or best-sample error).
    pub recon: f64,
    /// Clipped KL term.
    pub kl: f64,
    /// Variety loss for the CVAE, diversity term for the sampler.
    pub extra: f64,
    /// Optimizer steps whose gradient was rescaled.
    pub clipped_steps: usize,
    pub seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "stage,epoch,lr,loss,recon,kl,extra,clipped_steps,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.stage, self.epoch, self.lr, self.loss, self.recon, self.kl, self.extra, self.clipped_steps, self.seconds
        )
    }
}

/// Deterministic per-(epoch, scene) seed.
fn derive_seed(seed: u64, epoch: usize, idx: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | idx as u64);
    rand::Rng::random(&mut rng)
}

fn prepare(scene: &Scene, augment: bool, seed: u64) -> Scene {
    let s = scene_center(scene);
    if augment {
        rotate_augment(&s, seed)
    } else {
        s
    }
}

fn add_grads(acc: &mut Grads, tape: &Tape) {
    for (id, g) in tape.param_grads() {
        match acc.iter_mut().find(|(i, _)| *i == id) {
            Some((_, a)) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
            None => acc.push((id, g.to_vec())),
        }
    }
}

fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        e => e,
    }
}

fn check_finite(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            detail: format!("loss became {loss}"),
        })
    }
}

struct Stage<'a> {
    name: &'static str,
    group: ParamGroup,
    lr: f64,
    halve_every: usize,
    epochs: usize,
    on_epoch: &'a mut dyn FnMut(&EpochLog),
}

/// Generic epoch loop: `loss_fn(model, scene, seed)` returns the scalar loss
/// already backpropagated on its tape plus `(loss, recon, kl, extra)`.
fn run<F>(model: &mut AgentFormer, scenes: &[Scene], seed: u64, stage: Stage<'_>, loss_fn: F) -> Result<Vec<EpochLog>>
where
    F: Fn(&AgentFormer, &Scene, u64) -> Result<(Tape, [f64; 4])>,
{
    if scenes.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut logs = Vec::with_capacity(stage.epochs);
    let batch = model.cfg.batch_size.max(1);
    for epoch in 0..stage.epochs {
        let start = Instant::now();
        let lr = step_decay(stage.lr, epoch, stage.halve_every);
        let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);
        let mut sums = [0.0; 4];
        let mut clipped_steps = 0;
        for chunk in order.chunks(batch) {
            let mut grads: Grads = Vec::new();
            for &i in chunk {
                let s = derive_seed(seed, epoch, i);
                let scene = prepare(&scenes[i], model.cfg.rotate_augment, s);
                let (tape, terms) = loss_fn(model, &scene, s).map_err(|e| divergence(epoch, e))?;
                check_finite(epoch, terms[0])?;
                for (a, t) in sums.iter_mut().zip(terms) {
                    *a += t;
                }
                add_grads(&mut grads, &tape);
            }
            if grads.iter().any(|(id, _)| model.store.group(*id) != stage.group) {
                return Err(Error::Gradient(format!("{} stage produced gradients outside its group", stage.name)));
            }
            let inv = 1.0 / chunk.len() as f64;
            grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|v| *v *= inv);
            let (norm, clipped) = clip_global_norm(&mut grads, model.cfg.grad_clip);
            check_finite(epoch, norm)?;
            clipped_steps += clipped as usize;
            adam.update(&mut model.store, &grads, lr);
        }
        let n = scenes.len() as f64;
        let log = EpochLog {
            stage: stage.name,
            epoch,
            lr,
            loss: sums[0] / n,
            recon: sums[1] / n,
            kl: sums[2] / n,
            extra: sums[3] / n,
            clipped_steps,
            seconds: start.elapsed().as_secs_f64(),
        };
        (stage.on_epoch)(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Minimises negative ELBO plus the weighted variety loss over `scenes`.
///
/// Each scene is centered and, when enabled, randomly rotated afresh every
/// epoch. Identical inputs and seed give bit-identical results.
pub fn train_cvae(
    model: &mut AgentFormer,
    scenes: &[Scene],
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    model.store.set_trainable(ParamGroup::Cvae, true);
    model.store.set_trainable(ParamGroup::Sampler, false);
    let cfg = model.cfg.clone();
    let stage = Stage {
        name: "cvae",
        group: ParamGroup::Cvae,
        lr: cfg.lr,
        halve_every: cfg.lr_halve_every,
        epochs: cfg.epochs,
        on_epoch,
    };
    let result = run(model, scenes, seed, stage, |m, scene, s| {
        let mut tape = Tape::new();
        let mut drop = Dropout::new(m.cfg.dropout, ChaCha8Rng::seed_from_u64(s ^ 0xd50f));
        let (loss, diag) = m.cvae_loss(&mut tape, scene, s, &mut drop)?;
        let total = tape.scalar(loss);
        tape.backward(loss)?;
        let variety = total - diag.mse - diag.kl_clipped;
        Ok((tape, [total, diag.mse, diag.kl_clipped, variety]))
    });
    model.store.set_trainable(ParamGroup::Sampler, true);
    result
}

/// Trains the sampler with every CVAE parameter frozen.
pub fn train_sampler(
    model: &mut AgentFormer,
    scenes: &[Scene],
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if model.sampler.is_none() {
        model.init_sampler(seed ^ 0x5a3b)?;
    }
    model.store.set_trainable(ParamGroup::Cvae, false);
    model.store.set_trainable(ParamGroup::Sampler, true);
    let cfg = model.cfg.clone();
    let stage = Stage {
        name: "sampler",
        group: ParamGroup::Sampler,
        lr: cfg.sampler_lr,
        halve_every: cfg.sampler_halve_every,
        epochs: cfg.sampler_epochs,
        on_epoch,
    };
    let result = run(model, scenes, seed, stage, |m, scene, s| {
        let sampler = m.sampler.as_ref().expect("initialised above");
        let mut tape = Tape::new();
        let (loss, diag) = sampler.sampler_loss(&mut tape, m, scene, s)?;
        let total = tape.scalar(loss);
        tape.backward(loss)?;
        Ok((tape, [total, diag.recon, diag.kl, diag.diversity]))
    });
    model.store.set_trainable(ParamGroup::Cvae, true);
    result
}
