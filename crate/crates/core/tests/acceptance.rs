//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::rc::Rc;
use std::time::Instant;

use agentformer_core::attention::{Decoder, Dropout, MultiHeadAttention};
use agentformer_core::config::{AttentionKind, ModelConfig};
use agentformer_core::cvae::{kl_per_agent, AgentFormer, Gaussian, Rollout};
use agentformer_core::data::{generate_mixed, scene_center, AgentId, Scene, SyntheticKind};
use agentformer_core::metrics::{ade_fde, constant_velocity_baseline, Distance, SampleSet};
use agentformer_core::params::{ParamGroup, ParamStore};
use agentformer_core::sampler::LatentSets;
use agentformer_core::seq::{Connectivity, MaskMatrix, Tag};
use agentformer_core::tensor::{finite_diff_check, finite_diff_check_params, Tape, Tensor, Var, MASKED};
use agentformer_core::train::{train_cvae, train_sampler};
use agentformer_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let o = f().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    println!(
        "[{}] {id:>2} {name}: {} ({:.1}s)",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
    o.passed
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| normal(rng)).collect()).unwrap()
}

/// `n` agents moving at constant velocity plus noise, at least 2.5 m apart at `t = 0`.
fn random_scene(rng: &mut ChaCha8Rng, n: usize, h: usize, t: usize) -> Scene {
    let mut ids: Vec<i64> = Vec::new();
    while ids.len() < n {
        let id = rng.random_range(0..1000);
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let mut past = Vec::new();
    let mut future = Vec::new();
    for i in 0..n {
        let p0 = [3.0 * i as f64 + rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)];
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let mut jitter = || 0.05 * normal(rng);
        past.push(
            (0..=h)
                .map(|s| {
                    let k = s as f64 - h as f64;
                    Some([p0[0] + k * v[0] + jitter(), p0[1] + k * v[1] + jitter()])
                })
                .collect::<Vec<_>>(),
        );
        past[i][h] = Some(p0);
        future.push((1..=t).map(|k| [p0[0] + k as f64 * v[0], p0[1] + k as f64 * v[1]]).collect());
    }
    Scene::new(ids.into_iter().map(AgentId).collect(), past, future).unwrap()
}

// ---- 1 ---------------------------------------------------------------------

type OpCheck = (&'static str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>, Tensor);

fn op_checks(rng: &mut ChaCha8Rng) -> Vec<OpCheck> {
    let x34 = random_tensor(rng, &[3, 4]);
    let c34 = random_tensor(rng, &[3, 4]);
    let c42 = random_tensor(rng, &[4, 2]);
    let c23 = random_tensor(rng, &[2, 3]);
    let w34 = random_tensor(rng, &[3, 4]);
    let away = |t: &Tensor| {
        Tensor::new(t.shape(), t.data().iter().map(|v| if v.abs() < 0.1 { v + 0.3 } else { *v }).collect()).unwrap()
    };
    let x34 = away(&x34);
    // scalar readout with fixed weights so every output entry matters
    let readout = move |w: Tensor| {
        move |t: &mut Tape, y: Var| -> Result<Var> {
            let shape = t.shape(y).to_vec();
            let w = t.constant(Tensor::new(&shape, w.data()[..shape.iter().product::<usize>()].to_vec())?);
            let p = t.mul(y, w)?;
            t.sum(p)
        }
    };
    let big = random_tensor(rng, &[64]);
    let r = move || readout(big.clone());
    let mask: Rc<[bool]> = (0..12).map(|i| i % 3 == 1).collect::<Vec<_>>().into();
    let fill_mask = Tensor::new(&[3, 4], (0..12).map(|i| (i % 4 == 2) as u8 as f64).collect()).unwrap();
    let sq = {
        let mut a = random_tensor(rng, &[3, 3]);
        for i in 0..3 {
            a.data_mut()[i * 4] += 3.0;
        }
        a
    };
    let v4 = away(&random_tensor(rng, &[4]));

    let mut checks: Vec<OpCheck> = Vec::new();
    macro_rules! check {
        ($name:expr, $x:expr, |$t:ident, $v:ident| $body:expr) => {{
            let rd = r();
            checks.push((
                $name,
                Box::new(move |$t: &mut Tape, $v: Var| -> Result<Var> {
                    let y = $body;
                    rd($t, y)
                }),
                $x.clone(),
            ));
        }};
    }
    {
        let c = c42.clone();
        check!("matmul lhs", x34, |t, x| {
            let c = t.constant(c.clone());
            t.matmul(x, c)?
        });
    }
    {
        let c = c23.clone();
        check!("matmul rhs", x34, |t, x| {
            let c = t.constant(c.clone());
            t.matmul(c, x)?
        });
    }
    check!("transpose", x34, |t, x| t.transpose(x)?);
    {
        let c = c34.clone();
        check!("add", x34, |t, x| {
            let c = t.constant(c.clone());
            t.add(x, c)?
        });
    }
    {
        let c = c34.clone();
        check!("sub", x34, |t, x| {
            let c = t.constant(c.clone());
            t.sub(c, x)?
        });
    }
    {
        let c = c34.clone();
        check!("mul", x34, |t, x| {
            let c = t.constant(c.clone());
            let y = t.mul(x, c)?;
            t.mul(y, x)?
        });
    }
    check!("scale", x34, |t, x| t.scale(x, -1.7)?);
    check!("add_scalar", x34, |t, x| {
        let y = t.add_scalar(x, 0.4)?;
        t.square(y)?
    });
    {
        let c = c34.clone();
        check!("add_row", v4, |t, b| {
            let c = t.constant(c.clone());
            t.add_row(c, b)?
        });
    }
    check!("add_row input", x34, |t, x| {
        let b = t.constant(Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]).unwrap());
        t.add_row(x, b)?
    });
    {
        let c = c34.clone();
        check!("concat_last", x34, |t, x| {
            let c = t.constant(c.clone());
            t.concat_last(&[x, c, x])?
        });
    }
    {
        let c = c34.clone();
        check!("concat_rows", x34, |t, x| {
            let c = t.constant(c.clone());
            t.concat_rows(&[c, x, x])?
        });
    }
    check!("slice_cols", x34, |t, x| t.slice_cols(x, 1, 2)?);
    check!("select_rows", x34, |t, x| t.select_rows(x, &[2, 0, 2])?);
    check!("mean_rows", x34, |t, x| t.mean_rows(x)?);
    check!("sum", x34, |t, x| {
        let s = t.sum(x)?;
        t.square(s)?
    });
    check!("mean", x34, |t, x| {
        let s = t.mean(x)?;
        t.square(s)?
    });
    check!("sum_squares", x34, |t, x| t.sum_squares(x)?);
    check!("reshape", x34, |t, x| t.reshape(x, &[4, 3])?);
    {
        let m = mask.clone();
        check!("select", x34, |t, x| {
            let y = t.square(x)?;
            t.select(m.clone(), x, y)?
        });
    }
    {
        let m = fill_mask.clone();
        check!("masked_fill", x34, |t, x| t.masked_fill(x, &m, 0.3)?);
    }
    check!("softmax_last", x34, |t, x| t.softmax_last(x)?);
    {
        let m = fill_mask.clone();
        check!("masked softmax", x34, |t, x| {
            let y = t.masked_fill(x, &m, MASKED)?;
            t.softmax_last(y)?
        });
    }
    {
        let g = Tensor::vector(vec![1.2, 0.7, -0.4, 1.0]).unwrap();
        let b = Tensor::vector(vec![0.1, 0.0, -0.3, 0.2]).unwrap();
        check!("layer_norm input", x34, |t, x| {
            let g = t.constant(g.clone());
            let b = t.constant(b.clone());
            t.layer_norm(x, g, b)?
        });
    }
    {
        let c = c34.clone();
        check!("layer_norm gain", v4, |t, g| {
            let c = t.constant(c.clone());
            let b = t.constant(Tensor::zeros(&[4]));
            t.layer_norm(c, g, b)?
        });
    }
    {
        let c = c34.clone();
        check!("layer_norm bias", v4, |t, b| {
            let c = t.constant(c.clone());
            let g = t.constant(Tensor::ones(&[4]));
            t.layer_norm(c, g, b)?
        });
    }
    check!("relu", x34, |t, x| t.relu(x)?);
    check!("tanh", x34, |t, x| t.tanh(x)?);
    check!("exp", x34, |t, x| t.exp(x)?);
    check!("log", x34, |t, x| {
        let y = t.square(x)?;
        let y = t.add_scalar(y, 0.5)?;
        t.log(y)?
    });
    check!("square", x34, |t, x| t.square(x)?);
    check!("dropout", x34, |t, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        t.dropout(x, 0.3, &mut rng)?
    });
    check!("min_of", x34, |t, x| {
        let a = t.sum_squares(x)?;
        let b = t.sum(x)?;
        let c = t.add_scalar(a, 1.0)?;
        t.min_of(&[a, b, c])?
    });
    check!("clamp_max", x34, |t, x| t.clamp_max(x, 0.2)?);
    check!("clamp_min", x34, |t, x| t.clamp_min(x, 0.2)?);
    check!("diag_embed", v4, |t, x| t.diag_embed(x)?);
    check!("log_abs_det", sq, |t, a| t.log_abs_det(a)?);
    {
        let (mp, lp) = (c34.clone(), w34.clone());
        check!("kl_diag_gaussians", x34, |t, x| {
            let mp = t.constant(mp.clone());
            let lp = t.constant(lp.clone());
            let lq = t.scale(x, 0.5)?;
            t.kl_diag_gaussians(x, lq, mp, lp)?
        });
    }
    checks
}

fn two_agent_scene(h: usize, t: usize) -> Scene {
    let past = vec![
        (0..=h).map(|s| Some([s as f64 * 0.4 - 1.0, 0.1 * s as f64])).collect(),
        (0..=h).map(|s| Some([1.5 - 0.3 * s as f64, 0.8 + 0.05 * s as f64])).collect(),
    ];
    let future = vec![
        (1..=t).map(|s| [h as f64 * 0.4 - 1.0 + 0.4 * s as f64, 0.1 * (h + s) as f64]).collect(),
        (1..=t).map(|s| [1.5 - 0.3 * (h + s) as f64, 0.8 + 0.07 * (h + s) as f64]).collect(),
    ];
    Scene::new(vec![AgentId(4), AgentId(9)], past, future).unwrap()
}

fn check_model_loss(
    model: &AgentFormer,
    loss: impl Fn(&AgentFormer, &mut Tape) -> Result<Var>,
) -> Result<agentformer_core::tensor::GradCheckReport> {
    let mut store = model.store.clone();
    finite_diff_check_params(
        &mut store,
        |tape, store| {
            let mut m = model.clone();
            m.store = store.clone();
            loss(&m, tape)
        },
        1e-4,
    )
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let checks = op_checks(&mut rng);
    let n_ops = checks.len();
    for (name, f, x) in checks {
        let r = finite_diff_check(f, &x, 1e-4)?;
        worst = worst.max(r.max_rel_error);
        if !r.passed {
            failures.push(format!("{name}: {r}"));
        }
    }

    let cfg = ModelConfig::tiny();
    let scene = two_agent_scene(cfg.past_horizon, cfg.future_horizon);
    let mut model = AgentFormer::new(cfg, 3)?;
    let elbo = check_model_loss(&model, |m, tape| {
        let mut drop = Dropout::off();
        let enc = m.encode_past(tape, &scene, &mut drop)?;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Ok(m.elbo_loss(tape, &scene, &enc, &mut rng, &mut drop)?.0)
    })?;
    model.init_sampler(5)?;
    let sampler = check_model_loss(&model, |m, tape| {
        let s = m.sampler.as_ref().expect("sampler initialised");
        Ok(s.sampler_loss(tape, m, &scene, 13)?.0)
    })?;
    for (name, r) in [("elbo_loss", &elbo), ("sampler_loss", &sampler)] {
        worst = worst.max(r.max_rel_error);
        if !r.passed {
            failures.push(format!("{name}: {r}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        failures.push(format!("runtime {secs:.1}s"));
    }
    Ok(outcome(
        failures.is_empty(),
        format!(
            "{n_ops} ops + elbo ({} params) + sampler ({} params), max rel err {worst:.2e} < 1e-4, {secs:.1}s < 60s{}",
            elbo.checked,
            sampler.checked,
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join("; ")) }
        ),
    ))
}

// ---- 2 and 3 ---------------------------------------------------------------

struct AttnCase {
    x_q: Tensor,
    x_k: Tensor,
    q_tags: Vec<Tag>,
    k_tags: Vec<Tag>,
    forbidden: MaskMatrix,
}

fn random_attn_case(rng: &mut ChaCha8Rng, d: usize) -> AttnCase {
    let lq = rng.random_range(1..=6);
    let lk = rng.random_range(1..=6);
    let tag = |rng: &mut ChaCha8Rng| Tag::new(rng.random_range(-3..=2), AgentId(rng.random_range(0..3)));
    let q_tags: Vec<Tag> = (0..lq).map(|_| tag(rng)).collect();
    let k_tags: Vec<Tag> = (0..lk).map(|_| tag(rng)).collect();
    let mut bits: Vec<Vec<bool>> = (0..lq).map(|_| (0..lk).map(|_| rng.random_bool(0.3)).collect()).collect();
    for row in &mut bits {
        if row.iter().all(|&b| b) {
            let j = rng.random_range(0..lk);
            row[j] = false;
        }
    }
    let rows: Vec<Tag> = (0..lq).map(|i| Tag::new(i as i32, AgentId(0))).collect();
    let cols: Vec<Tag> = (0..lk).map(|j| Tag::new(j as i32, AgentId(0))).collect();
    let forbidden = MaskMatrix::from_fn(&rows, &cols, |a, b| bits[a.t as usize][b.t as usize]);
    AttnCase {
        x_q: random_tensor(rng, &[lq, d]),
        x_k: random_tensor(rng, &[lk, d]),
        q_tags,
        k_tags,
        forbidden,
    }
}

fn attention_output(mha: &MultiHeadAttention, store: &ParamStore, c: &AttnCase) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xq = tape.constant(c.x_q.clone());
    let xk = tape.constant(c.x_k.clone());
    let (y, _) = mha.forward(&mut tape, store, xq, &c.q_tags, xk, &c.k_tags, Some(&c.forbidden))?;
    Ok(tape.tensor(y))
}

fn copy_param(store: &mut ParamStore, from: &str, to: &str) {
    let src = store.get(store.find(from).unwrap()).data().to_vec();
    let dst = store.find(to).unwrap();
    store.get_mut(dst).data_mut().copy_from_slice(&src);
}

fn criterion_2() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut equal = 0;
    for _ in 0..50 {
        let heads = rng.random_range(1..=3);
        let head_dim = rng.random_range(1..=4);
        let d = rng.random_range(2..=8);
        let mut aware_store = ParamStore::new();
        let aware = MultiHeadAttention::new(
            &mut aware_store,
            ParamGroup::Cvae,
            "a",
            d,
            heads * head_dim,
            heads,
            AttentionKind::AgentAware,
            &mut rng,
        )?;
        copy_param(&mut aware_store, "a.wq_self.weight", "a.wq_other.weight");
        copy_param(&mut aware_store, "a.wk_self.weight", "a.wk_other.weight");
        let mut std_store = ParamStore::new();
        let standard = MultiHeadAttention::new(
            &mut std_store,
            ParamGroup::Cvae,
            "a",
            d,
            heads * head_dim,
            heads,
            AttentionKind::Standard,
            &mut rng,
        )?;
        for id in std_store.ids().collect::<Vec<_>>() {
            let src = aware_store.get(aware_store.find(std_store.name(id)).unwrap()).data().to_vec();
            std_store.get_mut(id).data_mut().copy_from_slice(&src);
        }
        let c = random_attn_case(&mut rng, d);
        let a = attention_output(&aware, &aware_store, &c)?;
        let s = attention_output(&standard, &std_store, &c)?;
        if a.data().iter().zip(s.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            equal += 1;
        }
    }
    Ok(outcome(equal == 50, format!("{equal}/50 instances bitwise equal")))
}

/// Straight-line evaluation: per head, logits from the same-agent or
/// other-agent projections, scaled, masked, softmaxed, then values, concat
/// and output projection.
fn brute_force_attention(mha: &MultiHeadAttention, store: &ParamStore, c: &AttnCase) -> Vec<Vec<f64>> {
    let w = |id| store.get(id);
    let project = |x: &Tensor, wt: &Tensor| -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|r| {
                (0..wt.cols())
                    .map(|j| (0..wt.rows()).map(|i| x.at(r, i) * wt.at(i, j)).sum())
                    .collect()
            })
            .collect()
    };
    let qs = project(&c.x_q, w(mha.wq_self.weight));
    let ks = project(&c.x_k, w(mha.wk_self.weight));
    let qo = project(&c.x_q, w(mha.wq_other.as_ref().unwrap().weight));
    let ko = project(&c.x_k, w(mha.wk_other.as_ref().unwrap().weight));
    let v = project(&c.x_k, w(mha.wv.weight));
    let hd = mha.head_dim;
    let (lq, lk) = (c.q_tags.len(), c.k_tags.len());
    let mut concat = vec![vec![0.0; mha.heads * hd]; lq];
    for h in 0..mha.heads {
        for i in 0..lq {
            let mut logits = vec![f64::NEG_INFINITY; lk];
            for j in 0..lk {
                if c.forbidden.get(i, j) {
                    continue;
                }
                let (q, k) = if c.q_tags[i].agent == c.k_tags[j].agent { (&qs, &ks) } else { (&qo, &ko) };
                let dot: f64 = (0..hd).map(|e| q[i][h * hd + e] * k[j][h * hd + e]).sum();
                logits[j] = dot / (hd as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for e in 0..hd {
                concat[i][h * hd + e] = (0..lk).map(|j| exps[j] / z * v[j][h * hd + e]).sum();
            }
        }
    }
    let wo = w(mha.wo.weight);
    let bo = w(mha.wo.bias.unwrap());
    (0..lq)
        .map(|i| {
            (0..wo.cols())
                .map(|j| (0..wo.rows()).map(|e| concat[i][e] * wo.at(e, j)).sum::<f64>() + bo.data()[j])
                .collect()
        })
        .collect()
}

fn criterion_3() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let heads = rng.random_range(1..=3);
        let head_dim = rng.random_range(1..=4);
        let d = rng.random_range(2..=8);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(
            &mut store,
            ParamGroup::Cvae,
            "a",
            d,
            heads * head_dim,
            heads,
            AttentionKind::AgentAware,
            &mut rng,
        )?;
        let bias = mha.wo.bias.unwrap();
        let b = random_tensor(&mut rng, &[d]);
        store.get_mut(bias).data_mut().copy_from_slice(b.data());
        let c = random_attn_case(&mut rng, d);
        let got = attention_output(&mha, &store, &c)?;
        let want = brute_force_attention(&mha, &store, &c);
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                worst = worst.max((got.at(i, j) - v).abs());
            }
        }
    }
    Ok(outcome(worst <= 1e-12, format!("100 instances, max abs deviation {worst:.2e} <= 1e-12")))
}

// ---- 4, 5, 6 ---------------------------------------------------------------

fn small_cfg() -> ModelConfig {
    ModelConfig {
        past_horizon: 3,
        future_horizon: 3,
        enc_layers: 2,
        dec_layers: 2,
        ..ModelConfig::tiny()
    }
}

fn random_latents(rng: &mut ChaCha8Rng, n: usize, dz: usize) -> Tensor {
    random_tensor(rng, &[n, dz])
}

/// Encoder rows keyed by tag, and decoded positions `[agent][step]`.
fn run_model(model: &AgentFormer, scene: &Scene, z: &Tensor) -> Result<(Vec<(Tag, Vec<f64>)>, Vec<Vec<[f64; 2]>>)> {
    let mut tape = Tape::new();
    let mut drop = Dropout::off();
    let enc = model.encode_past(&mut tape, scene, &mut drop)?;
    let c = tape.tensor(enc.c);
    let rows = enc.tags.iter().enumerate().map(|(i, t)| (*t, c.row(i).to_vec())).collect();
    let zv = tape.constant(z.clone());
    let dec = model.decode_future(&mut tape, scene, &enc, zv, Rollout::Incremental, false, &mut drop)?;
    let y = tape.tensor(dec.y);
    let n = scene.num_agents();
    let tracks = (0..n)
        .map(|a| (0..scene.future_horizon()).map(|s| [y.at(s * n + a, 0), y.at(s * n + a, 1)]).collect())
        .collect();
    Ok((rows, tracks))
}

fn criterion_4() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = small_cfg();
    let model = AgentFormer::new(cfg.clone(), 4)?;
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let n = 2 + trial % 4;
        let scene = random_scene(&mut rng, n, cfg.past_horizon, cfg.future_horizon);
        let z = random_latents(&mut rng, n, cfg.latent_dim);
        let mut perm: Vec<usize> = (0..n).collect();
        while perm.iter().enumerate().all(|(i, &p)| i == p) {
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
        }
        let fresh: Vec<AgentId> = (0..n).map(|i| AgentId(5000 + 7 * i as i64 + trial as i64)).collect();
        // slot i of the relabelled scene holds original agent perm[i]
        let relabel = |id: AgentId| fresh[scene.agents.iter().position(|&a| a == id).unwrap()];
        let permuted = Scene::new(
            perm.iter().map(|&p| relabel(scene.agents[p])).collect(),
            perm.iter().map(|&p| scene.past[p].clone()).collect(),
            perm.iter().map(|&p| scene.future[p].clone()).collect(),
        )?;
        let dz = cfg.latent_dim;
        let zp = Tensor::new(&[n, dz], perm.iter().flat_map(|&p| z.row(p).to_vec()).collect())?;

        let (rows, tracks) = run_model(&model, &scene, &z)?;
        let (prows, ptracks) = run_model(&model, &permuted, &zp)?;
        for (tag, row) in &rows {
            let mapped = Tag::new(tag.t, relabel(tag.agent));
            let other = &prows.iter().find(|(t, _)| *t == mapped).unwrap().1;
            for (a, b) in row.iter().zip(other) {
                worst = worst.max((a - b).abs());
            }
        }
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in ptracks[i].iter().zip(&tracks[p]) {
                worst = worst.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
            }
        }
    }
    Ok(outcome(worst <= 1e-10, format!("20 trials with 2-5 agents, max deviation {worst:.2e} <= 1e-10")))
}

fn criterion_5() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = small_cfg();
    // decoder-level causality on arbitrary inputs
    let mut store = ParamStore::new();
    let decoder = Decoder::new(&mut store, ParamGroup::Cvae, "dec", &cfg, 2, &mut rng)?;
    let d = cfg.time_dim;
    let agents: Vec<AgentId> = (0..3).map(AgentId).collect();
    let conn = Connectivity::full(&agents);
    let steps = 4;
    let tags: Vec<Tag> = (0..steps).flat_map(|t| agents.iter().map(move |&a| Tag::new(t, a))).collect();
    let mem_tags: Vec<Tag> = (-2..=0).flat_map(|t| agents.iter().map(move |&a| Tag::new(t, a))).collect();
    let decode = |x: &Tensor, mem: &Tensor| -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mv = tape.constant(mem.clone());
        let (y, _) = decoder.forward(&mut tape, &store, xv, &tags, mv, &mem_tags, &conn, true, &mut Dropout::off())?;
        Ok(tape.tensor(y))
    };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = random_tensor(&mut rng, &[tags.len(), d]);
        let mem = random_tensor(&mut rng, &[mem_tags.len(), d]);
        let base = decode(&x, &mem)?;
        for cut in 0..steps - 1 {
            let mut pert = x.clone();
            for (r, tag) in tags.iter().enumerate() {
                if tag.t > cut {
                    for c in 0..d {
                        pert.data_mut()[r * d + c] += 3.0 * normal(&mut rng);
                    }
                }
            }
            let out = decode(&pert, &mem)?;
            for (r, tag) in tags.iter().enumerate() {
                if tag.t <= cut {
                    for c in 0..d {
                        worst = worst.max((out.at(r, c) - base.at(r, c)).abs());
                    }
                }
            }
        }
    }

    // incremental vs full-prefix rollouts of the whole model
    let model = AgentFormer::new(cfg.clone(), 5)?;
    let mut identical = 0;
    for trial in 0..20 {
        let n = 1 + trial % 4;
        let scene = random_scene(&mut rng, n, cfg.past_horizon, cfg.future_horizon);
        let z = random_latents(&mut rng, n, cfg.latent_dim);
        let mut tape = Tape::new();
        let mut drop = Dropout::off();
        let enc = model.encode_past(&mut tape, &scene, &mut drop)?;
        let zv = tape.constant(z);
        let a = model.decode_future(&mut tape, &scene, &enc, zv, Rollout::Incremental, false, &mut drop)?;
        let b = model.decode_future(&mut tape, &scene, &enc, zv, Rollout::FullPrefix, false, &mut drop)?;
        if tape.data(a.y).iter().zip(tape.data(b.y)).all(|(x, y)| x.to_bits() == y.to_bits()) {
            identical += 1;
        }
    }
    Ok(outcome(
        worst <= 1e-12 && identical == 20,
        format!("max change from later inputs {worst:.2e} <= 1e-12; incremental == full-prefix bitwise in {identical}/20"),
    ))
}

fn criterion_6() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = ModelConfig {
        eta: 1.0,
        ..small_cfg()
    };
    let model = AgentFormer::new(cfg.clone(), 6)?;
    let (h, t, dz) = (cfg.past_horizon, cfg.future_horizon, cfg.latent_dim);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let n = 2 + trial % 4;
        let scene = random_scene(&mut rng, n, h, t);
        let z = random_latents(&mut rng, n, dz);
        let focus = rng.random_range(0..n);
        let mut pert = scene.clone();
        let mut zp = z.clone();
        for m in (0..n).filter(|&m| m != focus) {
            for s in 0..=h {
                let amp = if s == h { 0.4 } else { 5.0 };
                if let Some(p) = pert.past[m][s].as_mut() {
                    p[0] += amp * rng.random_range(-1.0..1.0);
                    p[1] += amp * rng.random_range(-1.0..1.0);
                }
            }
            for p in &mut pert.future[m] {
                p[0] += 5.0 * normal(&mut rng);
                p[1] += 5.0 * normal(&mut rng);
            }
            for c in 0..dz {
                zp.data_mut()[m * dz + c] += 3.0 * normal(&mut rng);
            }
        }
        let (_, a) = run_model(&model, &scene, &z)?;
        let (_, b) = run_model(&model, &pert, &zp)?;
        for (p, q) in a[focus].iter().zip(&b[focus]) {
            worst = worst.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
        }
        // the posterior of the isolated agent ignores the others' futures
        let post = |s: &Scene| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let mut drop = Dropout::off();
            let enc = model.encode_past(&mut tape, s, &mut drop)?;
            let q = model.posterior_params(&mut tape, s, &enc, &mut drop)?;
            let mu = tape.tensor(q.mu);
            let ls = tape.tensor(q.log_sigma);
            Ok(mu.row(focus).iter().chain(ls.row(focus)).copied().collect())
        };
        for (p, q) in post(&scene)?.iter().zip(post(&pert)?) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(outcome(worst <= 1e-10, format!("20 scenes, max change of the isolated agent {worst:.2e} <= 1e-10")))
}

// ---- 8 ---------------------------------------------------------------------

fn brute_force_metrics(samples: &[Vec<Vec<[f64; 2]>>], truth: &[Vec<[f64; 2]>]) -> (f64, f64) {
    let mut ade_total = 0.0;
    let mut fde_total = 0.0;
    for (n, y) in truth.iter().enumerate() {
        let mut best_ade = f64::MAX;
        let mut best_fde = f64::MAX;
        for s in samples {
            let mut sum = 0.0;
            for (p, q) in s[n].iter().zip(y) {
                sum += ((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1])).sqrt();
            }
            let last = y.len() - 1;
            let (p, q) = (s[n][last], y[last]);
            let fde = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            if sum / y.len() as f64 <= best_ade {
                best_ade = sum / y.len() as f64;
            }
            if fde <= best_fde {
                best_fde = fde;
            }
        }
        ade_total += best_ade;
        fde_total += best_fde;
    }
    (ade_total / truth.len() as f64, fde_total / truth.len() as f64)
}

fn criterion_8() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..100 {
        let k = rng.random_range(1..=20);
        let n = rng.random_range(1..=5);
        let t = rng.random_range(1..=12);
        let point = |rng: &mut ChaCha8Rng| [3.0 * normal(rng), 3.0 * normal(rng)];
        let truth: Vec<Vec<[f64; 2]>> = (0..n).map(|_| (0..t).map(|_| point(&mut rng)).collect()).collect();
        let samples: Vec<Vec<Vec<[f64; 2]>>> = (0..k)
            .map(|_| (0..n).map(|_| (0..t).map(|_| point(&mut rng)).collect()).collect())
            .collect();
        let set = SampleSet::new(samples.clone())?;
        let r = ade_fde(&set, &truth, Distance::Euclidean)?;
        let (ade, fde) = brute_force_metrics(&samples, &truth);
        worst = worst.max((r.ade - ade).abs()).max((r.fde - fde).abs());
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for j in 1..=k {
            let r = ade_fde(&set.truncated(j), &truth, Distance::Euclidean)?;
            monotone &= r.ade <= prev.0 && r.fde <= prev.1;
            prev = (r.ade, r.fde);
        }
    }
    Ok(outcome(
        worst <= 1e-12 && monotone,
        format!("100 cases, max deviation {worst:.2e} <= 1e-12; non-increasing in K: {monotone}"),
    ))
}

// ---- 7, 9, 10 --------------------------------------------------------------

struct Eval {
    ade: f64,
    fde: f64,
    min_pair: f64,
}

fn evaluate(model: &AgentFormer, scenes: &[Scene], use_sampler: bool) -> Result<(Eval, Eval)> {
    let (mut ade, mut fde, mut cv_ade, mut cv_fde, mut pair, mut agents) = (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    for (i, scene) in scenes.iter().enumerate() {
        let s = scene_center(scene);
        let samples = model.predict(&s, 20, 1000 + i as u64, use_sampler)?;
        let r = ade_fde(&samples, &s.future, Distance::Euclidean)?;
        let c = ade_fde(&constant_velocity_baseline(&s), &s.future, Distance::Euclidean)?;
        for (m, b) in r.per_agent.iter().zip(&c.per_agent) {
            ade += m.0;
            fde += m.1;
            cv_ade += b.0;
            cv_fde += b.1;
        }
        agents += s.num_agents();
        pair += samples.min_pairwise_distance().unwrap_or(0.0);
    }
    let n = agents as f64;
    Ok((
        Eval {
            ade: ade / n,
            fde: fde / n,
            min_pair: pair / scenes.len() as f64,
        },
        Eval {
            ade: cv_ade / n,
            fde: cv_fde / n,
            min_pair: 0.0,
        },
    ))
}

struct Desk {
    cvae: Option<AgentFormer>,
    test: Vec<Scene>,
    prior: Eval,
    baseline: Eval,
    cvae_secs: f64,
    cvae_epochs: usize,
    sampler: Option<(Eval, f64, usize, bool)>,
    error: Option<String>,
}

fn desk_experiment() -> Desk {
    let cfg = ModelConfig::desk();
    let (h, t) = (cfg.past_horizon, cfg.future_horizon);
    let mut desk = Desk {
        cvae: None,
        test: Vec::new(),
        prior: Eval { ade: f64::NAN, fde: f64::NAN, min_pair: f64::NAN },
        baseline: Eval { ade: f64::NAN, fde: f64::NAN, min_pair: f64::NAN },
        cvae_secs: 0.0,
        cvae_epochs: cfg.epochs,
        sampler: None,
        error: None,
    };
    let result = (|| -> Result<()> {
        let train = generate_mixed(&SyntheticKind::ALL, 200, 0.05, 1, h, t)?;
        desk.test = generate_mixed(&SyntheticKind::ALL, 50, 0.05, 2, h, t)?;
        let mut model = AgentFormer::new(cfg.clone(), 0)?;
        let start = Instant::now();
        train_cvae(&mut model, &train, 0, &mut |_| {})?;
        desk.cvae_secs = start.elapsed().as_secs_f64();
        let (prior, baseline) = evaluate(&model, &desk.test, false)?;
        desk.prior = prior;
        desk.baseline = baseline;
        desk.cvae = Some(model.clone());

        let before = model.store.fingerprint(ParamGroup::Cvae);
        let start = Instant::now();
        train_sampler(&mut model, &train, 0, &mut |_| {})?;
        let secs = start.elapsed().as_secs_f64();
        let frozen = before == model.store.fingerprint(ParamGroup::Cvae);
        let (with_sampler, _) = evaluate(&model, &desk.test, true)?;
        desk.sampler = Some((with_sampler, secs, cfg.sampler_epochs, frozen));
        Ok(())
    })();
    desk.error = result.err().map(|e| e.to_string());
    desk
}

fn criterion_7(desk: &Desk) -> Result<Outcome> {
    let model = desk.cvae.as_ref().ok_or_else(|| agentformer_core::Error::Data("training failed".into()))?;
    let mut checked = 0;
    let mut weakest = f64::INFINITY;
    for scene in desk.test.iter().filter(|s| s.num_agents() >= 2).take(10) {
        let s = scene_center(scene);
        let far = (0..s.num_agents())
            .flat_map(|a| (0..s.num_agents()).map(move |b| (a, b)))
            .map(|(a, b)| {
                let (p, q) = (s.current(a), s.current(b));
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max);
        if far >= model.cfg.eta {
            continue;
        }
        let mut tape = Tape::new();
        let enc = model.encode_past(&mut tape, &s, &mut Dropout::off())?;
        let prior = model.prior_params(&mut tape, &enc)?;
        let z = tape.tensor(prior.mu);
        let dz = model.cfg.latent_dim;
        let (_, base) = run_model(model, &s, &z)?;
        let mut best = 0.0f64;
        for m in 0..s.num_agents() {
            let mut zp = z.clone();
            for c in 0..dz {
                zp.data_mut()[m * dz + c] += 0.1;
            }
            let (_, out) = run_model(model, &s, &zp)?;
            for other in (0..s.num_agents()).filter(|&o| o != m) {
                for (p, q) in base[other].iter().zip(&out[other]) {
                    best = best.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
                }
            }
        }
        weakest = weakest.min(best);
        checked += 1;
    }
    Ok(outcome(
        checked > 0 && weakest >= 1e-6,
        format!("{checked} trained scenes, smallest cross-agent response {weakest:.2e} >= 1e-6"),
    ))
}

fn criterion_9(desk: &Desk) -> Result<Outcome> {
    if let Some(e) = &desk.error {
        if desk.cvae.is_none() {
            return Ok(outcome(false, format!("training failed: {e}")));
        }
    }
    let (p, b) = (&desk.prior, &desk.baseline);
    let ok = p.ade <= 0.8 * b.ade && p.fde <= 0.8 * b.fde && desk.cvae_epochs <= 100 && desk.cvae_secs <= 1800.0;
    Ok(outcome(
        ok,
        format!(
            "ADE_20 {:.3} vs CV {:.3} ({:+.0}%), FDE_20 {:.3} vs CV {:.3} ({:+.0}%), {} epochs in {:.0}s",
            p.ade,
            b.ade,
            100.0 * (p.ade / b.ade - 1.0),
            p.fde,
            b.fde,
            100.0 * (p.fde / b.fde - 1.0),
            desk.cvae_epochs,
            desk.cvae_secs
        ),
    ))
}

fn criterion_10(desk: &Desk) -> Result<Outcome> {
    let Some((s, secs, epochs, frozen)) = &desk.sampler else {
        return Ok(outcome(false, format!("sampler training failed: {}", desk.error.clone().unwrap_or_default())));
    };
    let p = &desk.prior;
    let ok = s.min_pair > p.min_pair && s.ade <= 1.05 * p.ade && *frozen && *epochs <= 50 && *secs <= 900.0;
    Ok(outcome(
        ok,
        format!(
            "min pairwise distance {:.3} vs prior {:.3}, ADE_20 {:.3} vs {:.3}, CVAE weights unchanged: {frozen}, {epochs} epochs in {secs:.0}s",
            s.min_pair, p.min_pair, s.ade, p.ade
        ),
    ))
}

// ---- 11 --------------------------------------------------------------------

fn criterion_11() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples = 1_000_000;
    let dz = 4;
    let mut notes = Vec::new();
    let mut ok = true;
    let mut rel = |name: &str, analytic: f64, mc: f64, notes: &mut Vec<String>| {
        let r = (analytic - mc).abs() / analytic.abs();
        ok &= r <= 0.02;
        notes.push(format!("{name} {analytic:.4}/{mc:.4}"));
    };

    // diagonal Gaussians
    let mu_q: Vec<f64> = (0..dz).map(|_| normal(&mut rng)).collect();
    let ls_q: Vec<f64> = (0..dz).map(|_| 0.5 * normal(&mut rng)).collect();
    let mu_p: Vec<f64> = (0..dz).map(|_| normal(&mut rng)).collect();
    let ls_p: Vec<f64> = (0..dz).map(|_| 0.5 * normal(&mut rng)).collect();
    let row = |v: &[f64]| Tensor::matrix(1, v.len(), v.to_vec()).unwrap();
    let mut tape = Tape::new();
    let q = Gaussian {
        mu: tape.constant(row(&mu_q)),
        log_sigma: tape.constant(row(&ls_q)),
    };
    let p = Gaussian {
        mu: tape.constant(row(&mu_p)),
        log_sigma: tape.constant(row(&ls_p)),
    };
    let kl = kl_per_agent(&mut tape, &q, &p)?;
    let analytic = tape.scalar(kl);
    let log_p = |z: &[f64]| -> f64 {
        (0..dz)
            .map(|i| -ls_p[i] - 0.5 * ((z[i] - mu_p[i]) / ls_p[i].exp()).powi(2))
            .sum()
    };
    let mut acc = 0.0;
    let mut eps = vec![0.0; dz];
    let mut z = vec![0.0; dz];
    for _ in 0..samples {
        let mut log_q = 0.0;
        for i in 0..dz {
            eps[i] = normal(&mut rng);
            z[i] = mu_q[i] + ls_q[i].exp() * eps[i];
            log_q += -ls_q[i] - 0.5 * eps[i] * eps[i];
        }
        acc += log_q - log_p(&z);
    }
    rel("diag KL", analytic, acc / samples as f64, &mut notes);

    // full-covariance sampler KL against the diagonal prior
    let cfg = ModelConfig::tiny();
    let mut model = AgentFormer::new(cfg.clone(), 11)?;
    model.init_sampler(11)?;
    let sampler = model.sampler.clone().unwrap();
    let mut a = random_tensor(&mut rng, &[dz, dz]);
    for i in 0..dz {
        a.data_mut()[i * dz + i] += 1.5;
    }
    let b: Vec<f64> = (0..dz).map(|_| normal(&mut rng)).collect();
    let mut tape = Tape::new();
    let sets = LatentSets {
        z: vec![],
        a: vec![tape.constant(Tensor::matrix(1, dz * dz, a.data().to_vec())?)],
        b: vec![tape.constant(row(&b))],
        eps: Tensor::zeros(&[1, dz]),
    };
    let prior = Gaussian {
        mu: tape.constant(row(&mu_p)),
        log_sigma: tape.constant(row(&ls_p)),
    };
    let kl = sampler.kl_to_prior(&mut tape, &sets, 0, &prior)?;
    let analytic = tape.scalar(kl);
    let log_det = agentformer_core::tensor::log_abs_det(a.data(), dz)?.0;
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut log_q = -log_det;
        for i in 0..dz {
            eps[i] = normal(&mut rng);
            log_q -= 0.5 * eps[i] * eps[i];
        }
        for i in 0..dz {
            z[i] = b[i] + (0..dz).map(|j| a.at(i, j) * eps[j]).sum::<f64>();
        }
        acc += log_q - log_p(&z);
    }
    rel("full KL", analytic, acc / samples as f64, &mut notes);

    // diagonal sampler mode: A = diag(exp(l))
    let mut diag_sampler = sampler.clone();
    diag_sampler.diagonal = true;
    let l: Vec<f64> = (0..dz).map(|_| 0.4 * normal(&mut rng)).collect();
    let mut tape = Tape::new();
    let sets = LatentSets {
        z: vec![],
        a: vec![tape.constant(row(&l))],
        b: vec![tape.constant(row(&b))],
        eps: Tensor::zeros(&[1, dz]),
    };
    let prior = Gaussian {
        mu: tape.constant(row(&mu_p)),
        log_sigma: tape.constant(row(&ls_p)),
    };
    let kl = diag_sampler.kl_to_prior(&mut tape, &sets, 0, &prior)?;
    let analytic = tape.scalar(kl);
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut log_q = 0.0;
        for i in 0..dz {
            eps[i] = normal(&mut rng);
            z[i] = b[i] + l[i].exp() * eps[i];
            log_q += -l[i] - 0.5 * eps[i] * eps[i];
        }
        acc += log_q - log_p(&z);
    }
    rel("diag-sampler KL", analytic, acc / samples as f64, &mut notes);

    // empirical moments of generated latent sets
    let scene = two_agent_scene(cfg.past_horizon, cfg.future_horizon);
    let draws = 40_000;
    let k = sampler.k;
    let n = scene.num_agents();
    let mut sum = vec![vec![vec![0.0; dz]; n]; k];
    let mut outer = vec![vec![vec![0.0; dz * dz]; n]; k];
    let mut target: Option<(Vec<Tensor>, Vec<Tensor>)> = None;
    for seed in 0..draws {
        let mut tape = Tape::new();
        let enc = model.encode_past(&mut tape, &scene, &mut Dropout::off())?;
        let sets = sampler.generate_latent_sets(&mut tape, &model, &enc, k, seed)?;
        if target.is_none() {
            target = Some((
                sets.a.iter().map(|&v| tape.tensor(v)).collect(),
                sets.b.iter().map(|&v| tape.tensor(v)).collect(),
            ));
        }
        for s in 0..k {
            let zt = tape.value(sets.z[s]);
            for a in 0..n {
                for i in 0..dz {
                    sum[s][a][i] += zt.at(a, i);
                    for j in 0..dz {
                        outer[s][a][i * dz + j] += zt.at(a, i) * zt.at(a, j);
                    }
                }
            }
        }
    }
    let (ta, tb) = target.unwrap();
    let (mut mean_err, mut cov_err): (f64, f64) = (0.0, 0.0);
    for s in 0..k {
        for a in 0..n {
            let arow = ta[s].row(a);
            let cov: Vec<f64> = (0..dz * dz)
                .map(|ij| {
                    let (i, j) = (ij / dz, ij % dz);
                    (0..dz).map(|e| arow[i * dz + e] * arow[j * dz + e]).sum()
                })
                .collect();
            let m: Vec<f64> = sum[s][a].iter().map(|v| v / draws as f64).collect();
            for i in 0..dz {
                mean_err = mean_err.max((m[i] - tb[s].at(a, i)).abs() / cov[i * dz + i].sqrt());
            }
            let emp: Vec<f64> = (0..dz * dz)
                .map(|ij| outer[s][a][ij] / draws as f64 - m[ij / dz] * m[ij % dz])
                .collect();
            let diff: f64 = emp.iter().zip(&cov).map(|(e, c)| (e - c).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = cov.iter().map(|c| c * c).sum::<f64>().sqrt();
            cov_err = cov_err.max(diff / norm);
        }
    }
    ok &= mean_err <= 0.05 && cov_err <= 0.05;
    Ok(outcome(
        ok,
        format!(
            "analytic/MC: {}; latent sets: mean error {:.1}% of sd, covariance error {:.1}% (limits 2%, 5%)",
            notes.join(", "),
            100.0 * mean_err,
            100.0 * cov_err
        ),
    ))
}

fn main() {
    let mut all = true;
    all &= run(1, "gradient suite", criterion_1);
    all &= run(2, "tied projections reduce to standard attention", criterion_2);
    all &= run(3, "attention brute-force oracle", criterion_3);
    all &= run(4, "agent-permutation equivariance", criterion_4);
    all &= run(5, "decoder causality", criterion_5);
    all &= run(6, "connectivity isolation", criterion_6);
    eprintln!("training the desk-scale model (takes several minutes)");
    let desk = desk_experiment();
    all &= run(7, "joint-latent influence", || criterion_7(&desk));
    all &= run(8, "metric oracle", criterion_8);
    all &= run(9, "desk-scale learning", || criterion_9(&desk));
    all &= run(10, "sampler effect", || criterion_10(&desk));
    all &= run(11, "KL and latent distribution checks", criterion_11);
    if !all {
        std::process::exit(1);
    }
}
