//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numerical divergence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::Dropout;
use crate::checkpoint;
use crate::config::{RunConfig, Stage};
use crate::cvae::{AgentFormer, Rollout};
use crate::data::{build_scenes, generate_mixed, load_trajectory_file, scene_center, AgentId, Scene};
use crate::error::{Error, Result};
use crate::metrics::{ade_fde, constant_velocity_baseline};
use crate::tensor::Tape;
use crate::train::{train_cvae, train_sampler, EpochLog};

#[derive(Parser, Debug)]
#[command(name = "agentformer", version, about = "Agent-aware transformer trajectory forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint to load (defaults to `<out>/model.ckpt`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Number of samples per scene (defaults to `k`).
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Test scene index.
    #[arg(long, global = true)]
    pub scene: Option<usize>,
    /// Extra `key=value` configuration overrides.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the CVAE and/or the sampler.
    Train,
    /// Best-of-K metrics on the test scenes, with the constant-velocity baseline.
    Eval,
    /// Export sampled futures with past and ground truth.
    Sample,
    /// Export decoder attention for one predicted position.
    VizAttention {
        /// Agent id of the target.
        #[arg(long)]
        agent: i64,
        /// Future timestep of the target (1..=T).
        #[arg(long)]
        t: usize,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::Gradient(_) | Error::Domain { .. } => 3,
        _ => 2,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut text = match &common.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    for o in &common.overrides {
        if !o.contains('=') {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got `{o}`")));
        }
        text.push('\n');
        text.push_str(o);
    }
    let mut cfg = RunConfig::from_text(&text)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.display().to_string();
    }
    Ok(cfg)
}

fn load_scenes(cfg: &RunConfig, files: &[String], stride: usize, synthetic: usize, seed: u64) -> Result<Vec<Scene>> {
    let (h, t) = (cfg.model.past_horizon, cfg.model.future_horizon);
    let mut scenes = Vec::new();
    for f in files {
        let records = load_trajectory_file(Path::new(f))?;
        for mut s in build_scenes(&records, h, t, stride)? {
            s.source = f.clone();
            scenes.push(s);
        }
    }
    if synthetic > 0 {
        scenes.extend(generate_mixed(&cfg.synthetic_kinds, synthetic, cfg.synthetic_noise, seed, h, t)?);
    }
    Ok(scenes)
}

pub fn train_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    load_scenes(cfg, &cfg.train_files, cfg.train_stride, cfg.synthetic_train, cfg.seed)
}

/// Held-out scenes; synthetic ones use a seed distinct from training.
pub fn test_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    load_scenes(
        cfg,
        &cfg.test_files,
        cfg.eval_stride(),
        cfg.synthetic_test,
        cfg.seed.wrapping_add(0x7e57),
    )
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let p = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn checkpoint_path(common: &Common, cfg: &RunConfig) -> PathBuf {
    common
        .checkpoint
        .clone()
        .unwrap_or_else(|| Path::new(&cfg.out_dir).join("model.ckpt"))
}

fn write_manifest(dir: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    let mut m = String::new();
    let _ = writeln!(m, "# agentformer {} {}", env!("CARGO_PKG_VERSION"), command);
    let _ = writeln!(m, "# rerun with: agentformer {command} --config manifest.txt");
    m.push_str(&cfg.to_text());
    write(&dir.join("manifest.txt"), &m)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = run_config(&cli.common)?;
    match &cli.command {
        Command::Train => cmd_train(&cli.common, &cfg),
        Command::Eval => cmd_eval(&cli.common, &cfg),
        Command::Sample => cmd_sample(&cli.common, &cfg),
        Command::VizAttention { agent, t } => cmd_viz_attention(&cli.common, &cfg, AgentId(*agent), *t),
    }
}

fn cmd_train(common: &Common, cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    write_manifest(&dir, cfg, "train")?;
    let scenes = train_scenes(cfg)?;
    if scenes.is_empty() {
        return Err(Error::Data("no training scenes: set train_files or synthetic_train".into()));
    }
    eprintln!("{} training scenes", scenes.len());
    let ckpt = dir.join("model.ckpt");
    let mut log = String::from(EpochLog::CSV_HEADER);
    log.push('\n');
    let log_path = dir.join("train_log.csv");
    let mut on_epoch = |l: &EpochLog| {
        eprintln!(
            "{} epoch {:>3} lr {:.2e} loss {:.4} ({:.1}s)",
            l.stage, l.epoch, l.lr, l.loss, l.seconds
        );
        log.push_str(&l.csv_row());
        log.push('\n');
        let _ = fs::write(&log_path, &log);
    };
    let mut model = match cfg.stage {
        Stage::Sampler => {
            let path = common.checkpoint.as_ref().ok_or_else(|| {
                Error::Config("sampler training needs a trained CVAE: pass --checkpoint".into())
            })?;
            let m = checkpoint::load(path)?;
            if m.cfg.past_horizon != cfg.model.past_horizon || m.cfg.future_horizon != cfg.model.future_horizon {
                return Err(Error::Config("checkpoint horizons differ from the configuration".into()));
            }
            m
        }
        _ => {
            let mut m = AgentFormer::new(cfg.model.clone(), cfg.seed)?;
            train_cvae(&mut m, &scenes, cfg.seed, &mut on_epoch)?;
            checkpoint::save(&m, &ckpt)?;
            m
        }
    };
    if matches!(cfg.stage, Stage::Sampler | Stage::Both) {
        if cfg.stage == Stage::Sampler {
            // sampler hyperparameters come from the run configuration
            let mut sampler_cfg = model.cfg.clone();
            sampler_cfg.k = cfg.model.k;
            sampler_cfg.sigma_d = cfg.model.sigma_d;
            sampler_cfg.sampler_lr = cfg.model.sampler_lr;
            sampler_cfg.sampler_epochs = cfg.model.sampler_epochs;
            sampler_cfg.sampler_halve_every = cfg.model.sampler_halve_every;
            sampler_cfg.sampler_diagonal = cfg.model.sampler_diagonal;
            model.cfg = sampler_cfg;
            model.init_sampler(cfg.seed ^ 0x5a3b)?;
        }
        train_sampler(&mut model, &scenes, cfg.seed, &mut on_epoch)?;
        checkpoint::save(&model, &ckpt)?;
    }
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

fn load_model(common: &Common, cfg: &RunConfig) -> Result<AgentFormer> {
    let model = checkpoint::load(&checkpoint_path(common, cfg))?;
    if model.cfg.past_horizon != cfg.model.past_horizon || model.cfg.future_horizon != cfg.model.future_horizon {
        return Err(Error::Config(format!(
            "checkpoint has H={} T={} but the configuration has H={} T={}",
            model.cfg.past_horizon, model.cfg.future_horizon, cfg.model.past_horizon, cfg.model.future_horizon
        )));
    }
    Ok(model)
}

fn cmd_eval(common: &Common, cfg: &RunConfig) -> Result<()> {
    let model = load_model(common, cfg)?;
    let scenes = test_scenes(cfg)?;
    if scenes.is_empty() {
        return Err(Error::Data("no test scenes: set test_files or synthetic_test".into()));
    }
    let k = common.k.unwrap_or(model.cfg.k);
    let method = if model.sampler.is_some() { "sampler" } else { "prior" };
    let (mut ade, mut fde, mut cv_ade, mut cv_fde, mut agents) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (i, scene) in scenes.iter().enumerate() {
        let s = scene_center(scene);
        let samples = model.predict(&s, k, cfg.seed.wrapping_add(i as u64), true)?;
        let r = ade_fde(&samples, &s.future, cfg.distance)?;
        let c = ade_fde(&constant_velocity_baseline(&s), &s.future, cfg.distance)?;
        for (m, b) in r.per_agent.iter().zip(&c.per_agent) {
            ade += m.0;
            fde += m.1;
            cv_ade += b.0;
            cv_fde += b.1;
        }
        agents += s.num_agents();
    }
    let n = agents as f64;
    let mut report = String::new();
    let _ = writeln!(report, "scenes {}  agents {}  K {}", scenes.len(), agents, k);
    let _ = writeln!(report, "{:<20} {:>10} {:>10}", "method", "ADE", "FDE");
    let _ = writeln!(report, "{:<20} {:>10.4} {:>10.4}", format!("agentformer/{method}"), ade / n, fde / n);
    let _ = writeln!(report, "{:<20} {:>10.4} {:>10.4}", "const_velocity", cv_ade / n, cv_fde / n);
    print!("{report}");
    let kv = format!(
        "scenes = {}\nagents = {}\nk = {}\nmethod = {method}\nade = {}\nfde = {}\nbaseline_ade = {}\nbaseline_fde = {}\n",
        scenes.len(),
        agents,
        k,
        ade / n,
        fde / n,
        cv_ade / n,
        cv_fde / n
    );
    let dir = out_dir(cfg)?;
    write_manifest(&dir, cfg, "eval")?;
    write(&dir.join("metrics.txt"), &report)?;
    write(&dir.join("metrics.kv"), &kv)
}

fn pick_scenes(common: &Common, scenes: Vec<Scene>) -> Result<Vec<(usize, Scene)>> {
    match common.scene {
        Some(i) => {
            let n = scenes.len();
            let s = scenes
                .into_iter()
                .nth(i)
                .ok_or_else(|| Error::Data(format!("unknown scene id {i} ({n} test scenes)")))?;
            Ok(vec![(i, s)])
        }
        None => Ok(scenes.into_iter().enumerate().collect()),
    }
}

/// Rows `scene,kind,sample,agent,t,x,y` in world coordinates; `sample` is -1
/// for past and ground-truth rows.
pub fn sample_rows(scene_id: usize, scene: &Scene, samples: &crate::metrics::SampleSet) -> Vec<String> {
    let mut rows = Vec::new();
    let h = scene.past_horizon() as i32;
    for (n, agent) in scene.agents.iter().enumerate() {
        for t in -h..=0 {
            if let Some(p) = scene.position(n, t) {
                let w = scene.to_world(p);
                rows.push(format!("{scene_id},past,-1,{},{t},{},{}", agent.0, w[0], w[1]));
            }
        }
        for (i, p) in scene.future[n].iter().enumerate() {
            let w = scene.to_world(*p);
            rows.push(format!("{scene_id},truth,-1,{},{},{},{}", agent.0, i + 1, w[0], w[1]));
        }
    }
    for (k, s) in samples.samples.iter().enumerate() {
        for (n, agent) in scene.agents.iter().enumerate() {
            for (i, p) in s[n].iter().enumerate() {
                let w = scene.to_world(*p);
                rows.push(format!("{scene_id},sample,{k},{},{},{},{}", agent.0, i + 1, w[0], w[1]));
            }
        }
    }
    rows
}

fn cmd_sample(common: &Common, cfg: &RunConfig) -> Result<()> {
    let model = load_model(common, cfg)?;
    let k = common.k.unwrap_or(model.cfg.k);
    let mut out = String::from("scene,kind,sample,agent,t,x,y\n");
    for (i, scene) in pick_scenes(common, test_scenes(cfg)?)? {
        let s = scene_center(&scene);
        let samples = model.predict(&s, k, cfg.seed.wrapping_add(i as u64), true)?;
        for row in sample_rows(i, &s, &samples) {
            out.push_str(&row);
            out.push('\n');
        }
    }
    let dir = out_dir(cfg)?;
    write_manifest(&dir, cfg, "sample")?;
    let path = dir.join("samples.csv");
    write(&path, &out)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Attention rows of the decoder pass that produces `agent`'s position at
/// future step `t`, decoding from the prior mean.
pub fn attention_rows(model: &AgentFormer, scene: &Scene, agent: AgentId, t: usize) -> Result<Vec<String>> {
    if t == 0 || t > scene.future_horizon() {
        return Err(Error::Data(format!("target step {t} outside 1..={}", scene.future_horizon())));
    }
    if scene.agent_index(agent).is_none() {
        return Err(Error::Data(format!("agent {} not in scene", agent.0)));
    }
    let mut tape = Tape::new();
    let mut drop = Dropout::off();
    let enc = model.encode_past(&mut tape, scene, &mut drop)?;
    let prior = model.prior_params(&mut tape, &enc)?;
    let dec = model.decode_future(&mut tape, scene, &enc, prior.mu, Rollout::Incremental, true, &mut drop)?;
    let mut rows = Vec::new();
    for (layer, (w_self, w_cross)) in dec.weights[t - 1].iter().enumerate() {
        for (block, w) in [("self", w_self), ("cross", w_cross)] {
            for (q, k, head, weight) in w.triplets() {
                if q.agent == agent {
                    rows.push(format!(
                        "{},{},{},{},{head},{layer},{block},{weight}",
                        q.agent.0, q.t, k.agent.0, k.t
                    ));
                }
            }
        }
    }
    Ok(rows)
}

fn cmd_viz_attention(common: &Common, cfg: &RunConfig, agent: AgentId, t: usize) -> Result<()> {
    let model = load_model(common, cfg)?;
    let id = common
        .scene
        .ok_or_else(|| Error::Config("viz-attention needs --scene".into()))?;
    let (_, scene) = pick_scenes(common, test_scenes(cfg)?)?.remove(0);
    let s = scene_center(&scene);
    let mut out = String::from("query_agent,query_t,key_agent,key_t,head,layer,block,weight\n");
    for row in attention_rows(&model, &s, agent, t)? {
        out.push_str(&row);
        out.push('\n');
    }
    let dir = out_dir(cfg)?;
    write_manifest(&dir, cfg, "viz-attention")?;
    let path = dir.join(format!("attention_scene{id}_agent{}_t{t}.csv", agent.0));
    write(&path, &out)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}
