//! Parametric multi-agent scenarios with known ground truth.
//!
//! Speeds are in metres per timestep (roughly 1–1.6 m/s at 0.4 s steps).

use std::f64::consts::{FRAC_PI_3, TAU};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AgentId, Scene};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyntheticKind {
    /// Two straight constant-velocity walkers whose paths cross after `t = 0`.
    Crossing,
    /// A leader on a constant-turn-rate arc with one or two followers
    /// retracing its path at a fixed lag.
    Following,
    /// Head-on approach resolved by a lateral sidestep to either side.
    Avoidance,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 3] = [
        SyntheticKind::Crossing,
        SyntheticKind::Following,
        SyntheticKind::Avoidance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Crossing => "crossing",
            SyntheticKind::Following => "following",
            SyntheticKind::Avoidance => "avoidance",
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario kind `{s}`")))
    }
}

const SPEED: (f64, f64) = (0.4, 0.64);

/// Trajectory as a function of the timestep, sampled over `-h..=t`.
type Path = Box<dyn Fn(f64) -> [f64; 2]>;

fn straight(origin: [f64; 2], heading: f64, speed: f64) -> Path {
    Box::new(move |t| [origin[0] + speed * t * heading.cos(), origin[1] + speed * t * heading.sin()])
}

fn crossing(rng: &mut ChaCha8Rng, t_max: usize) -> Vec<Path> {
    let hi = (t_max as f64 - 1.0).max(1.5);
    let t1 = rng.random_range(1.0..hi);
    let mut t2 = rng.random_range(1.0..hi);
    if (t1 - t2).abs() < 1.0 {
        t2 = t1 + 1.5;
    }
    let h1 = rng.random_range(0.0..TAU);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let h2 = h1 + side * rng.random_range(FRAC_PI_3..2.0 * FRAC_PI_3);
    let (v1, v2) = (rng.random_range(SPEED.0..SPEED.1), rng.random_range(SPEED.0..SPEED.1));
    // p_i(t) = v_i d_i (t - t_i) passes through the origin at t_i
    let o1 = [-v1 * t1 * h1.cos(), -v1 * t1 * h1.sin()];
    let o2 = [-v2 * t2 * h2.cos(), -v2 * t2 * h2.sin()];
    vec![straight(o1, h1, v1), straight(o2, h2, v2)]
}

fn following(rng: &mut ChaCha8Rng) -> Vec<Path> {
    let speed = rng.random_range(SPEED.0..SPEED.1);
    let omega = rng.random_range(0.04..0.12) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let h0 = rng.random_range(0.0..TAU);
    // closed form of a constant-speed, constant-turn-rate arc through the origin
    let leader = move |t: f64| {
        let th = h0 + omega * t;
        [
            speed / omega * (th.sin() - h0.sin()),
            -speed / omega * (th.cos() - h0.cos()),
        ]
    };
    let lag = rng.random_range(2..=4) as f64;
    let mut paths: Vec<Path> = vec![Box::new(leader), Box::new(move |t| leader(t - lag))];
    if rng.random_bool(0.5) {
        paths.push(Box::new(move |t| leader(t - 2.0 * lag)));
    }
    paths
}

fn avoidance(rng: &mut ChaCha8Rng) -> Vec<Path> {
    let meet = rng.random_range(3.0..8.0);
    let (v1, v2) = (rng.random_range(SPEED.0..SPEED.1), rng.random_range(SPEED.0..SPEED.1));
    let amp = rng.random_range(0.4..0.8);
    let width = rng.random_range(1.5..2.5);
    let lane = rng.random_range(-0.2..0.2);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let bump = move |t: f64| amp * (-(t - meet).powi(2) / (2.0 * width * width)).exp();
    vec![
        Box::new(move |t| [v1 * (t - meet), -side * bump(t)]),
        Box::new(move |t| [-v2 * (t - meet), lane + side * bump(t)]),
    ]
}

fn bystander(rng: &mut ChaCha8Rng) -> Path {
    let r = rng.random_range(5.0..9.0);
    let a = rng.random_range(0.0..TAU);
    let speed = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(SPEED.0..SPEED.1) };
    straight([r * a.cos(), r * a.sin()], rng.random_range(0.0..TAU), speed)
}

fn scene_from_paths(paths: &[Path], h: usize, t: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let theta = rng.random_range(0.0..TAU);
    let shift = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
    let (s, c) = theta.sin_cos();
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut sample = |f: &Path, k: i64| {
        let p = f(k as f64);
        let mut q = [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1]];
        if noise > 0.0 {
            q[0] += normal.sample(rng);
            q[1] += normal.sample(rng);
        }
        q
    };
    let (h, t) = (h as i64, t as i64);
    let mut past = Vec::new();
    let mut future = Vec::new();
    for f in paths {
        past.push((-h..=0).map(|k| Some(sample(f, k))).collect());
        future.push((1..=t).map(|k| sample(f, k)).collect());
    }
    Scene::new((0..paths.len() as i64).map(AgentId).collect(), past, future)
}

/// `n` scenes of one kind with past horizon `h` and future horizon `t`.
pub fn generate_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64, h: usize, t: usize) -> Result<Vec<Scene>> {
    generate_mixed(&[kind], n, noise, seed, h, t)
}

/// `n` scenes cycling through `kinds`.
pub fn generate_mixed(kinds: &[SyntheticKind], n: usize, noise: f64, seed: u64, h: usize, t: usize) -> Result<Vec<Scene>> {
    if kinds.is_empty() {
        return Err(Error::Config("no scenario kinds given".into()));
    }
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let kind = kinds[i % kinds.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut paths = match kind {
            SyntheticKind::Crossing => crossing(&mut rng, t),
            SyntheticKind::Following => following(&mut rng),
            SyntheticKind::Avoidance => avoidance(&mut rng),
        };
        if paths.len() < 4 && rng.random_bool(0.3) {
            paths.push(bystander(&mut rng));
        }
        let mut scene = scene_from_paths(&paths, h, t, noise, &mut rng)?;
        scene.source = format!("synthetic:{}", kind.name());
        scene.start_frame = i as i64;
        scenes.push(scene);
    }
    Ok(scenes)
}
