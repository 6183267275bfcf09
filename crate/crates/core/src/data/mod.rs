//! Scenes, trajectory ingestion, coordinate normalisation and augmentation.

mod io;
mod synthetic;

pub use io::{build_scenes, load_trajectory_file, parse_records, Record};
pub use synthetic::{generate_mixed, generate_synthetic, SyntheticKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Opaque agent identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentId(pub i64);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub position: [f64; 2],
    /// Displacement per timestep.
    pub velocity: [f64; 2],
    pub heading: Option<f64>,
}

impl AgentState {
    pub fn features(&self, use_heading: bool) -> Result<Vec<f64>> {
        let mut f = vec![
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
        ];
        if use_heading {
            f.push(
                self.heading
                    .ok_or_else(|| Error::Data("heading requested but not provided".into()))?,
            );
        }
        Ok(f)
    }
}

/// One prediction instance.
///
/// `past[n][i]` is agent `n`'s position at timestep `i - H` (`None` when the
/// agent was not observed), `future[n][i]` its position at `i + 1`. Every
/// agent is present at `t = 0` and over the whole future.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub agents: Vec<AgentId>,
    pub past: Vec<Vec<Option<[f64; 2]>>>,
    pub future: Vec<Vec<[f64; 2]>>,
    pub headings: Option<Vec<Vec<Option<f64>>>>,
    pub context: Option<Vec<Vec<f64>>>,
    /// Translation removed by [`scene_center`]; add it back to recover the
    /// original frame.
    pub origin: [f64; 2],
    pub source: String,
    pub start_frame: i64,
}

impl Scene {
    pub fn new(
        agents: Vec<AgentId>,
        past: Vec<Vec<Option<[f64; 2]>>>,
        future: Vec<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let scene = Scene {
            agents,
            past,
            future,
            headings: None,
            context: None,
            origin: [0.0, 0.0],
            source: String::new(),
            start_frame: 0,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.agents.len();
        if n == 0 {
            return Err(Error::Data("scene has no agents".into()));
        }
        if self.past.len() != n || self.future.len() != n {
            return Err(Error::Data("per-agent track count mismatch".into()));
        }
        let h = self.past[0].len();
        let t = self.future[0].len();
        if h == 0 {
            return Err(Error::Data("past must include t=0".into()));
        }
        for i in 0..n {
            if self.past[i].len() != h || self.future[i].len() != t {
                return Err(Error::Data("ragged tracks".into()));
            }
            if self.past[i][h - 1].is_none() {
                return Err(Error::Data(format!(
                    "agent {} is not present at t=0",
                    self.agents[i].0
                )));
            }
        }
        let mut ids = self.agents.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != n {
            return Err(Error::Data("duplicate agent id".into()));
        }
        if let Some(hd) = &self.headings {
            if hd.len() != n || hd.iter().any(|r| r.len() != h) {
                return Err(Error::Data("heading track shape mismatch".into()));
            }
        }
        if let Some(ctx) = &self.context {
            let d = ctx.first().map_or(0, Vec::len);
            if ctx.len() != n || ctx.iter().any(|c| c.len() != d) {
                return Err(Error::Data("context vectors must have equal length".into()));
            }
        }
        Ok(())
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// `H`.
    pub fn past_horizon(&self) -> usize {
        self.past[0].len() - 1
    }

    /// `T`.
    pub fn future_horizon(&self) -> usize {
        self.future[0].len()
    }

    pub fn agent_index(&self, id: AgentId) -> Option<usize> {
        self.agents.iter().position(|&a| a == id)
    }

    /// Position of agent `n` at timestep `t` (past, present or future).
    pub fn position(&self, n: usize, t: i32) -> Option<[f64; 2]> {
        let h = self.past_horizon() as i32;
        if t <= 0 {
            if t < -h {
                return None;
            }
            self.past[n][(t + h) as usize]
        } else {
            self.future[n].get(t as usize - 1).copied()
        }
    }

    /// Position at `t = 0`.
    pub fn current(&self, n: usize) -> [f64; 2] {
        self.past[n][self.past_horizon()].expect("validated: present at t=0")
    }

    /// State at past timestep `t`, with velocity from a backward difference
    /// (forward difference at the first observation, zero if isolated).
    pub fn state(&self, n: usize, t: i32) -> Option<AgentState> {
        if t > 0 {
            return None;
        }
        let p = self.position(n, t)?;
        let velocity = if let Some(prev) = self.position(n, t - 1) {
            [p[0] - prev[0], p[1] - prev[1]]
        } else if let Some(next) = (t < 0).then(|| self.position(n, t + 1)).flatten() {
            [next[0] - p[0], next[1] - p[1]]
        } else {
            [0.0, 0.0]
        };
        let heading = self
            .headings
            .as_ref()
            .and_then(|h| h[n][(t + self.past_horizon() as i32) as usize]);
        Some(AgentState {
            position: p,
            velocity,
            heading,
        })
    }

    pub fn context_dim(&self) -> usize {
        self.context.as_ref().and_then(|c| c.first()).map_or(0, Vec::len)
    }

    /// Maps a point from the centered frame back to the original one.
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] + self.origin[0], p[1] + self.origin[1]]
    }

    fn map_points(&mut self, f: impl Fn([f64; 2]) -> [f64; 2]) {
        for track in &mut self.past {
            for p in track.iter_mut().flatten() {
                *p = f(*p);
            }
        }
        for track in &mut self.future {
            for p in track.iter_mut() {
                *p = f(*p);
            }
        }
    }

    /// Rotates all positions (and headings) by `theta` about the origin.
    pub fn rotated(&self, theta: f64) -> Scene {
        let (s, c) = theta.sin_cos();
        let mut out = self.clone();
        out.map_points(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]);
        if let Some(h) = &mut out.headings {
            for v in h.iter_mut().flatten().flatten() {
                *v += theta;
            }
        }
        out
    }
}

/// Translates the scene so the mean agent position at `t = 0` is the origin.
pub fn scene_center(scene: &Scene) -> Scene {
    let n = scene.num_agents() as f64;
    let mut mean = [0.0, 0.0];
    for i in 0..scene.num_agents() {
        let p = scene.current(i);
        mean[0] += p[0] / n;
        mean[1] += p[1] / n;
    }
    let mut out = scene.clone();
    out.map_points(|p| [p[0] - mean[0], p[1] - mean[1]]);
    out.origin = [scene.origin[0] + mean[0], scene.origin[1] + mean[1]];
    out
}

/// Rotation by an angle drawn uniformly from `[0, 2π)`.
pub fn rotate_augment(scene: &Scene, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    scene.rotated(theta)
}
