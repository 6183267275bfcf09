use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::{AgentId, Scene};
use crate::error::{Error, Result};

/// One observation: `frame agent x y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Record {
    pub frame: i64,
    pub agent: i64,
    pub position: [f64; 2],
}

fn parse_id(tok: &str) -> Option<i64> {
    if let Ok(v) = tok.parse::<i64>() {
        return Some(v);
    }
    // ids written as floats ("10.0") are common in exported datasets
    let f: f64 = tok.parse().ok()?;
    (f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
}

/// Parses whitespace-separated `frame agent x y` lines; records come back
/// sorted by `(frame, agent)`.
pub fn parse_records(text: &str, path: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |detail: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            detail,
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", toks.len())));
        }
        let frame = parse_id(toks[0]).ok_or_else(|| err(format!("bad frame id `{}`", toks[0])))?;
        let agent = parse_id(toks[1]).ok_or_else(|| err(format!("bad agent id `{}`", toks[1])))?;
        let coord = |s: &str| -> Result<f64> {
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(format!("bad coordinate `{s}`"))),
            }
        };
        out.push(Record {
            frame,
            agent,
            position: [coord(toks[2])?, coord(toks[3])?],
        });
    }
    out.sort_by_key(|r| (r.frame, r.agent));
    if let Some(w) = out.windows(2).find(|w| (w[0].frame, w[0].agent) == (w[1].frame, w[1].agent)) {
        return Err(Error::Data(format!(
            "{path}: agent {} appears twice in frame {}",
            w[0].agent, w[0].frame
        )));
    }
    Ok(out)
}

pub fn load_trajectory_file(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, &path.display().to_string())
}

/// Common spacing of the distinct frame ids.
fn frame_interval(frames: &[i64]) -> Result<i64> {
    let step = frames.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(1);
    if let Some(w) = frames.windows(2).find(|w| (w[1] - w[0]) % step != 0) {
        return Err(Error::Data(format!(
            "mixed frame intervals: gap {} between frames {} and {} is not a multiple of {step}",
            w[1] - w[0],
            w[0],
            w[1]
        )));
    }
    Ok(step)
}

/// Sliding windows of `h + 1 + t` timesteps advancing by `stride`.
///
/// Frame ids are mapped to consecutive timesteps using their common interval.
/// Agents observed at the window's `t = 0` and at every future step become
/// the scene's agents; their past may have gaps.
pub fn build_scenes(records: &[Record], h: usize, t: usize, stride: usize) -> Result<Vec<Scene>> {
    if t == 0 || stride == 0 {
        return Err(Error::Config("future horizon and stride must be positive".into()));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let mut frames: Vec<i64> = records.iter().map(|r| r.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    let first = frames[0];
    let step = frame_interval(&frames)?;
    let last_idx = ((frames[frames.len() - 1] - first) / step) as usize;

    // step index -> agent -> position
    let mut by_step: Vec<BTreeMap<i64, [f64; 2]>> = vec![BTreeMap::new(); last_idx + 1];
    for r in records {
        by_step[((r.frame - first) / step) as usize].insert(r.agent, r.position);
    }

    let span = h + t;
    let mut scenes = Vec::new();
    let mut s = 0;
    while s + span <= last_idx {
        let now = s + h;
        let mut agents: Vec<i64> = by_step[now]
            .keys()
            .copied()
            .filter(|a| (now + 1..=now + t).all(|i| by_step[i].contains_key(a)))
            .collect();
        if !agents.is_empty() {
            let mut first_seen: HashMap<i64, usize> = HashMap::new();
            for (i, step_map) in by_step[s..=now].iter().enumerate() {
                for a in step_map.keys() {
                    first_seen.entry(*a).or_insert(i);
                }
            }
            agents.sort_by_key(|a| (first_seen[a], *a));
            let past = agents
                .iter()
                .map(|a| (s..=now).map(|i| by_step[i].get(a).copied()).collect())
                .collect();
            let future = agents
                .iter()
                .map(|a| (now + 1..=now + t).map(|i| by_step[i][a]).collect())
                .collect();
            let mut scene = Scene::new(agents.into_iter().map(AgentId).collect(), past, future)?;
            scene.start_frame = first + s as i64 * step;
            scenes.push(scene);
        }
        s += stride;
    }
    Ok(scenes)
}
