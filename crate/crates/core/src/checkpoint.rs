//! Text checkpoints.
//!
//! ```text
//! agentformer-checkpoint
//! format_version = 1
//! [config]
//! time_dim = 32
//! ...
//! [params cvae]
//! tensor encoder.0.attn.wq_self.weight 32,32
//! 0.0123 -0.2 ...
//! [params sampler]
//! ...
//! ```
//!
//! Each `tensor` line gives the parameter name and its comma-separated shape;
//! the next line holds the values in row-major order, written with Rust's
//! shortest round-trip formatting so reloading is bit-exact. The sampler
//! section is present only when a sampler has been trained.

use std::path::Path;

use crate::config::ModelConfig;
use crate::cvae::AgentFormer;
use crate::error::{Error, Result};
use crate::params::ParamGroup;

pub const MAGIC: &str = "agentformer-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_text(model: &AgentFormer) -> String {
    let mut out = format!("{MAGIC}\nformat_version = {FORMAT_VERSION}\n[config]\n");
    out.push_str(&model.cfg.to_text());
    let mut groups = vec![ParamGroup::Cvae];
    if model.sampler.is_some() {
        groups.push(ParamGroup::Sampler);
    }
    for group in groups {
        out.push_str(&format!("[params {}]\n", group.tag()));
        for id in model.store.ids().filter(|&id| model.store.group(id) == group) {
            let t = model.store.get(id);
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.push_str(&format!("tensor {} {}\n", model.store.name(id), dims.join(",")));
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
    }
    out
}

fn bad(line: usize, detail: impl Into<String>) -> Error {
    Error::Checkpoint(format!("line {}: {}", line + 1, detail.into()))
}

pub fn from_text(text: &str) -> Result<AgentFormer> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.first().map(|l| l.trim()) != Some(MAGIC) {
        return Err(Error::Checkpoint("not an agentformer checkpoint".into()));
    }
    match lines.get(1).and_then(|l| l.split_once('=')) {
        Some((k, v)) if k.trim() == "format_version" => {
            let v: u32 = v.trim().parse().map_err(|_| bad(1, "bad format_version"))?;
            if v != FORMAT_VERSION {
                return Err(Error::Checkpoint(format!("unsupported format_version {v}")));
            }
        }
        _ => return Err(bad(1, "missing format_version")),
    }
    if lines.get(2).map(|l| l.trim()) != Some("[config]") {
        return Err(bad(2, "expected [config]"));
    }
    let mut i = 3;
    while i < lines.len() && !lines[i].starts_with("[params") {
        i += 1;
    }
    let cfg = ModelConfig::from_text(&lines[3..i].join("\n"))?;
    let mut model = AgentFormer::new(cfg, 0)?;
    let mut seen = Vec::new();
    let mut group = None;
    while i < lines.len() {
        let line = lines[i].trim();
        if line.is_empty() {
            i += 1;
            continue;
        }
        if let Some(tag) = line.strip_prefix("[params ").and_then(|s| s.strip_suffix(']')) {
            let g = ParamGroup::from_tag(tag).ok_or_else(|| bad(i, format!("unknown section `{tag}`")))?;
            if g == ParamGroup::Sampler && model.sampler.is_none() {
                model.init_sampler(0)?;
            }
            group = Some(g);
            i += 1;
            continue;
        }
        let g = group.ok_or_else(|| bad(i, "tensor outside a params section"))?;
        let mut parts = line.split_whitespace();
        let (Some("tensor"), Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad(i, "expected `tensor NAME DIMS`"));
        };
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse().map_err(|_| bad(i, format!("bad shape `{dims}`"))))
            .collect::<Result<_>>()?;
        let id = model
            .store
            .find(name)
            .ok_or_else(|| bad(i, format!("unknown tensor `{name}` for this configuration")))?;
        if model.store.group(id) != g {
            return Err(bad(i, format!("tensor `{name}` in wrong section")));
        }
        if model.store.get(id).shape() != shape.as_slice() {
            return Err(bad(
                i,
                format!(
                    "tensor `{name}` has shape {shape:?} but the configuration needs {:?}",
                    model.store.get(id).shape()
                ),
            ));
        }
        let vals: Vec<f64> = lines
            .get(i + 1)
            .ok_or_else(|| bad(i, "missing values"))?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(i + 1, format!("bad value `{v}`"))))
            .collect::<Result<_>>()?;
        if vals.len() != model.store.get(id).len() || vals.iter().any(|v| !v.is_finite()) {
            return Err(bad(i + 1, format!("tensor `{name}` needs {} finite values", model.store.get(id).len())));
        }
        model.store.get_mut(id).data_mut().copy_from_slice(&vals);
        seen.push(id);
        i += 2;
    }
    for id in model.store.ids() {
        if !seen.contains(&id) {
            return Err(Error::Checkpoint(format!("tensor `{}` missing", model.store.name(id))));
        }
    }
    Ok(model)
}

pub fn save(model: &AgentFormer, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<AgentFormer> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
