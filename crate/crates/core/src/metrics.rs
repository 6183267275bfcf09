//! Best-of-K displacement metrics and the constant-velocity reference.

use crate::data::Scene;
use crate::error::{Error, Result};

/// Per-timestep displacement measure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Distance {
    #[default]
    Euclidean,
    Squared,
}

impl Distance {
    pub fn eval(self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        match self {
            Distance::Euclidean => d2.sqrt(),
            Distance::Squared => d2,
        }
    }
}

/// `K` predicted futures, indexed `[k][agent][step]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Vec<Vec<[f64; 2]>>>,
}

impl SampleSet {
    pub fn new(samples: Vec<Vec<Vec<[f64; 2]>>>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("sample set needs at least one sample".into()))?;
        let shape: Vec<usize> = first.iter().map(Vec::len).collect();
        if samples.iter().any(|s| s.iter().map(Vec::len).ne(shape.iter().copied())) {
            return Err(Error::Data("samples differ in shape".into()));
        }
        Ok(SampleSet { samples })
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn num_agents(&self) -> usize {
        self.samples[0].len()
    }

    /// The first `k` samples.
    pub fn truncated(&self, k: usize) -> SampleSet {
        SampleSet {
            samples: self.samples[..k.min(self.k())].to_vec(),
        }
    }

    /// Smallest scene-level squared distance between any two samples.
    pub fn min_pairwise_distance(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..self.k() {
            for j in i + 1..self.k() {
                let d: f64 = self.samples[i]
                    .iter()
                    .flatten()
                    .zip(self.samples[j].iter().flatten())
                    .map(|(a, b)| Distance::Squared.eval(*a, *b))
                    .sum();
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// `(ADE_K, FDE_K)` per agent.
    pub per_agent: Vec<(f64, f64)>,
    pub ade: f64,
    pub fde: f64,
}

/// Best-of-K average and final displacement, minimised per agent and per
/// metric independently.
pub fn ade_fde(samples: &SampleSet, truth: &[Vec<[f64; 2]>], distance: Distance) -> Result<MetricReport> {
    if samples.num_agents() != truth.len()
        || samples.samples[0].iter().zip(truth).any(|(s, y)| s.len() != y.len() || y.is_empty())
    {
        return Err(Error::Data("sample and truth tags do not align".into()));
    }
    let per_agent: Vec<(f64, f64)> = truth
        .iter()
        .enumerate()
        .map(|(n, y)| {
            let t = y.len();
            let mut ade = f64::INFINITY;
            let mut fde = f64::INFINITY;
            for s in &samples.samples {
                let d: Vec<f64> = s[n].iter().zip(y).map(|(p, q)| distance.eval(*p, *q)).collect();
                ade = ade.min(d.iter().sum::<f64>() / t as f64);
                fde = fde.min(d[t - 1]);
            }
            (ade, fde)
        })
        .collect();
    let n = per_agent.len() as f64;
    Ok(MetricReport {
        ade: per_agent.iter().map(|p| p.0).sum::<f64>() / n,
        fde: per_agent.iter().map(|p| p.1).sum::<f64>() / n,
        per_agent,
    })
}

/// Extrapolates each agent's last observed velocity from its `t = 0`
/// position; agents seen only once stay put.
pub fn constant_velocity_baseline(scene: &Scene) -> SampleSet {
    let t = scene.future_horizon();
    let preds = (0..scene.num_agents())
        .map(|n| {
            let p = scene.current(n);
            let v = match scene.position(n, -1) {
                Some(q) => [p[0] - q[0], p[1] - q[1]],
                None => [0.0, 0.0],
            };
            (1..=t).map(|k| [p[0] + k as f64 * v[0], p[1] + k as f64 * v[1]]).collect()
        })
        .collect();
    SampleSet { samples: vec![preds] }
}
