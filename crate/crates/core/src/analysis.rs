//! Closed-form cost models and summary statistics over run logs.
//!
//! Memory counts are parameter counts. Activations and other intermediates
//! are excluded; multiply by bytes-per-parameter for a byte figure.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::optim::{fmt_f64, RunLog};
use crate::perturbation::{AlignmentSample, Ensemble};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("layer list is empty")]
    NoLayers,
    #[error("layer {0} has a zero dimension")]
    EmptyLayer(usize),
    #[error("lozo needs a rank r >= 1")]
    MissingRank,
    #[error("mezo-bcd needs a block assignment covering all {layers} layers (got {given})")]
    MissingBlockAssignment { layers: usize, given: usize },
    #[error("traffic model is defined for mezo and mezo-bcd only, not {0}")]
    NoTrafficModel(Method),
    #[error("d and N must be at least 1")]
    InvalidTraffic,
    #[error("run log is empty")]
    EmptyLog,
    #[error("no samples to summarize")]
    NoSamples,
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// A weight matrix `W ∈ ℝ^{m×n}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub m: u64,
    pub n: u64,
}

impl LayerShape {
    pub fn new(m: u64, n: u64) -> Self {
        Self { m, n }
    }

    pub fn size(&self) -> u64 {
        self.m * self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Mezo,
    SparseMezo,
    Lozo,
    MezoBcd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mezo, Method::SparseMezo, Method::Lozo, Method::MezoBcd];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::Mezo => "mezo",
            Method::SparseMezo => "sparse-mezo",
            Method::Lozo => "lozo",
            Method::MezoBcd => "mezo-bcd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| format!("unknown method '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub method: Method,
    pub total_weights: u64,
    pub auxiliary: u64,
    pub peak: u64,
}

/// Theoretical peak parameter count of one method.
///
/// `rank` is only read for LoZO. `block_assignment[ℓ]` is the block of layer
/// `ℓ` and is required for MeZO-BCD. Every block is selected eventually, so
/// its peak term is the largest layer over all blocks.
pub fn peak_memory_params(
    method: Method,
    layers: &[LayerShape],
    rank: Option<u64>,
    block_assignment: Option<&[usize]>,
) -> Result<MemoryReport> {
    if layers.is_empty() {
        return Err(AnalysisError::NoLayers);
    }
    if let Some(i) = layers.iter().position(|l| l.m == 0 || l.n == 0) {
        return Err(AnalysisError::EmptyLayer(i));
    }
    let total: u64 = layers.iter().map(LayerShape::size).sum();
    let largest = layers.iter().map(LayerShape::size).max().unwrap_or(0);
    let auxiliary = match method {
        Method::Mezo => largest,
        Method::SparseMezo => 2 * largest,
        Method::Lozo => {
            let r = rank.filter(|&r| r >= 1).ok_or(AnalysisError::MissingRank)?;
            let max_u = layers.iter().map(|l| l.m * r).max().unwrap_or(0);
            let sum_v: u64 = layers.iter().map(|l| l.n * r).sum();
            max_u + sum_v
        }
        Method::MezoBcd => {
            let assignment = block_assignment.unwrap_or(&[]);
            if assignment.len() != layers.len() {
                return Err(AnalysisError::MissingBlockAssignment {
                    layers: layers.len(),
                    given: assignment.len(),
                });
            }
            let mut per_block = std::collections::BTreeMap::<usize, u64>::new();
            for (l, &b) in layers.iter().zip(assignment) {
                let e = per_block.entry(b).or_default();
                *e = (*e).max(l.size());
            }
            per_block.into_values().max().unwrap_or(0)
        }
    };
    Ok(MemoryReport {
        method,
        total_weights: total,
        auxiliary,
        peak: total + auxiliary,
    })
}

/// Parameter loads per step: `5d` for MeZO, `2d + 3d/N` for MeZO-BCD.
pub fn traffic_per_step(method: Method, d: u64, n: u64) -> Result<f64> {
    if d == 0 || n == 0 {
        return Err(AnalysisError::InvalidTraffic);
    }
    let d = d as f64;
    match method {
        Method::Mezo => Ok(5.0 * d),
        Method::MezoBcd => Ok(2.0 * d + 3.0 * d / n as f64),
        other => Err(AnalysisError::NoTrafficModel(other)),
    }
}

/// First step whose loss proxy `(ℓ₊+ℓ₋)/2` is at or below `target`.
pub fn iterations_to_target(log: &RunLog, target: f64) -> Result<Option<usize>> {
    if log.is_empty() {
        return Err(AnalysisError::EmptyLog);
    }
    Ok(log.records.iter().find(|r| r.loss() <= target).map(|r| r.step))
}

/// Smallest loss proxy in a log.
pub fn min_loss(log: &RunLog) -> Result<f64> {
    log.losses().reduce(f64::min).ok_or(AnalysisError::EmptyLog)
}

/// Sample statistics; `variance` uses the `n − 1` denominator (0 for one sample).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(AnalysisError::NoSamples);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(Self {
            count: values.len(),
            mean,
            variance,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    pub fn std_err(&self) -> f64 {
        (self.variance / self.count as f64).sqrt()
    }
}

/// `ρ` statistics of one (ensemble, srank) group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoGroup {
    pub ensemble: Ensemble,
    pub srank: f64,
    pub summary: Summary,
}

/// Groups samples by (ensemble, srank) in order of first appearance.
pub fn summarize_rho(samples: &[AlignmentSample]) -> Vec<RhoGroup> {
    let mut keys: Vec<(Ensemble, f64)> = Vec::new();
    for s in samples {
        if !keys.iter().any(|&(e, k)| e == s.ensemble && k == s.srank) {
            keys.push((s.ensemble, s.srank));
        }
    }
    keys.into_iter()
        .map(|(ensemble, srank)| {
            let rhos: Vec<f64> = samples
                .iter()
                .filter(|s| s.ensemble == ensemble && s.srank == srank)
                .map(|s| s.rho)
                .collect();
            RhoGroup {
                ensemble,
                srank,
                summary: Summary::of(&rhos).expect("group has at least one sample"),
            }
        })
        .collect()
}

pub fn write_memory_csv(reports: &[MemoryReport], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "method,total,auxiliary,peak")?;
    for r in reports {
        writeln!(w, "{},{},{},{}", r.method, r.total_weights, r.auxiliary, r.peak)?;
    }
    Ok(())
}

pub fn write_traffic_csv(rows: &[(Method, u64, u64, f64)], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "method,d,N,traffic")?;
    for (m, d, n, t) in rows {
        writeln!(w, "{m},{d},{n},{}", fmt_f64(*t))?;
    }
    Ok(())
}
