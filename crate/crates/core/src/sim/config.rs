//! Simulation configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase_type::PhaseType;
use crate::policy::{pooling, pull, push, waterfill};

/// Policy selector with the per-policy parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum PolicyConfig {
    Push { lambda: f64, delta: f64 },
    Pull { lambda: f64, delta0: f64, delta1: f64 },
    /// `c_growth` is the batch-size constant C: M = round(C·log10(N)),
    /// d = round((δ/λ)·M) sampled servers per batch.
    Waterfill { lambda: f64, delta: f64, c_growth: f64 },
    Pooling { lambda: f64, p: f64 },
}

impl PolicyConfig {
    pub fn lambda(&self) -> f64 {
        match *self {
            PolicyConfig::Push { lambda, .. }
            | PolicyConfig::Pull { lambda, .. }
            | PolicyConfig::Waterfill { lambda, .. }
            | PolicyConfig::Pooling { lambda, .. } => lambda,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyConfig::Push { .. } => "push",
            PolicyConfig::Pull { .. } => "pull",
            PolicyConfig::Waterfill { .. } => "waterfill",
            PolicyConfig::Pooling { .. } => "pooling",
        }
    }
}

fn default_warmup() -> f64 {
    0.10
}

fn default_runs() -> usize {
    20
}

/// A complete simulation request. `arrivals_total` defaults to N·10⁴ when
/// left at zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(flatten)]
    pub policy: PolicyConfig,
    pub ph: serde_json::Value,
    #[serde(skip)]
    pub ph_parsed: Option<PhaseType>,
    pub n_servers: usize,
    #[serde(default)]
    pub arrivals_total: u64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Collect per-job (arrival, departure, server) rows per run.
    #[serde(default)]
    pub collect_trace: bool,
}

impl SimConfig {
    pub fn new(policy: PolicyConfig, ph: PhaseType, n_servers: usize) -> Self {
        let ph_json = ph.to_json();
        Self {
            policy,
            ph: ph_json,
            ph_parsed: Some(ph),
            n_servers,
            arrivals_total: 0,
            warmup_fraction: default_warmup(),
            runs: default_runs(),
            seed: 0,
            collect_trace: false,
        }
    }

    pub fn with_arrivals(mut self, arrivals: u64) -> Self {
        self.arrivals_total = arrivals;
        self
    }

    pub fn with_runs(mut self, runs: usize) -> Self {
        self.runs = runs;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The phase-type distribution (parsing the JSON field on demand).
    pub fn phase_type(&self) -> Result<PhaseType> {
        match &self.ph_parsed {
            Some(ph) => Ok(ph.clone()),
            None => PhaseType::from_json(&self.ph),
        }
    }

    /// Total arrivals per run, defaulting to N·10⁴.
    pub fn arrivals(&self) -> u64 {
        if self.arrivals_total == 0 {
            self.n_servers as u64 * 10_000
        } else {
            self.arrivals_total
        }
    }

    /// Jobs excluded from statistics at the head of each run.
    pub fn warmup_jobs(&self) -> u64 {
        (self.warmup_fraction * self.arrivals() as f64).round() as u64
    }

    /// Batch size M = round(C·log10(N)), at least 1 (water filling only).
    pub fn batch_size(&self) -> usize {
        match self.policy {
            PolicyConfig::Waterfill { c_growth, .. } => {
                ((c_growth * (self.n_servers as f64).log10()).round() as usize).max(1)
            }
            _ => 1,
        }
    }

    /// Probed servers per batch: d = round((δ/λ)·M), at least 1.
    pub fn probe_count(&self) -> usize {
        match self.policy {
            PolicyConfig::Waterfill { lambda, delta, .. } => {
                ((delta / lambda * self.batch_size() as f64).round() as usize).max(1)
            }
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_servers == 0 {
            return Err(Error::SimConfig("need at least one server".into()));
        }
        if self.runs < 1 {
            return Err(Error::SimConfig("need at least one run".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::SimConfig(format!(
                "warmup fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        let ph = self.phase_type()?;
        ph.require_unit_mean()?;
        match self.policy {
            PolicyConfig::Push { lambda, delta } => {
                push::PushParams::new(lambda, delta)?;
            }
            PolicyConfig::Pull { lambda, delta0, delta1 } => {
                pull::PullParams::new(lambda, delta0, delta1)?;
            }
            PolicyConfig::Waterfill { lambda, delta, .. } => {
                waterfill::WaterfillParams::new(lambda, delta)?;
                let d = self.probe_count();
                let m = self.batch_size();
                if m < 1 || d < 1 {
                    return Err(Error::SimConfig("batch geometry must be >= 1".into()));
                }
                if d > self.n_servers {
                    return Err(Error::SimConfig(format!(
                        "cannot probe d={d} distinct servers out of N={}",
                        self.n_servers
                    )));
                }
            }
            PolicyConfig::Pooling { lambda, p } => {
                pooling::PoolingParams::new(lambda, p)?;
            }
        }
        Ok(())
    }

    /// Mean response time predicted by the matching cavity solver.
    pub fn cavity_prediction(&self) -> Result<f64> {
        let ph = self.phase_type()?;
        Ok(match self.policy {
            PolicyConfig::Push { lambda, delta } => {
                if lambda == 0.0 {
                    0.0
                } else {
                    push::solve(&push::PushParams::new(lambda, delta)?, &ph)?.mean_response
                }
            }
            PolicyConfig::Pull { lambda, delta0, delta1 } => {
                pull::solve(&pull::PullParams::new(lambda, delta0, delta1)?, &ph)?.mean_response
            }
            PolicyConfig::Waterfill { lambda, delta, .. } => {
                waterfill::solve(&waterfill::WaterfillParams::new(lambda, delta)?, &ph)?
                    .mean_response
            }
            PolicyConfig::Pooling { lambda, p } => {
                pooling::solve(&pooling::PoolingParams::new(lambda, p)?, &ph)?.mean_response
            }
        })
    }
}
