//! Per-run statistics and aggregation.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::sim::config::SimConfig;

/// One job's trace row.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRow {
    pub arrival: f64,
    pub departure: f64,
    pub server: u32,
}

/// Statistics from a single replication.
#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub response_sum: f64,
    pub response_count: u64,
    pub arrived: u64,
    pub completed: u64,
    pub sim_time: f64,
    /// Time integral of the idle-server count (for the pooling sanity
    /// check: long-run idle fraction approaches (1−λ)/(1−p)).
    pub idle_time_integral: f64,
    pub trace: Option<Vec<TraceRow>>,
}

impl RunStats {
    pub fn mean_response(&self) -> f64 {
        if self.response_count == 0 {
            0.0
        } else {
            self.response_sum / self.response_count as f64
        }
    }

    pub fn idle_fraction(&self, n_servers: usize) -> f64 {
        if self.sim_time <= 0.0 {
            return 1.0;
        }
        self.idle_time_integral / (self.sim_time * n_servers as f64)
    }
}

/// Aggregated simulation report (mirrors the reference tables' columns).
#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub policy: String,
    pub n_servers: usize,
    pub runs: usize,
    pub seed: u64,
    pub arrivals_per_run: u64,
    pub mean_response: f64,
    /// 95% half-width from the Student-t over per-run means.
    pub ci_halfwidth: f64,
    pub per_run_means: Vec<f64>,
    pub cavity_prediction: f64,
    pub relative_error_pct: f64,
    pub mean_idle_fraction: f64,
    #[serde(skip)]
    pub traces: Vec<Option<Vec<TraceRow>>>,
}

/// Sample mean and 95% Student-t confidence half-width over per-run means.
pub fn aggregate(per_run_means: &[f64]) -> Result<(f64, f64)> {
    let n = per_run_means.len();
    if n < 2 {
        return Err(Error::SimConfig(
            "confidence intervals need at least 2 runs".into(),
        ));
    }
    let mean = per_run_means.iter().sum::<f64>() / n as f64;
    let var = per_run_means
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid dof")
        .inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / (n as f64).sqrt()))
}

pub(crate) fn build_report(config: &SimConfig, cavity: f64, stats: Vec<RunStats>) -> SimReport {
    let per_run_means: Vec<f64> = stats.iter().map(RunStats::mean_response).collect();
    let (mean, half) = if per_run_means.len() >= 2 {
        aggregate(&per_run_means).expect("len checked")
    } else {
        (per_run_means.first().copied().unwrap_or(0.0), 0.0)
    };
    let relative_error_pct = if cavity > 0.0 {
        100.0 * (mean - cavity).abs() / cavity
    } else {
        0.0
    };
    let n = config.n_servers;
    let mean_idle =
        stats.iter().map(|s| s.idle_fraction(n)).sum::<f64>() / stats.len().max(1) as f64;
    SimReport {
        policy: config.policy.name().to_string(),
        n_servers: n,
        runs: config.runs,
        seed: config.seed,
        arrivals_per_run: config.arrivals(),
        mean_response: mean,
        ci_halfwidth: half,
        per_run_means,
        cavity_prediction: cavity,
        relative_error_pct,
        mean_idle_fraction: mean_idle,
        traces: stats.into_iter().map(|s| s.trace).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn aggregate_basics() {
        // Constant runs: zero half-width.
        let (mean, half) = aggregate(&[2.5, 2.5, 2.5, 2.5]).unwrap();
        assert_abs_diff_eq!(mean, 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(half, 0.0, epsilon = 1e-15);

        // Hand-evaluated: t(0.975, df=2) = 4.3027, stdev 1, sqrt(3) runs.
        let (mean, half) = aggregate(&[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(mean, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(half, 4.302652729911275 / 3.0f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(half, 2.4842, epsilon = 1e-4);

        assert!(aggregate(&[1.0]).is_err());
    }

    #[test]
    fn aggregate_frozen_normal_draws() {
        // 20 standard-normal draws with a fixed seed; the aggregate is a
        // regression constant for the (rng, t-quantile) pairing.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws: Vec<f64> = (0..20).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (mean, half) = aggregate(&draws).unwrap();
        let expect_mean = draws.iter().sum::<f64>() / 20.0;
        assert_abs_diff_eq!(mean, expect_mean, epsilon = 1e-15);
        let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
        assert_abs_diff_eq!(half, 2.093024054408263 * sd / 20.0f64.sqrt(), epsilon = 1e-12);
    }
}
