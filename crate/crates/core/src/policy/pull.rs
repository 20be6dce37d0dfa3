//! Hyperscalable pull policy: servers push their queue length to the
//! dispatcher themselves — with probability δ₁ at each service completion
//! and at rate δ₀ while idle — and arrivals join a minimum-estimate server.
//!
//! The overall update rate is δ = λδ₁ + (1−λ)δ₀. The cavity chain shares
//! the push policy's two-estimate state space, but probes ride on service
//! completions: with probability δ₁ a completion resets the state to
//! (m, m, ·) (the dispatcher instantly refills the queue), otherwise the
//! queue just decrements. The maximum level is insensitive to the job-size
//! distribution:
//!
//! ```text
//! m̃ = log(1 − λδ₁/δ) / log(1 − δ₁),    δ₁ → 0:  m̃ = λ/δ.
//! ```

use serde::Serialize;

use crate::ctmc::{self, Generator, GeneratorBuilder, StateLabel, StationaryDist};
use crate::error::{Error, Result};
use crate::phase_type::PhaseType;
use crate::policy::push::{two_estimate_index, two_estimate_labels, INTEGER_SNAP};

/// Pull parameters: update probability δ₁ at completions, idle update rate
/// δ₀; the overall rate δ = λδ₁ + (1−λ)δ₀ is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PullParams {
    pub lambda: f64,
    pub delta0: f64,
    pub delta1: f64,
}

impl PullParams {
    pub fn new(lambda: f64, delta0: f64, delta1: f64) -> Result<Self> {
        if !(0.0 < lambda && lambda < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "arrival rate lambda must lie in (0, 1), got {lambda}"
            )));
        }
        if !(0.0..=1.0).contains(&delta1) {
            return Err(Error::InvalidParameter(format!(
                "update probability delta1 must lie in [0, 1], got {delta1}"
            )));
        }
        if delta0 < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "idle update rate delta0 must be nonnegative, got {delta0}"
            )));
        }
        if lambda * delta1 + (1.0 - lambda) * delta0 <= 0.0 {
            return Err(Error::InvalidParameter(
                "overall update rate must be positive".into(),
            ));
        }
        Ok(Self { lambda, delta0, delta1 })
    }

    /// Builds from a target overall rate δ: δ₀ = (δ − λδ₁)/(1 − λ), which
    /// must be nonnegative (δ₁ ≤ δ/λ).
    pub fn from_overall_rate(lambda: f64, delta: f64, delta1: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "overall update rate delta must be positive, got {delta}"
            )));
        }
        let delta0 = (delta - lambda * delta1) / (1.0 - lambda);
        if delta0 < -1e-12 {
            return Err(Error::InvalidParameter(format!(
                "delta1 = {delta1} exceeds delta/lambda = {}",
                delta / lambda
            )));
        }
        Self::new(lambda, delta0.max(0.0), delta1)
    }

    /// Overall update rate δ = λδ₁ + (1−λ)δ₀.
    pub fn overall_rate(&self) -> f64 {
        self.lambda * self.delta1 + (1.0 - self.lambda) * self.delta0
    }
}

/// Solved cavity queue for the pull policy.
#[derive(Debug, Clone, Serialize)]
pub struct PullSolution {
    pub m: usize,
    pub m_tilde: f64,
    pub nu: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub pi_q: Vec<f64>,
    pub pi_e: [f64; 2],
    #[serde(rename = "EQ")]
    pub mean_queue: f64,
    #[serde(rename = "ER")]
    pub mean_response: f64,
    pub bounds: (f64, f64),
    #[serde(skip)]
    pub dist: StationaryDist,
}

/// Real-valued maximum queue level; distribution-insensitive. Returns +∞
/// when δ₀ = 0 and δ₁ < 1 (idle servers never update, the level diverges).
pub fn m_tilde(params: &PullParams) -> f64 {
    let PullParams { lambda, delta0, delta1 } = *params;
    let delta = params.overall_rate();
    if delta1 == 0.0 {
        return lambda / delta;
    }
    if delta1 == 1.0 {
        // JIQ limit: log ratio tends to 0 for λ < δ, to 1 for λ = δ.
        return if lambda < delta { 0.0 } else { 1.0 };
    }
    if delta0 == 0.0 {
        return f64::INFINITY;
    }
    (1.0 - lambda * delta1 / delta).ln() / (1.0 - delta1).ln()
}

/// Arrival rate at which the maximum queue length jumps from m to m + 1.
pub fn lambda_m(m: usize, delta0: f64, delta1: f64) -> f64 {
    if delta1 == 0.0 {
        let dm = delta0 * m as f64;
        return dm / (dm + 1.0);
    }
    let g = (1.0 - delta1).powi(m as i32);
    let num = delta0 - delta0 * g;
    num / (num + delta1 * g)
}

/// Cavity generator Q(m, ν) on the two-estimate state space. Completions
/// split (1−δ₁) decrement against δ₁ reset-to-(m, m); idle queues update at
/// rate δ₀.
pub fn build_generator(params: &PullParams, ph: &PhaseType, m: usize, nu: f64) -> Generator {
    let ns = ph.order();
    let alpha = ph.alpha();
    let s = ph.s_matrix();
    let s_star = ph.s_star();
    let PullParams { delta0, delta1, .. } = *params;
    let idx = |q: usize, eup: bool, j: usize| two_estimate_index(m, ns, q, eup, j);
    let mut b = GeneratorBuilder::new(two_estimate_labels(m, ns));

    for eup in [false, true] {
        for j in 1..=ns {
            if m >= 1 {
                b.add(idx(0, eup, 0), idx(m, false, j), delta0 * alpha[j - 1]);
            } else if eup {
                b.add(idx(0, true, 0), idx(0, false, 0), delta0 * alpha[j - 1]);
            }
        }
    }
    for j in 1..=ns {
        b.add(idx(0, false, 0), idx(1, true, j), nu * alpha[j - 1]);
    }

    for q in 1..=m + 1 {
        let ups: &[bool] = if q <= m { &[false, true] } else { &[true] };
        for &eup in ups {
            for j in 1..=ns {
                let from = idx(q, eup, j);
                for j2 in 1..=ns {
                    if j2 != j {
                        b.add(from, idx(q, eup, j2), s[(j - 1, j2 - 1)]);
                    }
                }
                // Completion without an update: plain decrement.
                let silent = (1.0 - delta1) * s_star[j - 1];
                if q == 1 {
                    b.add(from, idx(0, eup, 0), silent);
                } else {
                    for j2 in 1..=ns {
                        b.add(from, idx(q - 1, eup, j2), silent * alpha[j2 - 1]);
                    }
                }
                // Completion with an update: the dispatcher sees q-1 <= m and
                // refills to (m, m).
                let update = delta1 * s_star[j - 1];
                for j2 in 1..=ns {
                    if m >= 1 {
                        b.add(from, idx(m, false, j2), update * alpha[j2 - 1]);
                    } else {
                        b.add(from, idx(0, false, 0), update * alpha[j2 - 1]);
                    }
                }
                if !eup {
                    b.add(from, idx(q + 1, true, j), nu);
                }
            }
        }
    }
    b.finish()
}

/// Reduced ν = 0 chain on {0} ∪ {(q, j), q = 1..m}.
pub fn build_generator_nu0(params: &PullParams, ph: &PhaseType, m: usize) -> Generator {
    assert!(m >= 1, "reduced chain needs m >= 1");
    let ns = ph.order();
    let alpha = ph.alpha();
    let s = ph.s_matrix();
    let s_star = ph.s_star();
    let PullParams { delta0, delta1, .. } = *params;

    let mut labels = Vec::with_capacity(1 + m * ns);
    labels.push(StateLabel::empty(m));
    for q in 1..=m {
        for j in 1..=ns {
            labels.push(StateLabel::busy(q, m, j));
        }
    }
    let idx = |q: usize, j: usize| if q == 0 { 0 } else { 1 + (q - 1) * ns + (j - 1) };
    let mut b = GeneratorBuilder::new(labels);
    for j in 1..=ns {
        b.add(idx(0, 0), idx(m, j), delta0 * alpha[j - 1]);
    }
    for q in 1..=m {
        for j in 1..=ns {
            let from = idx(q, j);
            for j2 in 1..=ns {
                if j2 != j {
                    b.add(from, idx(q, j2), s[(j - 1, j2 - 1)]);
                }
            }
            let silent = (1.0 - delta1) * s_star[j - 1];
            if q == 1 {
                b.add(from, idx(0, 0), silent);
            } else {
                for j2 in 1..=ns {
                    b.add(from, idx(q - 1, j2), silent * alpha[j2 - 1]);
                }
            }
            let update = delta1 * s_star[j - 1];
            for j2 in 1..=ns {
                b.add(from, idx(m, j2), update * alpha[j2 - 1]);
            }
        }
    }
    b.finish()
}

/// Distribution-free cumulative probabilities of the ν = 0 chain: entry
/// i − 1 (for i = 1..=m+1) is Σ_{q<i} π_q(m); the last entry is 1.
pub fn cumulative(params: &PullParams, m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidParameter("cumulative needs m >= 1".into()));
    }
    let PullParams { delta0, delta1, .. } = *params;
    if delta1 == 0.0 {
        if delta0 == 0.0 {
            return Err(Error::InvalidParameter("delta0 and delta1 both zero".into()));
        }
        let inv = 1.0 / delta0;
        return Ok((1..=m + 1)
            .map(|i| ((i - 1) as f64 + inv) / (m as f64 + inv))
            .collect());
    }
    let g = (1.0 - delta1).powi(m as i32);
    let denom = delta0 + g * (delta1 - delta0);
    Ok((1..=m + 1)
        .map(|i| {
            let num = delta0 * (1.0 - delta1).powi((m + 1 - i) as i32) + g * (delta1 - delta0);
            num / denom
        })
        .collect())
}

/// Mean-queue value q(m) of the reduced chain; the sandwich is
/// (q(⌊m̃⌋), q(⌈m̃⌉)).
pub fn mean_queue_at_level(params: &PullParams, m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let PullParams { delta0, delta1, .. } = *params;
    if delta1 == 0.0 {
        return (m * (m + 1)) as f64 / 2.0 * delta0 / (delta0 * m as f64 + 1.0);
    }
    let g = (1.0 - delta1).powi(m as i32);
    let num = delta0 * (m + 1) as f64
        - delta0 * (1.0 - (1.0 - delta1).powi(m as i32 + 1)) / delta1;
    num / (delta0 + g * (delta1 - delta0))
}

pub fn mean_queue_bounds(params: &PullParams) -> (f64, f64) {
    let mt = m_tilde(params);
    (
        mean_queue_at_level(params, mt.floor() as usize),
        mean_queue_at_level(params, mt.ceil() as usize),
    )
}

/// Heavy-traffic slope of m̃ against log(1/(1 − λδ₁/δ)); `None` for δ₁ = 0,
/// where the maximum queue length stays bounded (λ/δ) as λ → 1.
pub fn heavy_traffic_slope(delta1: f64) -> Option<f64> {
    if delta1 == 0.0 {
        None
    } else {
        Some(1.0 / (1.0 / (1.0 - delta1)).ln())
    }
}

/// Residual of the assignment-rate balance
/// ν·π^e_m − (λ − δ₀·m·π_0 − δ₁·Σ (m−q+1)·π_{(q,e,j)}·s*_j).
pub fn nu_residual(params: &PullParams, ph: &PhaseType, sol: &PullSolution) -> f64 {
    let s_star = ph.s_star();
    let m = sol.m;
    let mut update_fill = 0.0;
    for (p, label) in sol
        .dist
        .probabilities()
        .iter()
        .zip(sol.dist.labels())
    {
        if label.queue >= 1 && label.queue <= m {
            update_fill += (m - label.queue + 1) as f64 * p * s_star[label.phase - 1];
        }
    }
    let pi0 = sol.pi_q[0];
    sol.nu * sol.pi_e[0]
        - (params.lambda - params.delta0 * m as f64 * pi0 - params.delta1 * update_fill)
}

/// Full cavity solve: m̃ from the closed form, then ν by bisection.
pub fn solve(params: &PullParams, ph: &PhaseType) -> Result<PullSolution> {
    ph.require_unit_mean()?;
    let mt = m_tilde(params);
    if !mt.is_finite() {
        return Err(Error::InvalidParameter(
            "delta0 = 0 leaves the maximum queue length unbounded".into(),
        ));
    }
    let bounds = mean_queue_bounds(params);
    let snapped = mt.round();
    let (m, nu, dist) = if (mt - snapped).abs() <= INTEGER_SNAP && snapped >= 1.0 {
        let m = snapped as usize;
        (m, 0.0, ctmc::stationary(&build_generator_nu0(params, ph, m))?)
    } else {
        let m = mt.floor() as usize;
        let mut solve_err = None;
        let nu = ctmc::solve_decreasing_rate(
            |nu| {
                match ctmc::stationary(&build_generator(params, ph, m, nu)) {
                    Ok(dist) => dist.probabilities()[0] + dist.probabilities()[1],
                    Err(e) => {
                        solve_err = Some(e);
                        f64::NAN
                    }
                }
            },
            1.0 - params.lambda,
            "assignment rate nu",
            1e-10,
        )?;
        if let Some(e) = solve_err {
            return Err(e);
        }
        (m, nu, ctmc::stationary(&build_generator(params, ph, m, nu))?)
    };
    let pi_q = dist.queue_marginal();
    let e_proj = dist.project(|l| l.estimate - m);
    let pi_e = [
        e_proj.first().copied().unwrap_or(0.0),
        e_proj.get(1).copied().unwrap_or(0.0),
    ];
    let mean_queue: f64 = pi_q.iter().enumerate().map(|(q, p)| q as f64 * p).sum();
    Ok(PullSolution {
        m,
        m_tilde: mt,
        nu,
        delta0: params.delta0,
        delta1: params.delta1,
        pi_q,
        pi_e,
        mean_queue,
        mean_response: mean_queue / params.lambda,
        bounds,
        dist,
    })
}
