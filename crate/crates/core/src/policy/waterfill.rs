//! Batch water-filling policy: batches of M jobs arrive at rate λN/M, each
//! batch samples (δ/λ)·M queues and spreads its jobs one at a time onto the
//! currently shortest sampled queue.
//!
//! In the large-scale limit the sampled queues are topped up to a level m,
//! with a fraction c of them receiving one extra job. The cavity queue thus
//! jumps to m at rate δ(1−c) and to m + 1 at rate δc. With c = 0 the chain
//! coincides with the push policy's ν = 0 chain, so m = ⌊m̃⌋ with the push
//! level m̃; c is then pinned by π_0(m, c) = 1 − λ.
//!
//! Two independent routes to c are implemented: direct bisection on the
//! numeric stationary distribution (authoritative) and the renewal-cycle
//! formula
//!
//! ```text
//! 1 − λ = (y^{m−1}/δ) / (1/δ + κ(−K)⁻¹1),
//! κ = (1−c, c) ⊗ (y^{m−1} α + (1−y^{m−1}) α′),
//! K = [[S − δcI, δcI], [s*α, S]],
//! ```
//!
//! kept as a cross-check of each other.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ctmc::{self, Generator, GeneratorBuilder, StateLabel, StationaryDist};
use crate::error::{Error, Result};
use crate::phase_type::PhaseType;
use crate::policy::push::{self, PushParams, INTEGER_SNAP};

/// Arrival rate per server and overall probe rate (the batch geometry M and
/// d only matter for finite N and live in the simulator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaterfillParams {
    pub lambda: f64,
    pub delta: f64,
}

impl WaterfillParams {
    pub fn new(lambda: f64, delta: f64) -> Result<Self> {
        if !(0.0 < lambda && lambda < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "arrival rate lambda must lie in (0, 1), got {lambda}"
            )));
        }
        if !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "probe rate delta must be positive, got {delta}"
            )));
        }
        Ok(Self { lambda, delta })
    }

    fn as_push(&self) -> PushParams {
        PushParams { lambda: self.lambda, delta: self.delta }
    }
}

/// Solved cavity queue for the water filling policy.
#[derive(Debug, Clone, Serialize)]
pub struct WaterfillSolution {
    pub m: usize,
    pub m_tilde: f64,
    pub c: f64,
    pub pi_q: Vec<f64>,
    #[serde(rename = "EQ")]
    pub mean_queue: f64,
    #[serde(rename = "ER")]
    pub mean_response: f64,
    pub bounds: (f64, f64),
    #[serde(skip)]
    pub dist: StationaryDist,
}

/// Cavity generator Q^w(m, c) on {0} ∪ {(q, j), q = 1..=m+1}: every state
/// below level m jumps to m at rate δ(1−c) and to m+1 at rate δc; level m
/// jumps to m+1 at rate δc.
pub fn build_generator(params: &WaterfillParams, ph: &PhaseType, m: usize, c: f64) -> Generator {
    let ns = ph.order();
    let alpha = ph.alpha();
    let s = ph.s_matrix();
    let s_star = ph.s_star();
    let delta = params.delta;

    let mut labels = Vec::with_capacity(1 + (m + 1) * ns);
    labels.push(StateLabel::empty(0));
    for q in 1..=m + 1 {
        for j in 1..=ns {
            labels.push(StateLabel::busy(q, q, j));
        }
    }
    let idx = |q: usize, j: usize| if q == 0 { 0 } else { 1 + (q - 1) * ns + (j - 1) };
    let mut b = GeneratorBuilder::new(labels);
    for j in 1..=ns {
        if m >= 1 {
            b.add(idx(0, 0), idx(m, j), delta * (1.0 - c) * alpha[j - 1]);
        }
        b.add(idx(0, 0), idx(m + 1, j), delta * c * alpha[j - 1]);
    }
    for q in 1..=m + 1 {
        for j in 1..=ns {
            let from = idx(q, j);
            for j2 in 1..=ns {
                if j2 != j {
                    b.add(from, idx(q, j2), s[(j - 1, j2 - 1)]);
                }
            }
            if q == 1 {
                b.add(from, idx(0, 0), s_star[j - 1]);
            } else {
                for j2 in 1..=ns {
                    b.add(from, idx(q - 1, j2), s_star[j - 1] * alpha[j2 - 1]);
                }
            }
            if q < m {
                b.add(from, idx(m, j), delta * (1.0 - c));
                b.add(from, idx(m + 1, j), delta * c);
            } else if q == m {
                b.add(from, idx(m + 1, j), delta * c);
            }
        }
    }
    b.finish()
}

fn pi0_of_c(params: &WaterfillParams, ph: &PhaseType, m: usize, c: f64) -> Result<f64> {
    let dist = ctmc::stationary(&build_generator(params, ph, m, c))?;
    Ok(dist.probabilities()[0])
}

/// c by direct bisection of π_0(m, c) = 1 − λ on the numeric chain; the
/// authoritative route.
pub fn find_c_numeric(params: &WaterfillParams, ph: &PhaseType, m: usize) -> Result<f64> {
    let target = 1.0 - params.lambda;
    let at0 = pi0_of_c(params, ph, m, 0.0)?;
    if (at0 - target).abs() <= 1e-12 {
        return Ok(0.0);
    }
    if at0 < target || pi0_of_c(params, ph, m, 1.0)? > target {
        return Err(Error::FixedPointBracket { what: "water-filling mix c", lo: 0.0, hi: 1.0 });
    }
    // Tolerance below the bisection width floor: c is then pinned to ~1e-12,
    // tight enough for the closed-form marginals to match GTH at 1e-9.
    let mut solve_err = None;
    let c = ctmc::bisect_monotone(
        |c| match pi0_of_c(params, ph, m, c) {
            Ok(v) => v,
            Err(e) => {
                solve_err = Some(e);
                f64::NAN
            }
        },
        target,
        0.0,
        1.0,
        1e-13,
    )?;
    match solve_err {
        Some(e) => Err(e),
        None => Ok(c),
    }
}

/// c from the renewal-cycle formula (cross-check route). The mean time the
/// censored chain spends in levels {m, m+1} per cycle is κ(−K)⁻¹1 with the
/// entry mix κ over (level, phase).
pub fn find_c_renewal(params: &WaterfillParams, ph: &PhaseType, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidParameter("renewal formula needs m >= 1".into()));
    }
    let ns = ph.order();
    let ts = ph.timer_stats(params.delta)?;
    let ym1 = ts.y.powi(m as i32 - 1);
    // beta = y^{m-1} alpha + (1 - y^{m-1}) alpha'.
    let beta: DVector<f64> = ph.alpha() * ym1 + &ts.alpha_prime * (1.0 - ym1);
    let delta = params.delta;
    let s = ph.s_matrix();
    let s_star = ph.s_star();
    let alpha = ph.alpha();
    let pi0 = |c: f64| -> f64 {
        let mut k = DMatrix::zeros(2 * ns, 2 * ns);
        for i in 0..ns {
            for j in 0..ns {
                k[(i, j)] = s[(i, j)];
                k[(ns + i, ns + j)] = s[(i, j)];
                k[(ns + i, j)] = s_star[i] * alpha[j];
            }
            k[(i, i)] -= delta * c;
            k[(i, ns + i)] = delta * c;
        }
        let kappa = DVector::from_fn(2 * ns, |i, _| {
            if i < ns { (1.0 - c) * beta[i] } else { c * beta[i - ns] }
        });
        let t = (-k)
            .lu()
            .solve(&DVector::from_element(2 * ns, 1.0))
            .expect("K is a proper sub-generator");
        (ym1 / delta) / (1.0 / delta + kappa.dot(&t))
    };
    let target = 1.0 - params.lambda;
    if (pi0(0.0) - target).abs() <= 1e-12 {
        return Ok(0.0);
    }
    if pi0(0.0) < target || pi0(1.0) > target {
        return Err(Error::FixedPointBracket { what: "water-filling mix c", lo: 0.0, hi: 1.0 });
    }
    ctmc::bisect_monotone(pi0, target, 0.0, 1.0, 1e-12)
}

/// Queue-length marginal from the closed forms, given solved (m, c):
/// π_0 = 1 − λ, the geometric band π_q = (1−λ)(1/y − 1)/y^{q−1} for
/// q < m, and the top two levels from the rate-balance identities.
pub fn closed_form_dist(
    params: &WaterfillParams,
    ph: &PhaseType,
    m: usize,
    c: f64,
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidParameter("closed forms need m >= 1".into()));
    }
    let y = ph.timer_y(params.delta)?;
    let lambda = params.lambda;
    let delta = params.delta;
    let mut pi = vec![0.0; m + 2];
    pi[0] = 1.0 - lambda;
    for q in 1..m {
        pi[q] = (1.0 - lambda) * (1.0 / y - 1.0) / y.powi(q as i32 - 1);
    }
    // Batch-rate balance: λ/δ = Σ_{q<m} (m−q)π_q + (1 − π_{m+1})c.
    let fill_below: f64 = (0..m).map(|q| (m - q) as f64 * pi[q]).sum();
    pi[m + 1] = if c == 0.0 { 0.0 } else { 1.0 - (lambda / delta - fill_below) / c };
    pi[m] = 1.0 - (1.0 - lambda) * y.powi(1 - m as i32) - pi[m + 1];
    Ok(pi)
}

/// Full cavity solve: m = ⌊m̃⌋ with the push policy's m̃, then c from the
/// numeric fixed point.
pub fn solve(params: &WaterfillParams, ph: &PhaseType) -> Result<WaterfillSolution> {
    ph.require_unit_mean()?;
    let push_params = params.as_push();
    let y = ph.timer_y(params.delta)?;
    let mt = push::m_tilde(&push_params, y)?;
    let snapped = mt.round();
    let (m, c) = if (mt - snapped).abs() <= INTEGER_SNAP && snapped >= 1.0 {
        (snapped as usize, 0.0)
    } else {
        let m = mt.floor() as usize;
        (m, find_c_numeric(params, ph, m)?)
    };
    let dist = ctmc::stationary(&build_generator(params, ph, m, c))?;
    let pi_q = dist.queue_marginal();
    let mean_queue: f64 = pi_q.iter().enumerate().map(|(q, p)| q as f64 * p).sum();
    Ok(WaterfillSolution {
        m,
        m_tilde: mt,
        c,
        pi_q,
        mean_queue,
        mean_response: mean_queue / params.lambda,
        bounds: push::mean_queue_bounds_for_y(&push_params, y, mt),
        dist,
    })
}
