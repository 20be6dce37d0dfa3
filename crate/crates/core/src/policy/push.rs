//! Hyperscalable push policy: the dispatcher probes servers at rate δ per
//! server, keeps queue-length estimates, and assigns arrivals to a server
//! with minimal estimate.
//!
//! In the large-scale limit every estimate is m or m + 1 and the cavity
//! queue lives on states (q, e, j) with actual length q ≤ e, estimate
//! e ∈ {m, m+1} and service phase j. A probe replaces the state by
//! (max(q, m), max(q, m)) because the dispatcher instantly tops the queue up
//! to level m; assignments at the unknown rate ν push e to m + 1. The pair
//! (m, ν) is pinned by P[queue empty] = 1 − λ.
//!
//! The maximum level depends on the job-size distribution only through the
//! timer-race probability y:
//!
//! ```text
//! m̃ = log(1/y + (λ/(δ(1−λ)) − 1)·(1−y)/y) / log(1/y),   m = ⌊m̃⌋.
//! ```

use serde::Serialize;

use crate::ctmc::{self, Generator, GeneratorBuilder, StateLabel, StationaryDist};
use crate::error::{Error, Result};
use crate::phase_type::PhaseType;

/// Arrival rate per server and probe rate per server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PushParams {
    pub lambda: f64,
    pub delta: f64,
}

impl PushParams {
    pub fn new(lambda: f64, delta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::InvalidParameter(format!(
                "arrival rate lambda must lie in [0, 1), got {lambda}"
            )));
        }
        if !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "probe rate delta must be positive, got {delta}"
            )));
        }
        Ok(Self { lambda, delta })
    }
}

/// Solved cavity queue for the push policy.
#[derive(Debug, Clone, Serialize)]
pub struct PushSolution {
    pub m: usize,
    pub m_tilde: f64,
    pub nu: f64,
    /// Marginal of the actual queue length, indices 0..=m+1.
    pub pi_q: Vec<f64>,
    /// (P[e = m], P[e = m+1]).
    pub pi_e: [f64; 2],
    #[serde(rename = "EQ")]
    pub mean_queue: f64,
    #[serde(rename = "ER")]
    pub mean_response: f64,
    /// Mean-queue sandwich (lower, upper) from the threshold arrival rates.
    pub bounds: (f64, f64),
    #[serde(skip)]
    pub dist: StationaryDist,
}

/// Real-valued maximum queue level m̃ as a function of y = P[Z < X].
///
/// Returns 0 exactly when λ = 0; the log argument is ≥ 1 for all valid
/// parameters.
pub fn m_tilde(params: &PushParams, y: f64) -> Result<f64> {
    if !(0.0 < y && y < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "timer-race probability y must lie in (0, 1), got {y}"
        )));
    }
    let PushParams { lambda, delta } = *params;
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let arg = 1.0 / y + (lambda / (delta * (1.0 - lambda)) - 1.0) * (1.0 - y) / y;
    if arg <= 1.0 {
        return Ok(0.0);
    }
    Ok(arg.ln() / (1.0 / y).ln())
}

/// Arrival rate at which the maximum queue length jumps from m to m + 1.
pub fn lambda_m(m: usize, delta: f64, y: f64) -> f64 {
    let ym = y.powi(m as i32);
    let num = delta * y * (1.0 - ym);
    num / (num + ym * (1.0 - y))
}

/// Probe rate at which the maximum queue length becomes m (given λ).
pub fn delta_m(m: usize, lambda: f64, y: f64) -> f64 {
    let ym1 = y.powi(m as i32 - 1);
    ym1 * (1.0 - y) / (1.0 - ym1 * y) * lambda / (1.0 - lambda)
}

/// Index layout shared by the push and pull full cavity chains:
/// `[(0,m), (0,m+1)]`, then for q = 1..=m the e = m block followed by the
/// e = m+1 block (n_s phases each), then the q = m+1 (e = m+1) block.
pub(crate) fn two_estimate_labels(m: usize, ns: usize) -> Vec<StateLabel> {
    let mut labels = Vec::with_capacity(2 + (2 * m + 1) * ns);
    labels.push(StateLabel::empty(m));
    labels.push(StateLabel::empty(m + 1));
    for q in 1..=m {
        for e in [m, m + 1] {
            for j in 1..=ns {
                labels.push(StateLabel::busy(q, e, j));
            }
        }
    }
    for j in 1..=ns {
        labels.push(StateLabel::busy(m + 1, m + 1, j));
    }
    labels
}

/// Index of (q, e, j) in the layout above; `eup` selects e = m+1.
pub(crate) fn two_estimate_index(m: usize, ns: usize, q: usize, eup: bool, j: usize) -> usize {
    if q == 0 {
        return eup as usize;
    }
    if q == m + 1 {
        debug_assert!(eup);
        return 2 + 2 * m * ns + (j - 1);
    }
    2 + (q - 1) * 2 * ns + (eup as usize) * ns + (j - 1)
}

/// Cavity generator Q(m, ν) on the full two-estimate state space.
pub fn build_generator(params: &PushParams, ph: &PhaseType, m: usize, nu: f64) -> Generator {
    let ns = ph.order();
    let alpha = ph.alpha();
    let s = ph.s_matrix();
    let s_star = ph.s_star();
    let delta = params.delta;
    let idx = |q: usize, eup: bool, j: usize| two_estimate_index(m, ns, q, eup, j);
    let mut b = GeneratorBuilder::new(two_estimate_labels(m, ns));

    for eup in [false, true] {
        // Probe from an empty queue: batch-fill to (m, m); a no-op when m=0
        // and e is already 0.
        for j in 1..=ns {
            if m >= 1 {
                b.add(idx(0, eup, 0), idx(m, false, j), delta * alpha[j - 1]);
            } else if eup {
                b.add(idx(0, true, 0), idx(0, false, 0), delta * alpha[j - 1]);
            }
        }
    }
    // Assignment to an empty queue with estimate m.
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
                // Service completion keeps the estimate.
                if q == 1 {
                    b.add(from, idx(0, eup, 0), s_star[j - 1]);
                } else {
                    for j2 in 1..=ns {
                        b.add(from, idx(q - 1, eup, j2), s_star[j - 1] * alpha[j2 - 1]);
                    }
                }
                // Probe: state becomes (max(q, m), max(q, m), j).
                if q < m || (q == m && eup) {
                    b.add(from, idx(m, false, j), delta);
                }
                // Assignment when the estimate is m.
                if !eup {
                    b.add(from, idx(q + 1, true, j), nu);
                }
            }
        }
    }
    b.finish()
}

/// Reduced chain for ν = 0: states {0} ∪ {(q, j), q = 1..m}, all with
/// estimate m (the e = m+1 states are transient and removed).
pub fn build_generator_nu0(params: &PushParams, ph: &PhaseType, m: usize) -> Generator {
    assert!(m >= 1, "reduced chain needs m >= 1");
    let ns = ph.order();
    let alpha = ph.alpha();
    let s = ph.s_matrix();
    let s_star = ph.s_star();
    let delta = params.delta;

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
        b.add(idx(0, 0), idx(m, j), delta * alpha[j - 1]);
    }
    for q in 1..=m {
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
                b.add(from, idx(m, j), delta);
            }
        }
    }
    b.finish()
}

/// Closed-form cumulative probabilities of the ν = 0 chain: entry i − 1
/// (for i = 1..=m) equals Σ_{q<i} π_q(m).
pub fn cumulative(params: &PushParams, ph: &PhaseType, m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidParameter("cumulative needs m >= 1".into()));
    }
    let ts = ph.timer_stats(params.delta)?;
    let denom = 1.0 / params.delta
        + ts.y.powi(m as i32 - 1)
        + (1.0 - ts.y.powi(m as i32 - 1)) * ts.excess;
    Ok((1..=m)
        .map(|i| (ts.y.powi((m - i) as i32) / params.delta) / denom)
        .collect())
}

/// Ceiling that tolerates values a few ulps above an integer (the bounds
/// land exactly on integers for round parameter choices).
fn ceil_snapped(x: f64) -> u64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r as u64
    } else {
        x.ceil() as u64
    }
}

/// Distribution-free bounds on the maximum queue length ⌈m̃⌉:
/// (deterministic-job lower bound, y → 1 upper bound).
pub fn max_queue_bounds(params: &PushParams) -> (u64, u64) {
    let PushParams { lambda, delta } = *params;
    if lambda == 0.0 {
        return (0, 0);
    }
    let lower = ceil_snapped(
        1.0 / delta * (1.0 + lambda / (1.0 - lambda) * (delta.exp() - 1.0) / delta).ln(),
    );
    let upper = ceil_snapped(lambda / ((1.0 - lambda) * delta));
    (lower, upper)
}

/// m̃ for Erlang-k jobs, the minimum over all order-k PH distributions.
/// Decreasing in k with limit `deterministic_m_tilde`.
pub fn m_erlang_bound(k: usize, params: &PushParams) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("erlang order must be >= 1".into()));
    }
    let PushParams { lambda, delta } = *params;
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let kf = k as f64;
    // k·log(k/(k+delta)) = -k·ln(1 + delta/k), evaluated stably.
    let kln = -kf * (delta / kf).ln_1p();
    let yk = kln.exp();
    Ok(1.0 - (1.0 + (lambda / (1.0 - lambda) - delta) * (1.0 - yk) / delta).ln() / kln)
}

/// The k → ∞ limit of `m_erlang_bound`: m̃ for deterministic jobs.
pub fn deterministic_m_tilde(params: &PushParams) -> f64 {
    let PushParams { lambda, delta } = *params;
    if lambda == 0.0 {
        return 0.0;
    }
    (1.0 + lambda / (1.0 - lambda) * (delta.exp() - 1.0) / delta).ln() / delta
}

/// Mean-queue sandwich: (⌊m̃⌋ − λ_{⌊m̃⌋}/δ, ⌈m̃⌉ − λ_{⌈m̃⌉}/δ); the gap is
/// below one and both ends coincide when m̃ is an integer.
pub fn mean_queue_bounds(params: &PushParams, ph: &PhaseType) -> Result<(f64, f64)> {
    let y = ph.timer_y(params.delta)?;
    let mt = m_tilde(params, y)?;
    Ok(mean_queue_bounds_for_y(params, y, mt))
}

pub(crate) fn mean_queue_bounds_for_y(params: &PushParams, y: f64, mt: f64) -> (f64, f64) {
    // Snap near-integer levels so the sandwich collapses exactly there.
    let snapped = mt.round();
    let mt = if (mt - snapped).abs() <= INTEGER_SNAP { snapped } else { mt };
    let lo_m = mt.floor() as usize;
    let hi_m = mt.ceil() as usize;
    let lower = if lo_m == 0 {
        0.0
    } else {
        lo_m as f64 - lambda_m(lo_m, params.delta, y) / params.delta
    };
    let upper = if hi_m == 0 {
        0.0
    } else {
        hi_m as f64 - lambda_m(hi_m, params.delta, y) / params.delta
    };
    (lower, upper)
}

/// Distribution-free cap on the mean queue length (y → 1 limit).
pub fn mean_queue_upper_bound(params: &PushParams) -> f64 {
    let (_, qmax) = max_queue_bounds(params);
    let q = qmax as f64;
    params.delta * q * q / (1.0 + params.delta * q)
}

/// Heavy-traffic slope: m̃ / log(1/(1−λ)) → 1/log(1/y) as λ → 1.
/// Reports +∞ as y → 1.
pub fn heavy_traffic_slope(y: f64) -> f64 {
    let l = (1.0 / y).ln();
    if l <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / l
    }
}

/// Residual of the assignment-rate balance
/// ν·π^e_m − (λ − δ·Σ_{q≤m} (m−q)·π_q); vanishes at the solution.
pub fn nu_residual(params: &PushParams, sol: &PushSolution) -> f64 {
    let consumed: f64 = (0..=sol.m)
        .map(|q| (sol.m - q) as f64 * sol.pi_q.get(q).copied().unwrap_or(0.0))
        .sum();
    sol.nu * sol.pi_e[0] - (params.lambda - params.delta * consumed)
}

/// Treats m̃ within this distance of an integer as exactly integer (ν = 0),
/// avoiding bisection on a degenerate bracket.
pub(crate) const INTEGER_SNAP: f64 = 1e-12;

/// Full cavity solve: m = ⌊m̃⌋, then ν from π_0(m, ν) = 1 − λ by bisection.
pub fn solve(params: &PushParams, ph: &PhaseType) -> Result<PushSolution> {
    ph.require_unit_mean()?;
    let PushParams { lambda, delta: _ } = *params;
    if lambda == 0.0 {
        let dist = ctmc::stationary(&build_generator_trivial())?;
        return Ok(PushSolution {
            m: 0,
            m_tilde: 0.0,
            nu: 0.0,
            pi_q: vec![1.0],
            pi_e: [1.0, 0.0],
            mean_queue: 0.0,
            mean_response: 0.0,
            bounds: (0.0, 0.0),
            dist,
        });
    }
    let y = ph.timer_y(params.delta)?;
    let mt = m_tilde(params, y)?;
    let bounds = mean_queue_bounds_for_y(params, y, mt);
    let snapped = mt.round();
    let (m, nu, dist) = if (mt - snapped).abs() <= INTEGER_SNAP && snapped >= 1.0 {
        let m = snapped as usize;
        (m, 0.0, ctmc::stationary(&build_generator_nu0(params, ph, m))?)
    } else {
        let m = mt.floor() as usize;
        let pi0 = |nu: f64| -> Result<f64> {
            let dist = ctmc::stationary(&build_generator(params, ph, m, nu))?;
            Ok(dist.probabilities()[0] + dist.probabilities()[1])
        };
        let mut solve_err = None;
        let nu = ctmc::solve_decreasing_rate(
            |nu| match pi0(nu) {
                Ok(v) => v,
                Err(e) => {
                    solve_err = Some(e);
                    f64::NAN
                }
            },
            1.0 - lambda,
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
    Ok(PushSolution {
        m,
        m_tilde: mt,
        nu,
        pi_q,
        pi_e,
        mean_queue,
        mean_response: mean_queue / lambda,
        bounds,
        dist,
    })
}

/// Single absorbing empty state for the λ = 0 edge case.
fn build_generator_trivial() -> Generator {
    GeneratorBuilder::new(vec![StateLabel::empty(0)]).finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(lambda: f64, delta: f64) -> PushParams {
        PushParams::new(lambda, delta).unwrap()
    }

    #[test]
    fn m_tilde_examples() {
        // Exponential specialization: m̃ = -log(1-λ)/log(1+δ).
        let y = 1.0 / 1.3;
        let mt = m_tilde(&p(0.9, 0.3), y).unwrap();
        assert_abs_diff_eq!(mt, -(0.1f64).ln() / (1.3f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(mt, 8.7763, epsilon = 1e-4);
        assert_eq!(mt.ceil() as usize, 9);

        // λ/(1-λ) = δ collapses the argument to 1/y, so m̃ = 1.
        let y = PhaseType::erlang(4).unwrap().timer_y(2.0 / 3.0).unwrap();
        let mt = m_tilde(&p(0.4, 2.0 / 3.0), y).unwrap();
        assert_abs_diff_eq!(mt, 1.0, epsilon = 1e-12);

        assert_eq!(m_tilde(&p(0.0, 0.5), 0.5).unwrap(), 0.0);
        assert!(m_tilde(&p(0.5, 0.5), 1.0).is_err());
    }

    #[test]
    fn lambda_m_and_delta_m_examples() {
        // Exponential: λ_m = 1 - (1+δ)^{-m}.
        let y = 1.0 / 1.5;
        assert_abs_diff_eq!(lambda_m(2, 0.5, y), 5.0 / 9.0, epsilon = 1e-12);
        // m -> infinity gives full utilization.
        assert_abs_diff_eq!(lambda_m(4000, 0.5, y), 1.0, epsilon = 1e-12);

        // Exponential: δ_m = (1-λ)^{-1/m} - 1.
        let lam = 0.75f64;
        let dm = |m: usize| {
            // Solve the fixed point: δ_m depends on y which depends on δ.
            // For exponential y = 1/(1+δ), the closed form is direct.
            let expect = (1.0 - lam).powf(-1.0 / m as f64) - 1.0;
            let y = 1.0 / (1.0 + expect);
            (delta_m(m, lam, y), expect)
        };
        let (got, expect) = dm(2);
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 1.0, epsilon = 1e-12);
        // m = 1: threshold is λ/(1-λ) for any y.
        assert_abs_diff_eq!(delta_m(1, 0.6, 0.7), 0.6 / 0.4, epsilon = 1e-12);
    }

    #[test]
    fn lambda_m_inverts_m_tilde() {
        let ph = PhaseType::hyperexp(10.0, 0.5).unwrap();
        for delta in [0.25, 0.8] {
            let y = ph.timer_y(delta).unwrap();
            for m in [1usize, 3, 7] {
                let lam = lambda_m(m, delta, y);
                let mt = m_tilde(&p(lam, delta), y).unwrap();
                assert_abs_diff_eq!(mt, m as f64, epsilon = 1e-9);
                // And the delta route.
                let dm = delta_m(m, lam, ph.timer_y(delta).unwrap());
                assert_abs_diff_eq!(dm, delta, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn delta_m_inverts_m_tilde() {
        // push_m_tilde(λ, δ_m(m, λ, y(δ_m)), ...) = m needs the y at the new
        // delta; iterate the implicit equation for the exponential where the
        // closed form is available.
        let lam = 0.75;
        for m in [1usize, 2, 5] {
            let delta = (1.0f64 - lam).powf(-1.0 / m as f64) - 1.0;
            let y = 1.0 / (1.0 + delta);
            let mt = m_tilde(&p(lam, delta), y).unwrap();
            assert_abs_diff_eq!(mt, m as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn generator_smallest_case() {
        // m = 0: states {(0,0), (0,1)} and (1,1,j).
        let ph = PhaseType::exponential();
        let gen = build_generator(&p(0.3, 2.0), &ph, 0, 0.7);
        assert_eq!(gen.n(), 3);
        let q = gen.matrix();
        // (0,0) leaves only via assignment.
        assert_abs_diff_eq!(q[(0, 2)], 0.7, epsilon = 1e-14);
        // (0,1) probed back to (0,0).
        assert_abs_diff_eq!(q[(1, 0)], 2.0, epsilon = 1e-14);
        // (1,1,j): completion to (0,1); probe is a self-loop.
        assert_abs_diff_eq!(q[(2, 1)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(q[(2, 0)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn generator_rows_conserve_and_nu0_isolates_upper_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for ph in [
            PhaseType::exponential(),
            PhaseType::erlang(3).unwrap(),
            PhaseType::hyper_erlang(2, 5, 0.25).unwrap(),
        ] {
            for _ in 0..3 {
                let m = rng.gen_range(0..6);
                let nu = rng.gen_range(0.0..3.0);
                let params = p(rng.gen_range(0.1..0.95), rng.gen_range(0.05..2.0));
                let gen = build_generator(&params, &ph, m, nu);
                for i in 0..gen.n() {
                    let row: f64 = (0..gen.n()).map(|j| gen.matrix()[(i, j)]).sum();
                    assert!(row.abs() < 1e-12, "row {i} sums to {row}");
                }
            }
            // ν = 0: no transitions into any e = m+1 state.
            let m = 3;
            let gen = build_generator(&p(0.8, 0.4), &ph, m, 0.0);
            for (col, label) in gen.labels().iter().enumerate() {
                if label.estimate == m + 1 {
                    for i in 0..gen.n() {
                        if i != col && gen.labels()[i].estimate == m {
                            assert_eq!(
                                gen.matrix()[(i, col)],
                                0.0,
                                "e=m state {i} feeds e=m+1 state {col} despite nu=0"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn cumulative_matches_reduced_chain() {
        // Closed form vs GTH on the ν = 0 chain.
        for (ph, delta, m) in [
            (PhaseType::exponential(), 0.3, 8),
            (PhaseType::hyperexp(10.0, 0.5).unwrap(), 0.5, 5),
        ] {
            let params = p(0.9, delta);
            let gen = build_generator_nu0(&params, &ph, m);
            let dist = ctmc::stationary(&gen).unwrap();
            let qm = dist.queue_marginal();
            let closed = cumulative(&params, &ph, m).unwrap();
            let mut acc = 0.0;
            for i in 1..=m {
                acc += qm[i - 1];
                assert!(
                    (closed[i - 1] - acc).abs() < 1e-10,
                    "i={i}: closed {} vs numeric {acc}",
                    closed[i - 1]
                );
            }
        }
    }

    #[test]
    fn cumulative_m1_is_idle_toggle() {
        let params = p(0.5, 0.7);
        let ph = PhaseType::erlang(2).unwrap();
        let closed = cumulative(&params, &ph, 1).unwrap();
        let expect = (1.0 / 0.7) / (1.0 / 0.7 + 1.0);
        assert_abs_diff_eq!(closed[0], expect, epsilon = 1e-12);
    }

    #[test]
    fn pi0_strictly_decreasing_in_nu_and_m() {
        let ph = PhaseType::erlang(3).unwrap();
        let params = p(0.8, 0.4);
        let mut last = f64::INFINITY;
        for nu in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0] {
            let dist = ctmc::stationary(&build_generator(&params, &ph, 3, nu)).unwrap();
            let pi0 = dist.probabilities()[0] + dist.probabilities()[1];
            assert!(pi0 < last, "pi0 not strictly decreasing in nu at {nu}");
            last = pi0;
        }
        let mut last = f64::INFINITY;
        for m in 1..=5 {
            let dist = ctmc::stationary(&build_generator(&params, &ph, m, 0.3)).unwrap();
            let pi0 = dist.probabilities()[0] + dist.probabilities()[1];
            assert!(pi0 < last, "pi0 not strictly decreasing in m at {m}");
            last = pi0;
        }
    }

    #[test]
    fn solve_reproduces_reference_response_times() {
        // Frozen cavity values for the four reference settings.
        let cases = [
            (PhaseType::exponential(), 0.9, 0.3, 6.0081053880),
            (PhaseType::hyperexp(15.0, 0.5).unwrap(), 0.85, 0.5, 4.5862359586),
            (PhaseType::erlang(6).unwrap(), 0.8, 0.25, 4.2205508470),
            (PhaseType::hyper_erlang(2, 5, 0.25).unwrap(), 0.85, 0.15, 8.7304005929),
        ];
        for (ph, lam, delta, expect) in cases {
            let sol = solve(&p(lam, delta), &ph).unwrap();
            assert!(
                (sol.mean_response - expect).abs() < 5e-5,
                "ER {} vs {expect}",
                sol.mean_response
            );
            assert!((sol.pi_q[0] - (1.0 - lam)).abs() < 1e-8);
            assert!((sol.mean_response - sol.mean_queue / lam).abs() < 1e-12);
            assert!(nu_residual(&p(lam, delta), &sol).abs() < 1e-8);
            // Support ends at ceil(m_tilde).
            assert_eq!(sol.pi_q.len() - 1, sol.m_tilde.ceil() as usize);
            assert!(sol.bounds.0 <= sol.mean_queue + 1e-9);
            assert!(sol.mean_queue <= sol.bounds.1 + 1e-9);
            assert!(sol.bounds.1 - sol.bounds.0 < 1.0);
        }
    }

    #[test]
    fn solve_lambda_zero_and_integer_boundary() {
        let ph = PhaseType::exponential();
        let sol = solve(&p(0.0, 0.5), &ph).unwrap();
        assert_eq!(sol.m, 0);
        assert_eq!(sol.pi_q, vec![1.0]);
        assert_eq!(sol.mean_response, 0.0);

        // λ = λ_m for m = 3 makes m̃ exactly integer: ν = 0.
        let delta = 0.5;
        let y = 1.0 / 1.5;
        let lam = lambda_m(3, delta, y);
        let sol = solve(&p(lam, delta), &ph).unwrap();
        assert_eq!(sol.m, 3);
        assert_eq!(sol.nu, 0.0);
        assert_eq!(sol.pi_e, [1.0, 0.0]);
        assert!((sol.pi_q[0] - (1.0 - lam)).abs() < 1e-10);
        // Bounds coincide at the boundary.
        assert_abs_diff_eq!(sol.bounds.0, sol.bounds.1, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.mean_queue, sol.bounds.0, epsilon = 1e-9);
    }

    #[test]
    fn solve_vanishing_wait_regime() {
        // λ/(1-λ) < δ: m̃ < 1, one job at most in the system.
        let ph = PhaseType::erlang(2).unwrap();
        let sol = solve(&p(0.3, 1.0), &ph).unwrap();
        assert_eq!(sol.m, 0);
        assert!(sol.m_tilde < 1.0);
        assert_eq!(sol.pi_q.len(), 2);
        assert!((sol.pi_q[0] - 0.7).abs() < 1e-8);
        // E[R] = E[Q]/λ = pi_1/λ = 1: no waiting.
        assert_abs_diff_eq!(sol.mean_response, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn max_queue_bounds_examples() {
        // Vanishing wait: δ >= λ/(1-λ) gives upper bound 1.
        let (_, upper) = max_queue_bounds(&p(0.4, 1.0));
        assert_eq!(upper, 1);
        let (lower, upper) = max_queue_bounds(&p(0.9, 0.3));
        assert!(lower as f64 <= 9.0 && 9.0 <= upper as f64);
        assert_eq!(upper, 30);
        // Deterministic jobs: ceil(m̃) attains the lower bound.
        let det = deterministic_m_tilde(&p(0.9, 0.3));
        assert_eq!(det.ceil() as u64, lower);
    }

    #[test]
    fn erlang_bound_decreasing_to_deterministic_limit() {
        let params = p(0.8, 0.25);
        // k = 1 equals m̃ with the exponential y.
        let m1 = m_erlang_bound(1, &params).unwrap();
        let mt = m_tilde(&params, 1.0 / 1.25).unwrap();
        assert_abs_diff_eq!(m1, mt, epsilon = 1e-10);
        let mut last = f64::INFINITY;
        for k in 1..=20 {
            let mk = m_erlang_bound(k, &params).unwrap();
            assert!(mk < last, "m_erl not decreasing at k={k}");
            last = mk;
        }
        let det = deterministic_m_tilde(&params);
        assert!((m_erlang_bound(10_000, &params).unwrap() - det).abs() < 1e-3);
    }

    #[test]
    fn mean_queue_bounds_example() {
        let params = p(0.9, 0.3);
        let (lo, hi) = mean_queue_bounds(&params, &PhaseType::exponential()).unwrap();
        assert_abs_diff_eq!(lo, 5.075, epsilon = 1e-3);
        assert_abs_diff_eq!(hi, 5.981, epsilon = 1e-3);
        let eq = 0.9 * 6.0081;
        assert!(lo <= eq && eq <= hi);
        // Distribution-free cap dominates the sandwich top.
        assert!(mean_queue_upper_bound(&params) >= hi);
    }

    #[test]
    fn heavy_traffic_slope_examples() {
        assert_abs_diff_eq!(heavy_traffic_slope(1.0 / 1.3), 1.0 / (1.3f64).ln(), epsilon = 1e-12);
        assert!(heavy_traffic_slope(1.0).is_infinite());
        // y = e^{-δ} gives slope 1/δ.
        let delta = 0.7f64;
        assert_abs_diff_eq!(heavy_traffic_slope((-delta).exp()), 1.0 / delta, epsilon = 1e-12);
        // m̃(λ)/log(1/(1-λ)) approaches the slope.
        let lam = 1.0 - 1e-8;
        let y = 1.0 / 1.3;
        let mt = m_tilde(&p(lam, 0.3), y).unwrap();
        let ratio = mt / (1.0 / (1.0 - lam)).ln();
        assert!((ratio / heavy_traffic_slope(y) - 1.0).abs() < 0.02);
    }

    #[test]
    fn m_depends_on_distribution_only_through_y() {
        // Two distinct order-2 distributions tuned to share y at δ = 0.5.
        let delta = 0.5;
        let a = PhaseType::hyperexp(10.0, 0.3).unwrap();
        let y_a = a.timer_y(delta).unwrap();
        // Find scv for f = 0.25 with matching y by bisection.
        let y_of = |scv: f64| {
            PhaseType::hyperexp(scv, 0.25)
                .unwrap()
                .timer_y(delta)
                .unwrap()
        };
        let scv = ctmc::bisect_monotone(y_of, y_a, 1.0001, 400.0, 1e-13).unwrap();
        let b = PhaseType::hyperexp(scv, 0.25).unwrap();
        assert!(a.moments().1 != b.moments().1);
        let params = p(0.85, delta);
        let sol_a = solve(&params, &a).unwrap();
        let sol_b = solve(&params, &b).unwrap();
        assert_eq!(sol_a.m, sol_b.m);
        assert!((sol_a.m_tilde - sol_b.m_tilde).abs() < 1e-7);
    }

    #[test]
    fn response_time_kinked_at_integer_boundary() {
        // E[R](λ) is continuous but non-differentiable at λ_m.
        let ph = PhaseType::exponential();
        let delta = 0.5;
        let lam0 = lambda_m(3, delta, 1.0 / 1.5);
        let h = 1e-4;
        let er = |lam: f64| solve(&p(lam, delta), &ph).unwrap().mean_response;
        let left = (er(lam0) - er(lam0 - h)) / h;
        let right = (er(lam0 + h) - er(lam0)) / h;
        assert!((er(lam0 + h) - er(lam0 - h)).abs() < 0.1, "E[R] jumps at the boundary");
        assert!(
            (right - left).abs() > 0.05 * left.abs(),
            "no detectable slope change: left={left}, right={right}"
        );
    }

    #[test]
    fn fixed_point_grid() {
        let catalog = [
            PhaseType::exponential(),
            PhaseType::erlang(3).unwrap(),
            PhaseType::hyperexp(10.0, 0.5).unwrap(),
            PhaseType::hyper_erlang(2, 5, 0.25).unwrap(),
            PhaseType::z_epsilon(0.1).unwrap(),
        ];
        for ph in &catalog {
            for lam in [0.5, 0.75, 0.95] {
                for delta in [0.15, 0.5] {
                    let params = p(lam, delta);
                    let sol = solve(&params, ph).unwrap();
                    assert!(
                        (sol.pi_q[0] - (1.0 - lam)).abs() < 1e-8,
                        "fixed point off at lam={lam}, delta={delta}"
                    );
                    assert!(nu_residual(&params, &sol).abs() < 1e-8);
                    assert!(sol.bounds.0 <= sol.mean_queue + 1e-8);
                    assert!(sol.mean_queue <= sol.bounds.1 + 1e-8);
                }
            }
        }
    }
}
