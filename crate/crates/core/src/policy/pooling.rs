//! Resource pooling: arrivals join a uniform server, every server works at
//! rate 1 − p, and a central server with capacity pN removes jobs from
//! maximal queues via a rate-pN token process.
//!
//! For λ > p the cavity queue is a bounded M/PH/1 queue with room m + 1 and
//! an extra departure rate ω at the top level (the share of central
//! capacity left over for queues of length m + 1). The level m is the
//! largest with π_0(m, ∞) > (1 − λ)/(1 − p), where π_0(m, ∞) is the idle
//! probability of the M/PH/1/m queue, available in matrix-geometric form
//! through R = λ(λI − (1−p)S − λ·1α)⁻¹; ω then restores the idle
//! probability to (1 − λ)/(1 − p).
//!
//! Three regimes in (λ, p): central-only (λ ≤ p, no queueing at all),
//! single-slot (max queue 1, insensitive to the job-size distribution), and
//! general (m grows without bound in the job-size variability).

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::Serialize;

use crate::ctmc::{self, Generator, GeneratorBuilder, StateLabel, StationaryDist};
use crate::error::{Error, Result};
use crate::phase_type::PhaseType;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoolingParams {
    pub lambda: f64,
    /// Fraction of the total service capacity held by the central server.
    pub p: f64,
}

impl PoolingParams {
    pub fn new(lambda: f64, p: f64) -> Result<Self> {
        if !(0.0 < lambda && lambda < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "arrival rate lambda must lie in (0, 1), got {lambda}"
            )));
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!(
                "pooled fraction p must lie in [0, 1), got {p}"
            )));
        }
        Ok(Self { lambda, p })
    }

    /// Load offered to an individual server: ρ = λ/(1 − p).
    pub fn rho(&self) -> f64 {
        self.lambda / (1.0 - self.p)
    }

    /// Target idle probability (1 − λ)/(1 − p) for λ > p.
    pub fn idle_target(&self) -> f64 {
        (1.0 - self.lambda) / (1.0 - self.p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// λ ≤ p: the central server absorbs all work; servers stay idle.
    CentralOnly,
    /// Max queue length 1; queue length law insensitive to the job sizes.
    SingleSlot,
    /// Max queue length grows with job-size variability.
    General,
}

/// p-threshold between the single-slot and general regimes at a given λ.
pub fn single_slot_threshold(lambda: f64) -> f64 {
    (1.0 + lambda - (1.0 + 2.0 * lambda - 3.0 * lambda * lambda).sqrt()) / 2.0
}

pub fn regime(params: &PoolingParams) -> Regime {
    if params.lambda <= params.p {
        Regime::CentralOnly
    } else if params.p >= single_slot_threshold(params.lambda) {
        Regime::SingleSlot
    } else {
        Regime::General
    }
}

/// Solved cavity queue for resource pooling.
#[derive(Debug, Clone, Serialize)]
pub struct PoolingSolution {
    pub regime: Regime,
    pub m: usize,
    pub omega: f64,
    pub pi_q: Vec<f64>,
    #[serde(rename = "EQ")]
    pub mean_queue: f64,
    #[serde(rename = "ER")]
    pub mean_response: f64,
    #[serde(skip)]
    pub dist: StationaryDist,
}

/// Matrix-geometric rate matrix R = λ(λI − (1−p)S − λ·**1**α)⁻¹; the level
/// masses of the unbounded M/PH/1 queue are α R^q up to normalization.
pub fn matrix_r(params: &PoolingParams, ph: &PhaseType) -> Result<DMatrix<f64>> {
    let ns = ph.order();
    let alpha = ph.alpha();
    let mut m = DMatrix::identity(ns, ns) * params.lambda - ph.s_matrix() * (1.0 - params.p);
    for i in 0..ns {
        for j in 0..ns {
            m[(i, j)] -= params.lambda * alpha[j];
        }
    }
    m.lu()
        .try_inverse()
        .map(|inv| inv * params.lambda)
        .ok_or(Error::Singular("matrix-geometric resolvent"))
}

/// Idle probability of the M/PH/1/m queue (the ω = ∞ chain):
/// π_0(m, ∞) = (α[Σ_{i<m} R^i + λ R^{m−1}(−(1−p)S)⁻¹]**1**)⁻¹.
pub fn idle_prob_truncated(params: &PoolingParams, ph: &PhaseType, m: usize) -> Result<f64> {
    if m == 0 {
        return Ok(1.0);
    }
    let ns = ph.order();
    let r = matrix_r(params, ph)?;
    let mut row = RowDVector::from_fn(ns, |_, j| ph.alpha()[j]);
    let mut acc = 0.0;
    for _ in 0..m {
        acc += row.sum();
        row *= &r;
    }
    // row is now alpha R^m; rewind one power for the boundary term.
    let row_m1 = {
        let mut v = RowDVector::from_fn(ns, |_, j| ph.alpha()[j]);
        for _ in 0..m - 1 {
            v *= &r;
        }
        v
    };
    let tail = (-ph.s_matrix() * (1.0 - params.p))
        .lu()
        .solve(&DVector::from_element(ns, 1.0))
        .ok_or(Error::Singular("(1-p)S boundary solve"))?;
    Ok(1.0 / (acc + params.lambda * (row_m1 * tail)[0]))
}

/// Largest m with π_0(m, ∞) > (1 − λ)/(1 − p); zero in the single-slot
/// regime (maximum queue length m + 1 = 1). Requires λ > p.
pub fn find_m(params: &PoolingParams, ph: &PhaseType) -> Result<usize> {
    if params.lambda <= params.p {
        return Err(Error::InvalidParameter(
            "find_m needs lambda > p (otherwise the servers idle)".into(),
        ));
    }
    let target = params.idle_target();
    let mut m = 0usize;
    loop {
        if idle_prob_truncated(params, ph, m + 1)? > target {
            m += 1;
        } else {
            return Ok(m);
        }
        if m > 2_000_000 {
            return Err(Error::FixedPointBracket {
                what: "pooling level m",
                lo: 0.0,
                hi: m as f64,
            });
        }
    }
}

/// Cavity generator Q^r(m, ω): a bounded M/PH/1 queue at rate 1 − p with an
/// extra phase-preserving departure rate ω from the top level (the token
/// removes a pending job).
pub fn build_generator(params: &PoolingParams, ph: &PhaseType, m: usize, omega: f64) -> Generator {
    let ns = ph.order();
    let alpha = ph.alpha();
    let s = ph.s_matrix();
    let s_star = ph.s_star();
    let PoolingParams { lambda, p } = *params;

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
        b.add(idx(0, 0), idx(1, j), lambda * alpha[j - 1]);
    }
    for q in 1..=m + 1 {
        for j in 1..=ns {
            let from = idx(q, j);
            for j2 in 1..=ns {
                if j2 != j {
                    b.add(from, idx(q, j2), (1.0 - p) * s[(j - 1, j2 - 1)]);
                }
            }
            let completion = (1.0 - p) * s_star[j - 1];
            if q == 1 {
                b.add(from, idx(0, 0), completion);
            } else {
                for j2 in 1..=ns {
                    b.add(from, idx(q - 1, j2), completion * alpha[j2 - 1]);
                }
            }
            if q == m + 1 {
                // Token service: a pending job leaves, the in-service phase
                // survives (for m = 0 the in-service job itself is taken).
                if q == 1 {
                    b.add(from, idx(0, 0), omega);
                } else {
                    b.add(from, idx(q - 1, j), omega);
                }
            } else {
                b.add(from, idx(q + 1, j), lambda);
            }
        }
    }
    b.finish()
}

fn pi0_of_omega(params: &PoolingParams, ph: &PhaseType, m: usize, omega: f64) -> Result<f64> {
    Ok(ctmc::stationary(&build_generator(params, ph, m, omega))?.probabilities()[0])
}

/// Level masses π_q·**1** = ((1−λ)/(1−p))·αR^q·**1** for q = 1..m−1, which
/// hold independently of ω once the fixed point is imposed.
pub fn geometric_level_masses(
    params: &PoolingParams,
    ph: &PhaseType,
    m: usize,
) -> Result<Vec<f64>> {
    let r = matrix_r(params, ph)?;
    let mut row = RowDVector::from_fn(ph.order(), |_, j| ph.alpha()[j]);
    let mut out = Vec::new();
    for _ in 1..m {
        row *= &r;
        out.push(params.idle_target() * row.sum());
    }
    Ok(out)
}

/// Top-level masses (π_m·**1**, π_{m+1}·**1**) from the boundary two-level
/// block solve: (π_m, π_{m+1}) = (−λ π_{m−1}, 0)·K(ω)⁻¹ with the phase-
/// resolved π_{m−1}. Needs m ≥ 1.
pub fn top_level_masses(
    params: &PoolingParams,
    ph: &PhaseType,
    m: usize,
    omega: f64,
) -> Result<(f64, f64)> {
    if m == 0 {
        return Err(Error::InvalidParameter("top-level solve needs m >= 1".into()));
    }
    let ns = ph.order();
    let PoolingParams { lambda, p } = *params;
    let s = ph.s_matrix();
    let s_star = ph.s_star();
    let alpha = ph.alpha();
    // Phase-resolved pi_{m-1}: target * alpha R^{m-1} (for m = 1 this is
    // the scalar pi_0 spread over the arrival phases, i.e. target * alpha).
    let r = matrix_r(params, ph)?;
    let mut row = RowDVector::from_fn(ns, |_, j| alpha[j]);
    for _ in 0..m - 1 {
        row *= &r;
    }
    row *= params.idle_target();

    let mut k = DMatrix::zeros(2 * ns, 2 * ns);
    for i in 0..ns {
        for j in 0..ns {
            k[(i, j)] = (1.0 - p) * s[(i, j)];
            k[(ns + i, ns + j)] = (1.0 - p) * s[(i, j)];
            k[(ns + i, j)] = (1.0 - p) * s_star[i] * alpha[j];
        }
        k[(i, i)] -= lambda;
        k[(i, ns + i)] = lambda;
        k[(ns + i, i)] += omega;
        k[(ns + i, ns + i)] -= omega;
    }
    // Row-vector solve x K = rhs  <=>  K^T x^T = rhs^T.
    let mut rhs = DVector::zeros(2 * ns);
    for j in 0..ns {
        rhs[j] = -lambda * row[j];
    }
    let x = k
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("pooling boundary block"))?;
    let pi_m: f64 = (0..ns).map(|i| x[i]).sum();
    let pi_m1: f64 = (0..ns).map(|i| x[ns + i]).sum();
    Ok((pi_m, pi_m1))
}

/// Residual of the token balance ω = (p − λπ_{m+1})/π_{m+1}, relative.
pub fn token_balance_residual(params: &PoolingParams, sol: &PoolingSolution) -> f64 {
    let pi_top = *sol.pi_q.last().unwrap();
    if pi_top <= 0.0 {
        return 0.0;
    }
    let implied = (params.p - params.lambda * pi_top) / pi_top;
    (sol.omega - implied) / implied.abs().max(1.0)
}

/// Full cavity solve.
pub fn solve(params: &PoolingParams, ph: &PhaseType) -> Result<PoolingSolution> {
    ph.require_unit_mean()?;
    let reg = regime(params);
    if reg == Regime::CentralOnly {
        // The central server absorbs all work; the cavity queue is empty
        // with probability one and jobs never wait (modeling convention:
        // report zero response time).
        let dist = ctmc::stationary(&GeneratorBuilder::new(vec![StateLabel::empty(0)]).finish())?;
        return Ok(PoolingSolution {
            regime: reg,
            m: 0,
            omega: 0.0,
            pi_q: vec![1.0],
            mean_queue: 0.0,
            mean_response: 0.0,
            dist,
        });
    }
    let m = find_m(params, ph)?;
    let target = params.idle_target();
    // pi_0(m, omega) increases in omega from pi_0 of the untampered
    // M/PH/1/(m+1) queue towards pi_0(m, inf) > target.
    let mut solve_err = None;
    let mut eval = |omega: f64| match pi0_of_omega(params, ph, m, omega) {
        Ok(v) => v,
        Err(e) => {
            solve_err = Some(e);
            f64::NAN
        }
    };
    let omega = {
        let at0 = eval(0.0);
        if (at0 - target).abs() <= 1e-10 {
            0.0
        } else if at0 > target {
            return Err(Error::FixedPointBracket { what: "token boost omega", lo: 0.0, hi: 0.0 });
        } else {
            let mut hi = 1.0;
            while eval(hi) < target {
                hi *= 2.0;
                if hi > 1e12 {
                    return Err(Error::FixedPointBracket { what: "token boost omega", lo: 0.0, hi });
                }
            }
            // Run the bisection down to its width floor so the geometric
            // level masses agree with GTH at 1e-9.
            ctmc::bisect_monotone(&mut eval, target, 0.0, hi, 1e-13)?
        }
    };
    if let Some(e) = solve_err {
        return Err(e);
    }
    let dist = ctmc::stationary(&build_generator(params, ph, m, omega))?;
    let pi_q = dist.queue_marginal();
    let mean_queue: f64 = pi_q.iter().enumerate().map(|(q, p)| q as f64 * p).sum();
    Ok(PoolingSolution {
        regime: reg,
        m,
        omega,
        pi_q,
        mean_queue,
        mean_response: mean_queue / params.lambda,
        dist,
    })
}

/// Maximum queue length under deterministic job sizes: the smallest n with
/// M/D/1/n idle probability below (1 − λ)/(1 − p). Deterministic sizes
/// minimize the maximum queue length, so this lower-bounds find_m + 1.
///
/// The alternating M/D/1 series loses all precision once its terms dwarf
/// the result, so beyond n = 40 the Erlang(64) chain stands in for the
/// deterministic distribution.
pub fn deterministic_min_m(params: &PoolingParams) -> Result<usize> {
    if params.lambda <= params.p {
        return Err(Error::InvalidParameter(
            "deterministic bound needs lambda > p".into(),
        ));
    }
    let target = params.idle_target();
    let rho = params.rho();
    let mut n = 1usize;
    loop {
        let pi0 = if n <= 40 {
            md1_idle_probability(n, rho)
        } else {
            let proxy = PhaseType::erlang(64)?;
            idle_prob_truncated(params, &proxy, n)?
        };
        if pi0 < target {
            return Ok(n);
        }
        n += 1;
        if n > 100_000 {
            return Err(Error::FixedPointBracket {
                what: "deterministic level",
                lo: 0.0,
                hi: n as f64,
            });
        }
    }
}

/// Idle probability of the M/D/1/n queue at load ρ:
/// 1/(1 + ρ·Σ_{k<n} ((−1)^k/k!)(n−1−k)^k e^{(n−1−k)ρ} ρ^k), summed with
/// Kahan compensation.
fn md1_idle_probability(n: usize, rho: f64) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    let mut factorial = 1.0f64;
    for k in 0..n {
        if k > 0 {
            factorial *= k as f64;
        }
        let base = (n - 1 - k) as f64;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let term = sign / factorial * base.powi(k as i32) * (base * rho).exp() * rho.powi(k as i32);
        let t = sum + term;
        comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
        sum = t;
    }
    1.0 / (1.0 + rho * (sum + comp))
}
