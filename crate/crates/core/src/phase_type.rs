//! Phase-type (PH) job-size distributions.
//!
//! A PH distribution is the absorption time of a finite CTMC with initial
//! probability row vector α and transient sub-generator S; the absorption
//! rates are s* = −S·**1**. All constructors here produce distributions with
//! mean one, the normalization assumed by every policy solver.
//!
//! Besides the standard catalog (exponential, Erlang, hyperexponential,
//! hyper-Erlang and the extremal two-phase family `z_epsilon`), the module
//! computes the timer-race statistics that drive the cavity analyses: the
//! probability y that a job finishes before an independent exponential timer
//! of rate δ, the phase distribution α′ seen when the timer fires first, and
//! the conditional excess E[Z − X | Z > X].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A phase-type distribution (α, S) with s* = −S·**1**.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseType {
    alpha: DVector<f64>,
    s: DMatrix<f64>,
    s_star: DVector<f64>,
}

/// Statistics of the race between a PH job Z and an exponential timer X of
/// rate δ.
#[derive(Debug, Clone)]
pub struct TimerStats {
    /// Timer rate δ.
    pub delta: f64,
    /// y = P[Z < X] = α (δI − S)⁻¹ s*.
    pub y: f64,
    /// Service-phase distribution at timer expiry, given Z > X.
    pub alpha_prime: DVector<f64>,
    /// E[Z − X | Z > X] = α′ (−S)⁻¹ **1**.
    pub excess: f64,
}

/// Serialized form: `{"alpha": [...], "S": [[...]]}`.
#[derive(Serialize, Deserialize)]
struct PhaseTypeJson {
    alpha: Vec<f64>,
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
}

impl PhaseType {
    /// Builds a PH distribution from raw (α, S), validating that α is a
    /// probability vector, S a sub-generator with invertible dynamics, and
    /// s* = −S·**1** is nonnegative.
    pub fn new(alpha: Vec<f64>, s_rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = alpha.len();
        if n == 0 {
            return Err(Error::InvalidParameter("empty phase vector".into()));
        }
        if s_rows.len() != n || s_rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidParameter(format!(
                "S must be {n}x{n} to match alpha"
            )));
        }
        if alpha.iter().any(|&a| !(-1e-15..=1.0 + 1e-12).contains(&a)) {
            return Err(Error::InvalidParameter(
                "alpha entries must lie in [0, 1]".into(),
            ));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "alpha must sum to 1, got {sum}"
            )));
        }
        let s = DMatrix::from_fn(n, n, |i, j| s_rows[i][j]);
        for i in 0..n {
            if s[(i, i)] >= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "S diagonal entry {i} must be negative"
                )));
            }
            for j in 0..n {
                if i != j && s[(i, j)] < 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "S off-diagonal entry ({i},{j}) must be nonnegative"
                    )));
                }
            }
        }
        let mut s_star = DVector::zeros(n);
        for i in 0..n {
            let row_sum: f64 = (0..n).map(|j| s[(i, j)]).sum();
            if row_sum > 1e-12 * s[(i, i)].abs() {
                return Err(Error::InvalidParameter(format!(
                    "row {i} of S sums to {row_sum} > 0"
                )));
            }
            s_star[i] = (-row_sum).max(0.0);
        }
        let ph = Self {
            alpha: DVector::from_vec(alpha),
            s,
            s_star,
        };
        // All states must be transient: (−S)⁻¹ 1 must exist and be positive.
        let mean_vec = ph.neg_s_inv_ones()?;
        if mean_vec.iter().any(|&m| !(m.is_finite() && m > 0.0)) {
            return Err(Error::InvalidParameter(
                "S is not an invertible sub-generator".into(),
            ));
        }
        Ok(ph)
    }

    /// Exponential distribution with mean one: α = [1], S = [[−1]].
    pub fn exponential() -> Self {
        Self::new(vec![1.0], vec![vec![-1.0]]).expect("exponential is valid")
    }

    /// Erlang(k): the sum of k exponentials of rate k (mean one).
    pub fn erlang(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("erlang order k must be >= 1".into()));
        }
        let rate = k as f64;
        let mut s = vec![vec![0.0; k]; k];
        for i in 0..k {
            s[i][i] = -rate;
            if i + 1 < k {
                s[i][i + 1] = rate;
            }
        }
        let mut alpha = vec![0.0; k];
        alpha[0] = 1.0;
        Self::new(alpha, s)
    }

    /// Order-2 hyperexponential with mean one, squared coefficient of
    /// variation `scv` and shape parameter `f` ∈ (0, 1): phase 1 carries a
    /// fraction f of the workload (p₁/μ₁ = f) and the second moment equals
    /// scv + 1.
    pub fn hyperexp(scv: f64, f: f64) -> Result<Self> {
        if scv < 1.0 {
            return Err(Error::InvalidParameter(format!(
                "hyperexponential requires scv >= 1, got {scv}"
            )));
        }
        if !(0.0..1.0).contains(&f) || f == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "shape parameter f must lie in (0, 1), got {f}"
            )));
        }
        // p1/mu1 = f, p2/mu2 = 1-f, p1 + p2 = 1 and
        // f/mu1 + (1-f)/mu2 = (scv+1)/2 collapse to the quadratic
        //   m2*f*mu1^2 + (1 - 2f - m2)*mu1 + f = 0,
        // whose larger root is the fast phase.
        let m2 = (scv + 1.0) / 2.0;
        let disc = (m2 + 2.0 * f - 1.0).powi(2) - 4.0 * m2 * f * f;
        if disc < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "no hyperexponential with scv={scv}, f={f}"
            )));
        }
        let mu1 = ((m2 + 2.0 * f - 1.0) + disc.sqrt()) / (2.0 * m2 * f);
        let p1 = f * mu1;
        if !(0.0 < p1 && p1 <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "no positive-rate hyperexponential with scv={scv}, f={f}"
            )));
        }
        if p1 == 1.0 {
            return Ok(Self::exponential());
        }
        let mu2 = (1.0 - p1) / (1.0 - f);
        Self::new(
            vec![p1, 1.0 - p1],
            vec![vec![-mu1, 0.0], vec![0.0, -mu2]],
        )
    }

    /// Hyper-Erlang(k, ℓ): an Erlang(k) branch with probability p and an
    /// Erlang(ℓ) branch with probability 1 − p, each branch of mean one.
    pub fn hyper_erlang(k: usize, l: usize, p: f64) -> Result<Self> {
        if k == 0 || l == 0 {
            return Err(Error::InvalidParameter(
                "hyper-erlang orders must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!(
                "branch probability must lie in [0, 1], got {p}"
            )));
        }
        let n = k + l;
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..k {
            s[i][i] = -(k as f64);
            if i + 1 < k {
                s[i][i + 1] = k as f64;
            }
        }
        for i in 0..l {
            s[k + i][k + i] = -(l as f64);
            if i + 1 < l {
                s[k + i][k + i + 1] = l as f64;
            }
        }
        let mut alpha = vec![0.0; n];
        alpha[0] = p;
        alpha[k] = 1.0 - p;
        Self::new(alpha, s)
    }

    /// The extremal two-phase hyperexponential Z(ε) with p₁ = 1 − ε,
    /// p₂ = ε, μ₁ = (1 − ε)/ε and μ₂ = ε/(1 − ε). Its timer-race
    /// probability y tends to one as ε → 0 at any fixed δ.
    pub fn z_epsilon(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 0.5) {
            return Err(Error::InvalidParameter(format!(
                "z_epsilon requires eps in (0, 1/2], got {eps}"
            )));
        }
        let mu1 = (1.0 - eps) / eps;
        let mu2 = eps / (1.0 - eps);
        Self::new(
            vec![1.0 - eps, eps],
            vec![vec![-mu1, 0.0], vec![0.0, -mu2]],
        )
    }

    /// Number of phases n_s.
    pub fn order(&self) -> usize {
        self.alpha.len()
    }

    /// Initial phase distribution α (row-vector semantics).
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Sub-generator S.
    pub fn s_matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    /// Absorption rates s* = −S·**1**.
    pub fn s_star(&self) -> &DVector<f64> {
        &self.s_star
    }

    /// (−S)⁻¹ **1**, the vector of conditional mean remaining sizes.
    fn neg_s_inv_ones(&self) -> Result<DVector<f64>> {
        let ones = DVector::from_element(self.order(), 1.0);
        (-&self.s)
            .lu()
            .solve(&ones)
            .ok_or(Error::Singular("(-S) x = 1"))
    }

    /// Mean job size α(−S)⁻¹**1**.
    pub fn mean(&self) -> f64 {
        let v = self.neg_s_inv_ones().expect("validated at construction");
        self.alpha.dot(&v)
    }

    /// (mean, squared coefficient of variation).
    pub fn moments(&self) -> (f64, f64) {
        let v = self.neg_s_inv_ones().expect("validated at construction");
        let w = (-&self.s).lu().solve(&v).expect("validated at construction");
        let mean = self.alpha.dot(&v);
        let m2 = 2.0 * self.alpha.dot(&w);
        (mean, m2 / (mean * mean) - 1.0)
    }

    /// Rejects distributions whose mean strays from the unit normalization
    /// assumed by the policy solvers.
    pub fn require_unit_mean(&self) -> Result<()> {
        let mean = self.mean();
        if (mean - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "policy solvers require mean job size 1, got {mean}"
            )));
        }
        Ok(())
    }

    /// Race statistics against an exponential timer of rate δ:
    /// y = α(δI − S)⁻¹ s*, the expiry phase law α′, and the excess
    /// E[Z − X | Z > X]. The two algebraic routes to y (via s* and via
    /// 1 − δ·α(δI − S)⁻¹**1**) are cross-checked.
    pub fn timer_stats(&self, delta: f64) -> Result<TimerStats> {
        if !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "timer rate delta must be positive, got {delta}"
            )));
        }
        let n = self.order();
        let resolvent = DMatrix::identity(n, n) * delta - &self.s;
        let lu = resolvent.clone().lu();
        let w = lu
            .solve(&self.s_star)
            .ok_or(Error::Singular("(dI - S) w = s*"))?;
        let y = self.alpha.dot(&w);
        let u = lu
            .solve(&DVector::from_element(n, 1.0))
            .ok_or(Error::Singular("(dI - S) u = 1"))?;
        let y_alt = 1.0 - delta * self.alpha.dot(&u);
        if (y - y_alt).abs() > 1e-10 {
            return Err(Error::Singular("timer-race probability cross-check"));
        }
        // alpha' = alpha (dI - S)^{-1} / alpha (dI - S)^{-1} 1: a transposed solve.
        let x = resolvent
            .transpose()
            .lu()
            .solve(&self.alpha)
            .ok_or(Error::Singular("(dI - S)^T x = alpha"))?;
        let norm = self.alpha.dot(&u);
        let alpha_prime = x / norm;
        let excess = alpha_prime.dot(&self.neg_s_inv_ones()?);
        Ok(TimerStats {
            delta,
            y,
            alpha_prime,
            excess,
        })
    }

    /// Shorthand for the timer-race probability y at rate δ.
    pub fn timer_y(&self, delta: f64) -> Result<f64> {
        Ok(self.timer_stats(delta)?.y)
    }

    /// Serializes to the `{"alpha": [...], "S": [[...]]}` JSON object.
    pub fn to_json(&self) -> serde_json::Value {
        let n = self.order();
        serde_json::to_value(PhaseTypeJson {
            alpha: self.alpha.iter().copied().collect(),
            s: (0..n)
                .map(|i| (0..n).map(|j| self.s[(i, j)]).collect())
                .collect(),
        })
        .expect("plain numeric arrays serialize")
    }

    /// Parses the `{"alpha": [...], "S": [[...]]}` JSON object.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let raw: PhaseTypeJson = serde_json::from_value(value.clone())
            .map_err(|e| Error::InvalidParameter(format!("phase-type JSON: {e}")))?;
        Self::new(raw.alpha, raw.s)
    }

    /// Parses the constructor mini-language used by CLI configuration:
    /// `exponential`, `erlang:k`, `hyperexp:scv,f`, `hypererlang:k,l,p`,
    /// `zeps:eps`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, args) = match spec.split_once(':') {
            Some((n, a)) => (n.trim(), a.trim()),
            None => (spec.trim(), ""),
        };
        let nums: Vec<&str> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',').map(str::trim).collect()
        };
        let bad = |what: &str| Error::InvalidParameter(format!("{what} in ph spec '{spec}'"));
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let uint = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        match (name, nums.as_slice()) {
            ("exponential" | "exp", []) => Ok(Self::exponential()),
            ("erlang", [k]) => Self::erlang(uint(k)?),
            ("hyperexp", [scv, f]) => Self::hyperexp(float(scv)?, float(f)?),
            ("hypererlang", [k, l, p]) => Self::hyper_erlang(uint(k)?, uint(l)?, float(p)?),
            ("zeps", [eps]) => Self::z_epsilon(float(eps)?),
            _ => Err(bad("unknown constructor or wrong arity")),
        }
    }
}
