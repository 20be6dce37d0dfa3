//! Finite-CTMC machinery shared by all policy solvers.
//!
//! Generators are dense labeled rate matrices; stationary distributions are
//! computed by GTH state elimination (Grassmann–Taksar–Heyman), which never
//! subtracts like-signed quantities and therefore stays accurate even for
//! chains with rate ratios of 10⁶ and more (e.g. the extremal `z_epsilon`
//! job sizes). Chains here have at most a few thousand states, so dense
//! O(n³) elimination is the right tool.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// State descriptor: actual queue length, dispatcher-side estimate, and
/// 1-based service phase (0 when the queue is empty). Chains without an
/// estimate component set `estimate == queue`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateLabel {
    pub queue: usize,
    pub estimate: usize,
    pub phase: usize,
}

impl StateLabel {
    pub fn empty(estimate: usize) -> Self {
        Self { queue: 0, estimate, phase: 0 }
    }

    pub fn busy(queue: usize, estimate: usize, phase: usize) -> Self {
        Self { queue, estimate, phase }
    }
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.phase == 0 {
            write!(f, "(q={}, e={})", self.queue, self.estimate)
        } else {
            write!(f, "(q={}, e={}, j={})", self.queue, self.estimate, self.phase)
        }
    }
}

/// A conservative rate matrix over labeled states.
#[derive(Debug, Clone)]
pub struct Generator {
    q: DMatrix<f64>,
    labels: Vec<StateLabel>,
}

/// Incrementally assembles a generator from off-diagonal rates; diagonals
/// are set to the negated row sums on `finish`, so conservation holds by
/// construction and self-loops are dropped.
pub struct GeneratorBuilder {
    q: DMatrix<f64>,
    labels: Vec<StateLabel>,
}

impl GeneratorBuilder {
    pub fn new(labels: Vec<StateLabel>) -> Self {
        let n = labels.len();
        Self { q: DMatrix::zeros(n, n), labels }
    }

    /// Adds `rate` to the transition `from -> to`. Self-transitions and zero
    /// rates are ignored.
    pub fn add(&mut self, from: usize, to: usize, rate: f64) {
        debug_assert!(rate >= 0.0, "negative rate {rate}");
        if from != to && rate != 0.0 {
            self.q[(from, to)] += rate;
        }
    }

    pub fn finish(mut self) -> Generator {
        let n = self.labels.len();
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                if j != i {
                    row_sum += self.q[(i, j)];
                }
            }
            self.q[(i, i)] = -row_sum;
        }
        Generator { q: self.q, labels: self.labels }
    }
}

impl Generator {
    /// Wraps an explicit rate matrix, validating conservation and sign
    /// structure.
    pub fn new(q: DMatrix<f64>, labels: Vec<StateLabel>) -> Result<Self> {
        let n = labels.len();
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::InvalidParameter(
                "generator shape must match label count".into(),
            ));
        }
        for i in 0..n {
            let mut row_sum = 0.0;
            let scale = q[(i, i)].abs().max(1.0);
            for j in 0..n {
                if i != j && q[(i, j)] < 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "negative off-diagonal rate at ({i},{j})"
                    )));
                }
                row_sum += q[(i, j)];
            }
            if row_sum.abs() > 1e-10 * scale {
                return Err(Error::InvalidParameter(format!(
                    "row {i} sums to {row_sum}, not 0"
                )));
            }
        }
        Ok(Self { q, labels })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn labels(&self) -> &[StateLabel] {
        &self.labels
    }

    /// Dense-matrix JSON dump for debugging.
    pub fn to_json(&self) -> serde_json::Value {
        let n = self.n();
        serde_json::json!({
            "labels": self.labels.iter().map(|l| [l.queue, l.estimate, l.phase]).collect::<Vec<_>>(),
            "Q": (0..n).map(|i| (0..n).map(|j| self.q[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }
}

/// Stationary distribution aligned with the generator's labels.
#[derive(Debug, Clone)]
pub struct StationaryDist {
    pi: Vec<f64>,
    labels: Vec<StateLabel>,
}

impl StationaryDist {
    pub fn probabilities(&self) -> &[f64] {
        &self.pi
    }

    pub fn labels(&self) -> &[StateLabel] {
        &self.labels
    }

    /// Sums the stationary mass over equivalence classes of a label
    /// projection; the result vector is indexed by the projected key and
    /// sums to one.
    pub fn project<F: Fn(&StateLabel) -> usize>(&self, key: F) -> Vec<f64> {
        let mut out = Vec::new();
        for (p, label) in self.pi.iter().zip(&self.labels) {
            let k = key(label);
            if k >= out.len() {
                out.resize(k + 1, 0.0);
            }
            out[k] += p;
        }
        out
    }

    /// Marginal of the actual queue length.
    pub fn queue_marginal(&self) -> Vec<f64> {
        self.project(|l| l.queue)
    }

    /// ‖πQ‖∞ residual against a generator (diagnostic).
    pub fn residual(&self, gen: &Generator) -> f64 {
        let n = gen.n();
        let mut worst = 0.0f64;
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.pi[i] * gen.matrix()[(i, j)];
            }
            worst = worst.max(acc.abs());
        }
        worst
    }
}

/// Stationary distribution by GTH state elimination.
///
/// States are eliminated from the highest index down; each step only adds
/// and divides nonnegative quantities. A zero elimination pivot means the
/// current state cannot reach lower-indexed states, i.e. the chain has more
/// than one recurrent class, which is reported with the offending label.
pub fn stationary(gen: &Generator) -> Result<StationaryDist> {
    let n = gen.n();
    if n == 0 {
        return Err(Error::InvalidParameter("empty generator".into()));
    }
    if n == 1 {
        return Ok(StationaryDist { pi: vec![1.0], labels: gen.labels().to_vec() });
    }
    let mut a = gen.matrix().clone();
    for k in (1..n).rev() {
        let pivot: f64 = (0..k).map(|j| a[(k, j)]).sum();
        if !(pivot > 0.0) {
            return Err(Error::ReducibleChain {
                index: k,
                label: gen.labels()[k].to_string(),
            });
        }
        // Censor state k: renormalize its exit column, then fold its
        // downward transitions into the remaining states.
        for i in 0..k {
            a[(i, k)] /= pivot;
        }
        for i in 0..k {
            let w = a[(i, k)];
            if w != 0.0 {
                for j in 0..k {
                    if j != i {
                        let r = a[(k, j)];
                        if r != 0.0 {
                            a[(i, j)] += w * r;
                        }
                    }
                }
            }
        }
    }
    let mut pi = vec![0.0f64; n];
    pi[0] = 1.0;
    for k in 1..n {
        let mut acc = 0.0;
        for i in 0..k {
            acc += pi[i] * a[(i, k)];
        }
        pi[k] = acc;
    }
    let total: f64 = pi.iter().sum();
    for p in &mut pi {
        *p /= total;
    }
    Ok(StationaryDist { pi, labels: gen.labels().to_vec() })
}

/// Bisection for a monotone function: finds x in [lo, hi] with
/// f(x) = target, assuming f is monotone (either direction). Stops when
/// |f(x) − target| <= tol or the bracket width shrinks below
/// 1e-12·max(1, |hi|).
pub fn bisect_monotone<F: FnMut(f64) -> f64>(
    mut f: F,
    target: f64,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> Result<f64> {
    let f_lo = f(lo);
    let f_hi = f(hi);
    let increasing = f_hi >= f_lo;
    let (mut below, mut above) = if increasing { (f_lo, f_hi) } else { (f_hi, f_lo) };
    if target < below - tol || target > above + tol {
        return Err(Error::TargetOutsideBracket { target, f_lo, f_hi });
    }
    // Endpoints already good enough?
    if (f_lo - target).abs() <= tol {
        return Ok(lo);
    }
    if (f_hi - target).abs() <= tol {
        return Ok(hi);
    }
    let width_floor = 1e-12 * hi.abs().max(1.0);
    let mut mid = 0.5 * (lo + hi);
    while hi - lo > width_floor {
        mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if (fm - target).abs() <= tol {
            return Ok(mid);
        }
        let go_right = if increasing { fm < target } else { fm > target };
        if go_right {
            lo = mid;
            below = if increasing { fm } else { below };
        } else {
            hi = mid;
            above = if increasing { above } else { fm };
        }
        let _ = (below, above);
    }
    Ok(mid)
}

/// Finds the rate x >= 0 with f(x) = target for a monotonically decreasing
/// f (the shape of every "probability of an empty queue as a function of an
/// assignment rate" map). The upper bracket starts at 1 and doubles until f
/// crosses the target, capped at 1e12.
pub fn solve_decreasing_rate<F: FnMut(f64) -> f64>(
    mut f: F,
    target: f64,
    what: &'static str,
    tol: f64,
) -> Result<f64> {
    let f0 = f(0.0);
    if (f0 - target).abs() <= tol {
        return Ok(0.0);
    }
    if f0 < target {
        return Err(Error::FixedPointBracket { what, lo: 0.0, hi: 0.0 });
    }
    let mut hi = 1.0;
    while f(hi) > target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::FixedPointBracket { what, lo: 0.0, hi });
        }
    }
    bisect_monotone(f, target, 0.0, hi, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plain_labels(n: usize) -> Vec<StateLabel> {
        (0..n).map(|i| StateLabel::busy(i, i, 0)).collect()
    }

    /// Independent oracle: dense least-squares solve of pi Q = 0, pi 1 = 1.
    fn null_space_stationary(gen: &Generator) -> Vec<f64> {
        let n = gen.n();
        let mut a = DMatrix::zeros(n + 1, n);
        for i in 0..n {
            for j in 0..n {
                a[(j, i)] = gen.matrix()[(i, j)];
            }
        }
        for i in 0..n {
            a[(n, i)] = 1.0;
        }
        let mut b = DVector::zeros(n + 1);
        b[n] = 1.0;
        let sol = (a.transpose() * &a)
            .lu()
            .solve(&(a.transpose() * b))
            .expect("normal equations solvable");
        sol.iter().copied().collect()
    }

    #[test]
    fn two_state_chain() {
        let (a, b) = (0.7, 0.2);
        let q = DMatrix::from_row_slice(2, 2, &[-a, a, b, -b]);
        let gen = Generator::new(q, plain_labels(2)).unwrap();
        let pi = stationary(&gen).unwrap();
        assert_abs_diff_eq!(pi.probabilities()[0], b / (a + b), epsilon = 1e-14);
        assert_abs_diff_eq!(pi.probabilities()[1], a / (a + b), epsilon = 1e-14);
    }

    #[test]
    fn birth_death_detailed_balance() {
        // lambda = 0.5, mu = 1 on {0..3}: pi proportional to (1, .5, .25, .125).
        let mut builder = GeneratorBuilder::new(plain_labels(4));
        for i in 0..3 {
            builder.add(i, i + 1, 0.5);
            builder.add(i + 1, i, 1.0);
        }
        let gen = builder.finish();
        let pi = stationary(&gen).unwrap();
        let z = 1.0 + 0.5 + 0.25 + 0.125;
        for (i, expect) in [1.0, 0.5, 0.25, 0.125].iter().enumerate() {
            assert_abs_diff_eq!(pi.probabilities()[i], expect / z, epsilon = 1e-13);
        }
        assert!(pi.residual(&gen) < 1e-12);
    }

    #[test]
    fn gth_matches_null_space_on_random_generators() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &n in &[3usize, 10, 40, 120, 200] {
            // Random dense-ish irreducible generator: a circulant backbone
            // guarantees irreducibility, sprinkled random rates elsewhere.
            let mut builder = GeneratorBuilder::new(plain_labels(n));
            for i in 0..n {
                builder.add(i, (i + 1) % n, rng.gen_range(0.05..1.0));
                for _ in 0..3 {
                    let j = rng.gen_range(0..n);
                    builder.add(i, j, rng.gen_range(0.0..2.0));
                }
            }
            let gen = builder.finish();
            let pi = stationary(&gen).unwrap();
            let oracle = null_space_stationary(&gen);
            for i in 0..n {
                assert!(
                    (pi.probabilities()[i] - oracle[i]).abs() < 1e-9,
                    "n={n} state {i}: {} vs {}",
                    pi.probabilities()[i],
                    oracle[i]
                );
            }
            assert!(pi.residual(&gen) < 1e-9);
        }
    }

    #[test]
    fn transient_states_get_zero_mass() {
        // State 2 feeds the recurrent pair {0,1} but nothing returns to it.
        let mut builder = GeneratorBuilder::new(plain_labels(3));
        builder.add(0, 1, 1.0);
        builder.add(1, 0, 1.0);
        builder.add(2, 0, 1.0);
        let gen = builder.finish();
        let pi = stationary(&gen).unwrap();
        assert_abs_diff_eq!(pi.probabilities()[2], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pi.probabilities()[0], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn reducible_chain_reports_state() {
        // Two disconnected recurrent classes {0,1} and {2,3}.
        let mut builder = GeneratorBuilder::new(plain_labels(4));
        builder.add(0, 1, 1.0);
        builder.add(1, 0, 1.0);
        builder.add(2, 3, 1.0);
        builder.add(3, 2, 1.0);
        let gen = builder.finish();
        match stationary(&gen) {
            Err(Error::ReducibleChain { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected ReducibleChain, got {other:?}"),
        }
    }

    #[test]
    fn projection_sums_classes() {
        let mut builder = GeneratorBuilder::new(vec![
            StateLabel::empty(0),
            StateLabel::busy(1, 1, 1),
            StateLabel::busy(1, 1, 2),
        ]);
        builder.add(0, 1, 0.3);
        builder.add(0, 2, 0.7);
        builder.add(1, 0, 1.0);
        builder.add(2, 0, 1.0);
        let gen = builder.finish();
        let pi = stationary(&gen).unwrap();
        let all = pi.project(|_| 0);
        assert_eq!(all.len(), 1);
        assert_abs_diff_eq!(all[0], 1.0, epsilon = 1e-14);
        let qm = pi.queue_marginal();
        assert_eq!(qm.len(), 2);
        assert_abs_diff_eq!(qm.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn bisect_basics() {
        let x = bisect_monotone(|x| x, 0.3, 0.0, 1.0, 1e-12).unwrap();
        assert_abs_diff_eq!(x, 0.3, epsilon = 1e-10);
        let x = bisect_monotone(|x| (-x).exp(), 0.5, 0.0, 10.0, 1e-13).unwrap();
        assert_abs_diff_eq!(x, 2.0f64.ln(), epsilon = 1e-9);
        assert!(bisect_monotone(|x| x, 2.0, 0.0, 1.0, 1e-12).is_err());
    }

    #[test]
    fn solve_decreasing_rate_brackets() {
        let x = solve_decreasing_rate(|x| 1.0 / (1.0 + x), 0.25, "test rate", 1e-12).unwrap();
        assert_abs_diff_eq!(x, 3.0, epsilon = 1e-9);
        // Target above f(0): no solution.
        assert!(solve_decreasing_rate(|x| 1.0 / (1.0 + x), 1.5, "test rate", 1e-12).is_err());
    }
}
