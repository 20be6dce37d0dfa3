//! Event-driven core of the finite-N simulator.
//!
//! The calendar holds only service-completion events: the constant-rate
//! processes (arrivals, probes, tokens, idle-update candidates) each keep a
//! single "next firing" time, and per-server exponential races are summed
//! into one completion per job when service starts. Idle updates for the
//! pull policy are thinned from a rate-δ₀N candidate stream (pick a uniform
//! server, ignore if busy), which is exact by Poisson superposition.
//!
//! Server selection (minimum estimate for push/pull, maximum queue length
//! for pooling) uses per-value buckets with position maps: O(1) moves and
//! exact uniform tie-breaking.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::Result;
use crate::phase_type::PhaseType;
use crate::sim::config::{PolicyConfig, SimConfig};
use crate::sim::report::{RunStats, TraceRow};

type SimRng = ChaCha8Rng;

#[inline]
fn exp_after(rng: &mut SimRng, rate: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    e / rate
}

/// Phase-by-phase service sampler: walks the phase chain, accumulating one
/// exponential race per visited phase.
struct PhSampler {
    init_cdf: Vec<f64>,
    exit_rate: Vec<f64>,
    /// Per phase: (cumulative probability, next phase); falling off the end
    /// means absorption.
    trans: Vec<Vec<(f64, usize)>>,
}

impl PhSampler {
    fn new(ph: &PhaseType) -> Self {
        let n = ph.order();
        let mut init_cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for i in 0..n {
            acc += ph.alpha()[i];
            init_cdf.push(acc);
        }
        init_cdf[n - 1] = 1.0;
        let mut exit_rate = Vec::with_capacity(n);
        let mut trans = Vec::with_capacity(n);
        for j in 0..n {
            let exit = -ph.s_matrix()[(j, j)];
            exit_rate.push(exit);
            let mut row = Vec::new();
            let mut c = 0.0;
            for j2 in 0..n {
                if j2 != j {
                    let r = ph.s_matrix()[(j, j2)];
                    if r > 0.0 {
                        c += r / exit;
                        row.push((c, j2));
                    }
                }
            }
            trans.push(row);
        }
        Self { init_cdf, exit_rate, trans }
    }

    #[inline]
    fn sample_service(&self, rng: &mut SimRng) -> f64 {
        let mut j = {
            let u: f64 = rng.gen();
            let mut k = 0;
            while u > self.init_cdf[k] {
                k += 1;
            }
            k
        };
        let mut total = 0.0;
        loop {
            total += exp_after(rng, self.exit_rate[j]);
            if self.trans[j].is_empty() {
                return total;
            }
            let u: f64 = rng.gen();
            let mut next = None;
            for &(c, j2) in &self.trans[j] {
                if u < c {
                    next = Some(j2);
                    break;
                }
            }
            match next {
                Some(j2) => j = j2,
                None => return total,
            }
        }
    }
}

/// Pending service completion; invalidated by bumping the server's
/// generation counter.
struct Completion {
    time: f64,
    server: u32,
    generation: u32,
}

impl PartialEq for Completion {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.server == other.server
    }
}
impl Eq for Completion {}
impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Completion {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap: reverse on time, server id as a deterministic tie-break.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.server.cmp(&self.server))
    }
}

/// Servers grouped by an integer key (estimate or queue length) with O(1)
/// moves and uniform sampling of the minimal/maximal group.
struct BucketIndex {
    value: Vec<u32>,
    buckets: Vec<Vec<u32>>,
    pos: Vec<u32>,
    min: usize,
    max: usize,
}

impl BucketIndex {
    fn new(n: usize) -> Self {
        Self {
            value: vec![0; n],
            buckets: vec![(0..n as u32).collect()],
            pos: (0..n as u32).collect(),
            min: 0,
            max: 0,
        }
    }

    #[inline]
    fn get(&self, server: u32) -> u32 {
        self.value[server as usize]
    }

    fn set(&mut self, server: u32, new: u32) {
        let old = self.value[server as usize];
        if old == new {
            return;
        }
        // Swap-remove from the old bucket.
        let p = self.pos[server as usize] as usize;
        let bucket = &mut self.buckets[old as usize];
        let last = *bucket.last().unwrap();
        bucket[p] = last;
        self.pos[last as usize] = p as u32;
        bucket.pop();
        // Insert into the new bucket.
        if new as usize >= self.buckets.len() {
            self.buckets.resize_with(new as usize + 1, Vec::new);
        }
        let target = &mut self.buckets[new as usize];
        self.pos[server as usize] = target.len() as u32;
        target.push(server);
        self.value[server as usize] = new;
        let v = new as usize;
        if v < self.min {
            self.min = v;
        }
        if v > self.max {
            self.max = v;
        }
    }

    #[inline]
    fn sample_min(&mut self, rng: &mut SimRng) -> u32 {
        while self.buckets[self.min].is_empty() {
            self.min += 1;
        }
        let b = &self.buckets[self.min];
        b[rng.gen_range(0..b.len())]
    }

    #[inline]
    fn sample_max(&mut self, rng: &mut SimRng) -> u32 {
        while self.buckets[self.max].is_empty() {
            self.max -= 1;
        }
        let b = &self.buckets[self.max];
        b[rng.gen_range(0..b.len())]
    }
}

#[derive(Clone, Copy)]
struct JobStamp {
    arrival: f64,
    tracked: bool,
}

/// Mutable world shared by the four policy loops.
struct World<'a> {
    sampler: &'a PhSampler,
    /// Service times are stretched by this factor (1/(1−p) for pooling,
    /// where servers run at rate 1 − p; 1 otherwise).
    service_stretch: f64,
    qlen: Vec<u32>,
    generation: Vec<u32>,
    jobs: Vec<VecDeque<JobStamp>>,
    heap: BinaryHeap<Completion>,
    stats: RunStats,
    trace: Option<Vec<TraceRow>>,
    clock: f64,
    idle_count: usize,
    in_system: u64,
    arrived: u64,
    total_arrivals: u64,
    warmup: u64,
}

impl<'a> World<'a> {
    fn new(n: usize, sampler: &'a PhSampler, cfg: &SimConfig) -> Self {
        let service_stretch = match cfg.policy {
            PolicyConfig::Pooling { p, .. } => 1.0 / (1.0 - p),
            _ => 1.0,
        };
        Self {
            sampler,
            service_stretch,
            qlen: vec![0; n],
            generation: vec![0; n],
            jobs: (0..n).map(|_| VecDeque::with_capacity(4)).collect(),
            heap: BinaryHeap::with_capacity(n + 4),
            stats: RunStats::default(),
            trace: cfg.collect_trace.then(Vec::new),
            clock: 0.0,
            idle_count: n,
            in_system: 0,
            arrived: 0,
            total_arrivals: cfg.arrivals(),
            warmup: cfg.warmup_jobs(),
        }
    }

    /// Advances the clock, accumulating the idle-count integral.
    #[inline]
    fn advance(&mut self, to: f64) {
        debug_assert!(to >= self.clock);
        self.stats.idle_time_integral += self.idle_count as f64 * (to - self.clock);
        self.clock = to;
    }

    /// Adds one job to server `i` (timestamped `at`), starting service if
    /// the server was idle. Returns whether all arrivals are exhausted.
    #[inline]
    fn admit(&mut self, rng: &mut SimRng, i: u32, at: f64) {
        let tracked = self.arrived >= self.warmup;
        self.arrived += 1;
        self.in_system += 1;
        self.stats.arrived += 1;
        let s = i as usize;
        self.jobs[s].push_back(JobStamp { arrival: at, tracked });
        self.qlen[s] += 1;
        if self.qlen[s] == 1 {
            self.idle_count -= 1;
            self.start_service(rng, i);
        }
    }

    #[inline]
    fn start_service(&mut self, rng: &mut SimRng, i: u32) {
        let service = self.sampler.sample_service(rng) * self.service_stretch;
        self.heap.push(Completion {
            time: self.clock + service,
            server: i,
            generation: self.generation[i as usize],
        });
    }

    /// Removes the departing job's stamp and records its response time.
    #[inline]
    fn record_departure(&mut self, stamp: JobStamp, server: u32) {
        self.in_system -= 1;
        self.stats.completed += 1;
        if stamp.tracked {
            self.stats.response_sum += self.clock - stamp.arrival;
            self.stats.response_count += 1;
            if let Some(trace) = &mut self.trace {
                trace.push(TraceRow { arrival: stamp.arrival, departure: self.clock, server });
            }
        }
    }

    /// Completes the in-service job of server `i`: pops its stamp, starts
    /// the next job if any. Returns the new queue length.
    #[inline]
    fn complete_head(&mut self, rng: &mut SimRng, i: u32) -> u32 {
        let s = i as usize;
        let stamp = self.jobs[s].pop_front().expect("busy server has a job");
        self.qlen[s] -= 1;
        self.record_departure(stamp, i);
        if self.qlen[s] > 0 {
            self.start_service(rng, i);
        } else {
            self.idle_count += 1;
        }
        self.qlen[s]
    }

    fn arrivals_done(&self) -> bool {
        self.arrived >= self.total_arrivals
    }

    fn finish(mut self) -> RunStats {
        self.stats.sim_time = self.clock;
        self.stats.trace = self.trace;
        debug_assert_eq!(self.stats.arrived, self.stats.completed + self.in_system);
        self.stats
    }
}

pub fn run_once(config: &SimConfig, seed: u64) -> Result<RunStats> {
    let ph = config.phase_type()?;
    let sampler = PhSampler::new(&ph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match config.policy {
        PolicyConfig::Push { lambda, delta } => {
            Ok(run_push(config, &sampler, &mut rng, lambda, delta))
        }
        PolicyConfig::Pull { lambda, delta0, delta1 } => {
            Ok(run_pull(config, &sampler, &mut rng, lambda, delta0, delta1))
        }
        PolicyConfig::Waterfill { lambda, .. } => Ok(run_waterfill(config, &sampler, &mut rng, lambda)),
        PolicyConfig::Pooling { lambda, p } => Ok(run_pooling(config, &sampler, &mut rng, lambda, p)),
    }
}

fn run_push(cfg: &SimConfig, sampler: &PhSampler, rng: &mut SimRng, lambda: f64, delta: f64) -> RunStats {
    let n = cfg.n_servers;
    let mut w = World::new(n, sampler, cfg);
    let mut estimates = BucketIndex::new(n);
    let arrival_rate = lambda * n as f64;
    let probe_rate = delta * n as f64;
    let mut next_arrival = if arrival_rate > 0.0 && w.total_arrivals > 0 {
        exp_after(rng, arrival_rate)
    } else {
        f64::INFINITY
    };
    let mut next_probe = exp_after(rng, probe_rate);
    loop {
        if next_arrival.is_infinite() && w.in_system == 0 {
            break;
        }
        let head = w.heap.peek().map_or(f64::INFINITY, |c| c.time);
        if next_arrival <= next_probe && next_arrival <= head {
            w.advance(next_arrival);
            let i = estimates.sample_min(rng);
            debug_assert!(estimates.get(i) >= w.qlen[i as usize]);
            w.admit(rng, i, next_arrival);
            estimates.set(i, estimates.get(i) + 1);
            next_arrival = if w.arrivals_done() {
                f64::INFINITY
            } else {
                w.clock + exp_after(rng, arrival_rate)
            };
        } else if next_probe <= head {
            w.advance(next_probe);
            let i = rng.gen_range(0..n) as u32;
            debug_assert!(estimates.get(i) >= w.qlen[i as usize]);
            estimates.set(i, w.qlen[i as usize]);
            next_probe = w.clock + exp_after(rng, probe_rate);
        } else {
            let c = w.heap.pop().expect("peeked");
            w.advance(c.time);
            if c.generation == w.generation[c.server as usize] {
                w.complete_head(rng, c.server);
            }
        }
    }
    w.finish()
}

fn run_pull(
    cfg: &SimConfig,
    sampler: &PhSampler,
    rng: &mut SimRng,
    lambda: f64,
    delta0: f64,
    delta1: f64,
) -> RunStats {
    let n = cfg.n_servers;
    let mut w = World::new(n, sampler, cfg);
    let mut estimates = BucketIndex::new(n);
    let arrival_rate = lambda * n as f64;
    // Idle updates arrive as rate-δ₀N candidates thinned to idle servers.
    let candidate_rate = delta0 * n as f64;
    let mut next_arrival = if arrival_rate > 0.0 && w.total_arrivals > 0 {
        exp_after(rng, arrival_rate)
    } else {
        f64::INFINITY
    };
    let mut next_candidate = if candidate_rate > 0.0 {
        exp_after(rng, candidate_rate)
    } else {
        f64::INFINITY
    };
    loop {
        if next_arrival.is_infinite() && w.in_system == 0 {
            break;
        }
        let head = w.heap.peek().map_or(f64::INFINITY, |c| c.time);
        if next_arrival <= next_candidate && next_arrival <= head {
            w.advance(next_arrival);
            let i = estimates.sample_min(rng);
            debug_assert!(estimates.get(i) >= w.qlen[i as usize]);
            w.admit(rng, i, next_arrival);
            estimates.set(i, estimates.get(i) + 1);
            next_arrival = if w.arrivals_done() {
                f64::INFINITY
            } else {
                w.clock + exp_after(rng, arrival_rate)
            };
        } else if next_candidate <= head {
            w.advance(next_candidate);
            let i = rng.gen_range(0..n) as u32;
            if w.qlen[i as usize] == 0 {
                estimates.set(i, 0);
            }
            next_candidate = w.clock + exp_after(rng, candidate_rate);
        } else {
            let c = w.heap.pop().expect("peeked");
            w.advance(c.time);
            if c.generation == w.generation[c.server as usize] {
                let qlen = w.complete_head(rng, c.server);
                if delta1 > 0.0 && rng.gen::<f64>() < delta1 {
                    estimates.set(c.server, qlen);
                }
            }
        }
    }
    w.finish()
}

fn run_waterfill(cfg: &SimConfig, sampler: &PhSampler, rng: &mut SimRng, lambda: f64) -> RunStats {
    let n = cfg.n_servers;
    let batch = cfg.batch_size();
    let probes = cfg.probe_count();
    let mut w = World::new(n, sampler, cfg);
    let batch_rate = lambda * n as f64 / batch as f64;
    let mut next_batch = if batch_rate > 0.0 && w.total_arrivals > 0 {
        exp_after(rng, batch_rate)
    } else {
        f64::INFINITY
    };
    // Scratch for the sampled servers, sorted by queue length.
    let mut sampled: Vec<(u32, u32)> = Vec::with_capacity(probes);
    loop {
        if next_batch.is_infinite() && w.in_system == 0 {
            break;
        }
        let head = w.heap.peek().map_or(f64::INFINITY, |c| c.time);
        if next_batch <= head {
            w.advance(next_batch);
            sampled.clear();
            for idx in rand::seq::index::sample(rng, n, probes) {
                sampled.push((w.qlen[idx], idx as u32));
            }
            sampled.sort_unstable();
            water_fill(&mut w, rng, &mut sampled, batch as u64, next_batch);
            next_batch = if w.arrivals_done() {
                f64::INFINITY
            } else {
                w.clock + exp_after(rng, batch_rate)
            };
        } else {
            let c = w.heap.pop().expect("peeked");
            w.advance(c.time);
            if c.generation == w.generation[c.server as usize] {
                w.complete_head(rng, c.server);
            }
        }
    }
    w.finish()
}

/// Spreads `units` jobs over the sampled servers (sorted by length) by
/// repeatedly filling the currently shortest queue; ties in the final
/// partial layer are broken by a uniform subset.
fn water_fill(
    w: &mut World<'_>,
    rng: &mut SimRng,
    sampled: &mut [(u32, u32)],
    units: u64,
    at: f64,
) {
    let d = sampled.len();
    let mut waterline = sampled[0].0 as u64;
    let mut group = 1usize;
    let mut remaining = units;
    loop {
        let next = if group < d { sampled[group].0 as u64 } else { u64::MAX };
        if next == waterline {
            group += 1;
            continue;
        }
        let capacity = if next == u64::MAX {
            u64::MAX
        } else {
            (next - waterline) * group as u64
        };
        if remaining < capacity {
            let layers = remaining / group as u64;
            waterline += layers;
            remaining -= layers * group as u64;
            break;
        }
        remaining -= capacity;
        waterline = next;
        group += 1;
    }
    // The first `group` servers rise to the waterline; `remaining` of them
    // (uniformly chosen) take one more job.
    for k in 0..remaining as usize {
        let swap = rng.gen_range(k..group);
        sampled.swap(k, swap);
    }
    for (rank, &(len, server)) in sampled.iter().enumerate().take(group) {
        let target = waterline + u64::from(rank < remaining as usize);
        for _ in len as u64..target {
            w.admit(rng, server, at);
        }
    }
}

fn run_pooling(cfg: &SimConfig, sampler: &PhSampler, rng: &mut SimRng, lambda: f64, p: f64) -> RunStats {
    let n = cfg.n_servers;
    let mut w = World::new(n, sampler, cfg);
    let mut lengths = BucketIndex::new(n);
    let arrival_rate = lambda * n as f64;
    let token_rate = p * n as f64;
    let mut next_arrival = if arrival_rate > 0.0 && w.total_arrivals > 0 {
        exp_after(rng, arrival_rate)
    } else {
        f64::INFINITY
    };
    let mut next_token = if token_rate > 0.0 {
        exp_after(rng, token_rate)
    } else {
        f64::INFINITY
    };
    loop {
        if next_arrival.is_infinite() && w.in_system == 0 {
            break;
        }
        let head = w.heap.peek().map_or(f64::INFINITY, |c| c.time);
        if next_arrival <= next_token && next_arrival <= head {
            w.advance(next_arrival);
            let i = rng.gen_range(0..n) as u32;
            w.admit(rng, i, next_arrival);
            lengths.set(i, w.qlen[i as usize]);
            next_arrival = if w.arrivals_done() {
                f64::INFINITY
            } else {
                w.clock + exp_after(rng, arrival_rate)
            };
        } else if next_token <= head {
            w.advance(next_token);
            if w.in_system > 0 {
                // Serve one job from a maximal queue, instantaneously:
                // a pending job if there is one, otherwise the job in
                // service (cancelling its completion).
                let i = lengths.sample_max(rng);
                let s = i as usize;
                debug_assert!(w.qlen[s] > 0);
                let stamp = if w.qlen[s] >= 2 {
                    w.jobs[s].pop_back().expect("pending job")
                } else {
                    w.generation[s] += 1;
                    w.jobs[s].pop_front().expect("in-service job")
                };
                w.qlen[s] -= 1;
                if w.qlen[s] == 0 {
                    w.idle_count += 1;
                }
                w.record_departure(stamp, i);
                lengths.set(i, w.qlen[s]);
            }
            next_token = w.clock + exp_after(rng, token_rate);
        } else {
            let c = w.heap.pop().expect("peeked");
            w.advance(c.time);
            if c.generation == w.generation[c.server as usize] {
                let qlen = w.complete_head(rng, c.server);
                lengths.set(c.server, qlen);
            }
        }
    }
    w.finish()
}
