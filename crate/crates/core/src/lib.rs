//! Exact large-scale analysis and finite-N simulation of load balancing
//! policies with a bounded maximum queue length.
//!
//! Four policies are covered, all fed by Poisson arrivals of rate λN onto N
//! servers with phase-type (PH) job sizes of mean one:
//!
//! * **push** — the dispatcher probes a uniform server at total rate δN,
//!   keeps per-server queue-length estimates and assigns arrivals greedily
//!   to a minimum-estimate server ([`policy::push`]).
//! * **pull** — servers update the dispatcher themselves: with probability
//!   δ₁ at service completions and at rate δ₀ while idle ([`policy::pull`]).
//! * **water filling** — batches of M jobs are spread over d sampled servers
//!   by repeatedly filling the currently shortest queue
//!   ([`policy::waterfill`]).
//! * **resource pooling** — a fraction p of the total capacity is pooled in
//!   a central server that removes jobs from maximal queues
//!   ([`policy::pooling`]).
//!
//! Each policy module computes the stationary law of the *queue at the
//! cavity*: a single representative queue whose environment (assignment rate
//! ν, batch mix c, or boost rate ω, together with a maximum queue level m)
//! encodes the N → ∞ limit. The [`sim`] module provides a discrete-event
//! simulator for the finite-N systems to validate the cavity predictions.
//!
//! All analytic computations are deterministic; simulation is reproducible
//! from a 64-bit seed.

pub mod ctmc;
pub mod error;
pub mod phase_type;
pub mod policy;
pub mod sim;

pub use error::{Error, Result};
pub use phase_type::{PhaseType, TimerStats};
