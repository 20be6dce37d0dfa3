//! Cavity-process solvers for the four load balancing policies.
//!
//! Each module follows the same outline: a closed form (or numerical
//! search) for the maximum queue level m, a generator for the cavity chain
//! given the auxiliary unknown (assignment rate ν, batch mix c, or boost
//! rate ω), a fixed-point solve pinning the empty-queue probability, and
//! summary metrics via Little's law.

pub mod pooling;
pub mod pull;
pub mod push;
pub mod waterfill;
