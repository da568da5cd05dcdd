//! Discrete-time signal temporal logic (STL) robustness monitoring plus a
//! desk-scale pipeline for training and evaluating specification-conditioned
//! sequence policies on toy kinematic environments.
//!
//! The crate is organised around the data flow of an offline experiment:
//!
//! * [`stl`] — formula grammar, parser, and quantitative/Boolean semantics,
//!   including prefix/suffix robustness over truncated traces.
//! * [`data`] — trajectory and dataset model, JSONL I/O, return-to-go,
//!   cost relabeling, and robustness annotation.
//! * [`envs`] — deterministic point-mass environments (run / circle / reach)
//!   with scripted behavior policies that generate mixed-quality datasets.
//! * [`diff`] — a minimal reverse-mode autodiff engine over dense `f64`
//!   arrays with the layers and optimizer the policy needs.
//! * [`policy`] — the causal-transformer Gaussian policy conditioned on
//!   suffix/prefix robustness and return-to-go, plus an MLP baseline.
//! * [`train`] — token-batch construction and the optimization loop.
//! * [`rollout`] — closed-loop evaluation, target-suffix schedules, metrics,
//!   and the target/achieved alignment sweep.

pub mod data;
pub mod diff;
pub mod envs;
pub mod policy;
pub mod rollout;
pub mod stl;
pub mod train;
