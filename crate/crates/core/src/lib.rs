//! Stochastic-gradient Langevin sampling with Robbins-Monro and
//! random-reshuffling minibatches.
//!
//! The crate covers finite-sum models ([`model`]), batch schedules
//! ([`batching`]), the update rules and ensemble runners ([`samplers`]),
//! closed forms and convergence bounds ([`analytics`]), ensemble statistics
//! ([`diagnostics`]) and the declarative experiment runner ([`experiment`]).

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod batching;
pub mod diagnostics;
pub mod model;
pub mod experiment;
pub mod samplers;
pub mod seeding;
