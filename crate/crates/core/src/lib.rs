//! Uncertainty-gated collaborative perception, end to end and on one CPU.
//!
//! A fleet of agents observes a shared scene through noise- and
//! corruption-prone sensor channels. Each observation is encoded as a
//! Gaussian in feature space (a mean vector plus a per-coordinate
//! log-variance); a learned policy decides, from compact uncertainty
//! tokens alone, which collaborator channels are worth requesting over a
//! metered link; accepted features are fused by inverse-variance
//! weighting and decoded into a hazard prediction. Everything — the
//! reverse-mode tape, the synthetic world, the wire protocol, the
//! training loop — lives in this crate so that a full experiment is
//! reproducible bit for bit from a config and a seed.
//!
//! Module map:
//!
//! * [`tensor`] / [`tape`] — dense `f64` tensors and a define-by-run
//!   reverse-mode autodiff tape with a finite-difference gradient checker.
//! * [`nn`] — dense layers and initialization on top of the tape.
//! * [`world`] — the synthetic multi-agent hazard world: latent
//!   kinematics, per-channel projections, corruption injection, episodes.
//! * [`encoder`] — stochastic (Gaussian) observation encoders.
//! * [`select`] — Gumbel straight-through accept/reject gating.
//! * [`fusion`] — precision-weighted aggregation and the prediction head.
//! * [`comms`] — wire formats and per-frame byte accounting.
//! * [`model`] — the per-frame pipeline tying the above together, plus
//!   the ablation/baseline variants.
//! * [`train`] — loss, Adam, cosine schedule, evaluation metrics.
//! * [`checkpoint`] — versioned binary weight serialization.
//! * [`selfcheck`] — runtime invariant harness reused by the CLI selftest.

pub mod checkpoint;
pub mod comms;
pub mod encoder;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod seeding;
pub mod select;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod world;

pub use tape::{grad_check, Tape, TapeError, Var};
pub use tensor::Tensor;
