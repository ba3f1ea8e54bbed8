//! Desk-scale study of multi-task transferable impersonation attacks on
//! face-recognition models.
//!
//! The crate is organised as a vertical slice:
//!
//! * [`tensor`] — a small reverse-mode autodiff engine over dense `f64`
//!   tensors with a deterministic tape.
//! * [`synthface`] — a procedural synthetic face dataset with identity
//!   latents and binary attributes.
//! * [`models`] — MLP face-recognition / attribute-recognition models,
//!   including a hard-parameter-sharing multi-task surrogate and opaque
//!   black-box targets, plus their SGD training loops.
//! * [`attack`] — gradient attack algorithms: PGD, momentum PGD, a joint
//!   multi-task baseline, and the alternating two-stage sibling attack
//!   with cross-task gradient aggregation.
//! * [`eval`] — threshold calibration, attack success rate, image metrics
//!   (SSIM / MSE), attribute prediction difference, and PGM rendering.
//! * [`config`] / [`pipeline`] — strict JSON experiment configuration and
//!   the deterministic end-to-end experiment stages behind the `sibling`
//!   command-line tool.
//!
//! Every stage is bitwise deterministic given its seeds: reruns of the
//! same configuration produce byte-identical artifacts, independent of
//! worker-thread count.

pub mod attack;
pub mod config;
pub mod container;
pub mod eval;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod synthface;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;
