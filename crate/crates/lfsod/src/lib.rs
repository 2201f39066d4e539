//! Salient object detection on light-field imagery (all-in-focus view plus a
//! focal stack), small enough to train on a CPU.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] - dense f64 tensors and a tape-based reverse-mode autodiff
//!   engine with the handful of ops the network needs, plus Adam and a
//!   finite-difference gradient checker.
//! * [`attention`] - the building blocks: receptive-field blocks, residual
//!   blocks, channel/spatial attention, cross-branch co-attention and gating.
//! * [`network`] - dual 2D/3D encoders, attention stages, progressive-fusion
//!   decoder, and the ablation variants, with binary checkpointing.
//! * [`loss`] - hybrid BCE + IoU + alignment loss over one or three heads.
//! * [`metrics`] - MAE, F-measure, S-measure, E-measure and threshold curves.
//! * [`dataset`] - on-disk sample layout, PNG IO, and a synthetic scene
//!   generator for smoke and overfit tests.
//! * [`cli`] - the `lfsod` command line (train / eval / predict / metrics).
//!
//! Everything is deterministic for a fixed seed: no threads, no hash-order
//! iteration on anything that reaches an output file.

pub mod attention;
pub mod cli;
pub mod dataset;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod tensor;
