//! Voice-disorder analysis toolkit.
//!
//! The crate is organised around the pipeline stages:
//!
//! - [`audio`]: clips, WAV I/O, resampling
//! - [`acoustics`]: f0 / jitter / shimmer / HNR / SNR measurement
//! - [`corpus`]: JSON-Lines manifests and dataset statistics
//! - [`synthgen`]: class-conditioned source-filter voice synthesis and balancing plans
//! - [`augment`]: pitch shift, WSOLA time stretch, noise and stochastic policies
//! - [`features`]: log-mel, MFCC and utterance pooling
//! - [`experts`]: per-recording-type MLP experts and external prediction files
//! - [`moe`]: entropy-based expert selection per session
//! - [`eval`]: speaker-disjoint cross-validation, metrics, ablations, reports

pub mod acoustics;
pub mod audio;
pub mod augment;
pub mod corpus;
pub mod eval;
pub mod experts;
pub mod features;
pub mod moe;
pub mod synthgen;
pub mod util;
