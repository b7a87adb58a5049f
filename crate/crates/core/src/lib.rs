//! Multi-key content watermarking at desk scale.
//!
//! The provider holds `r` secret keys and watermarks each response with one
//! key drawn uniformly at random. Detection runs one green/red-list test per
//! key under a shared, Sidak-corrected threshold and accepts content as
//! genuine only when exactly one key is statistically present: zero firing
//! keys means unwatermarked, two or more means forged. The crate bundles
//!
//! * [`lm`] — deterministic toy language models (hash-synthetic and n-gram),
//! * [`scheme`] — the four green/red-list watermark variants,
//! * [`multikey`] — the multi-key decision rule and threshold calibration,
//! * [`theory`] — closed-form bounds and the Bernoulli detector model,
//! * [`attack`] — averaging and key-clustering forgery adversaries,
//! * [`game`] — a Monte Carlo security-game harness over config grids,
//! * [`report`] — CSV/JSON/SVG result artifacts.
//!
//! Everything is deterministic given its seeds: batch work is dispatched
//! through [`exec`], which runs on rayon with the default `parallel` feature
//! and falls back to sequential execution without it, producing identical
//! results either way.

pub mod attack;
pub mod batch;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod game;
pub mod hash;
pub mod lm;
pub mod multikey;
pub mod report;
pub mod scheme;
pub mod theory;

pub use error::{Error, Result};
pub use lm::{GenParams, LmSpec, TokenId, TokenSequence, Vocabulary};
pub use multikey::{Calibration, Decision, DetectionReport, Ensemble, KeySet};
pub use scheme::{SchemeConfig, Variant, WatermarkKey, ZScore};
