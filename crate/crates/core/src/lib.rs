//! Data-free out-of-distribution detection.
//!
//! A fixed BatchNorm classifier is inverted into class-conditional
//! "impressions"; gradients recorded along the inversion give per-channel
//! and per-layer importance weights, and unknown inputs are scored by the
//! weighted deviation of their layer activation means from the impressions'.
//!
//! Pipeline stages, each persisted to disk by the CLI:
//!
//! 1. [`datagen`] renders a synthetic labeled shape dataset and OOD sets.
//! 2. [`smallnet`] trains a small conv/BN/ReLU classifier on it.
//! 3. [`inversion`] synthesizes impressions per class and records trajectories.
//! 4. [`calibration`] turns impressions and trajectories into weights and means.
//! 5. [`detector`] scores inputs; [`evalharness`] runs metrics, benchmarks and ablations.

pub mod archive;
pub mod calibration;
pub mod config;
pub mod datagen;
pub mod detector;
pub mod error;
pub mod evalharness;
pub mod inversion;
pub mod numerics;
pub mod seeding;
pub mod smallnet;

pub use error::{Error, Result};
