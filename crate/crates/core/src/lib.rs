//! Continual contrastive learning engine.
//!
//! A self-supervised learner is trained on a stream of disjoint class groups
//! with a MoCo-style InfoNCE objective, and forgetting is fought on three
//! fronts: rehearsal of exemplars picked by feature-variance scoring inside
//! k-means clusters, self-supervised distillation of similarity structure
//! from a momentum teacher, and an extra sample queue that keeps old-data
//! keys around as negatives. Everything runs on plain `f64` matrices at desk
//! scale, each analytic gradient is checkable against finite differences,
//! and every source of randomness derives from one root seed.

pub mod config;
pub mod contrastive;
pub mod datastream;
pub mod distillation;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod numerics;
pub mod rehearsal;
pub mod rng;

pub use error::{CclError, Result};
