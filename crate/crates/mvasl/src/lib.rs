//! Multi-view, multi-label action recognition from weak video-level labels,
//! built on a self-contained f64 autodiff core.
//!
//! The pipeline: a shared patch-embedding spatial encoder and a shared
//! temporal transformer produce per-view features; CLS vectors fuse across
//! views for video-level classification while per-frame features fuse for
//! action selection — per-frame class and actionness heads whose top-k
//! selections build the pseudo ground-truth that supervises actionness.
//! Everything trains end-to-end against a synthetic multi-view generator
//! with planted, per-view-visible action segments.

pub mod asl;
pub mod cli;
pub mod datagen;
pub mod encoder;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use numerics::{Tape, Tensor, Var};
