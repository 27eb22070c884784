//! Geometry engine and evaluation toolkit for relative-pose-based visual
//! relocalization.
//!
//! Pairwise relative poses (rotation plus unit translation direction) are
//! aggregated into absolute camera poses by rotation averaging and
//! camera-center triangulation. The crate also ships the pose-accuracy
//! metric suite, text formats for poses and pair lists, a synthetic scene
//! generator, and a small two-view transformer regressor.

pub mod averaging;
pub mod bench;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod regressor;
pub mod synthetic;
