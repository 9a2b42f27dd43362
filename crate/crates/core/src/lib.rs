//! Camera-to-voxel semantic occupancy pipeline.
//!
//! The crate is organized around a two-stage network: a depth/semantics
//! fusion stage that builds an initial voxel feature volume and query
//! proposals, and a completion stage that lifts image features into 3D with
//! deformable attention, completes occluded space with mask tokens, and
//! predicts a per-voxel semantic map. Everything runs on a small built-in
//! reverse-mode autodiff substrate so the whole pipeline is trainable and
//! finite-difference checkable on a CPU.

pub mod autodiff;
pub mod completion;
pub mod config;
pub mod fusion;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod semkitti;
pub mod train;
