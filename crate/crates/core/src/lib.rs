//! Multi-view, multi-frame 3D hand keypoint lifting trained on noisy 2D
//! pseudo-labels.
//!
//! The pipeline decodes per-view 2D joints with confidences from rendered
//! detector heatmaps, fuses them across views with confidence-aware
//! attention, models per-view pose uncertainty with a conditional normalizing
//! flow, lifts sampled hypotheses into anchor/query 3D point clouds by
//! confidence-weighted triangulation, and refines the query cloud with a
//! spatiotemporal point transformer before regressing a parametric skeleton.
//! Everything is built on a small reverse-mode f64 tape.

pub mod diff;
pub mod flow;
pub mod geometry;
pub mod graph;
pub mod heatmap;
pub mod nn;
pub mod skeleton;
pub mod stpt;
