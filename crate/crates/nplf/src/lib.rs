//! Point-anchored light field view synthesis with joint camera pose
//! refinement and transient-object masking.
//!
//! The crate trains a light field whose ray descriptors are aggregated from
//! learnable features anchored on a scene point cloud. Camera poses carry
//! learnable axis-angle/translation corrections that are optimized together
//! with the field through a photometric loss, and tracked objects that a
//! voting scheme classifies as moving are excluded from ray sampling during
//! training. A synthetic-scene generator with an exact analytic renderer
//! provides ground truth for end-to-end verification.

pub mod geometry;
pub mod harness;
pub mod lightfield;
pub mod metrics;
pub mod motion;
pub mod scene;
pub mod trainer;
