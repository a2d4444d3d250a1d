//! Geometry-driven refinement of per-point vision-language features.
//!
//! The crate turns a point cloud, a noisy per-point feature field and a
//! geometric descriptor field into a smoothed feature field:
//!
//! 1. [`superpoints`] seeds clusters with farthest point sampling and refines
//!    them with neighbourhood-restricted optimal transport.
//! 2. [`anchors`] finds feature-space modes with a joint visual/geometric
//!    Mean-Shift followed by non-maximum suppression.
//! 3. [`aggregation`] runs local, global and superpoint-to-point mixing and
//!    finally snaps each point onto its best anchor.
//!
//! [`tasks`] holds the zero-shot classification and segmentation harness and
//! [`io`] the tensor, PLY and run-configuration formats.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod anchors;
pub mod cloud;
pub mod config;
pub mod error;
pub mod features;
pub mod fpfh;
pub mod io;
pub mod linalg;
pub mod superpoints;
pub mod synthetic;
pub mod tasks;
pub mod transport;

pub use aggregation::{run_pipeline, PipelineOutput, PipelineReport};
pub use anchors::{AnchorSet, Bandwidths};
pub use cloud::{NeighborIndex, NormalField, PointCloud};
pub use config::{CoordKernel, NmsMode, PipelineConfig, Preset, RunConfig};
pub use error::{Error, Result};
pub use features::FeatureField;
pub use fpfh::{compute_fpfh, FpfhParams};
pub use superpoints::SuperpointState;
pub use tasks::{TextFeatures, ViewProjection};
pub use transport::CouplingMatrix;
