//! Segmentation engine that represents an image as a multi-magnification
//! graph, runs a residual graph-attention network with position-conditioned
//! attention over it, and co-optimizes network weights and graph node
//! positions under a magnification-balanced focal loss.
//!
//! Module map:
//!
//! - [`autodiff`]  — tape-based reverse-mode differentiation over dense
//!   tensors and segmented (per-neighborhood) reductions
//! - [`graph`]     — multi-magnification base graph construction and
//!   pyramid feature projection
//! - [`plasticity`] — learnable mutation of node positions with constraint
//!   repair and feature refresh
//! - [`gat`]       — residual graph-attention network with positional
//!   attention slots (GCN aggregator available as an alternative)
//! - [`loss`]      — BCE, focal, and magnification-balanced focal loss
//!   with the positional scalar field
//! - [`metrics`]   — soft IoU, Dice/F1, instance precision/recall and the
//!   competition score
//! - [`data`]      — dataset ingestion, synthetic sample generation,
//!   augmentation, node targets, and mask reconstruction
//! - [`train`]     — joint optimization loop, checkpointing, evaluation

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gat;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod plasticity;
pub mod train;

pub use error::{Error, Result};
