//! Training mathematics for dense anchor-based object detectors.
//!
//! The crate covers the full path from ground-truth boxes to a trained toy
//! detector: per-class anchor clustering, per-object normalized overlap
//! (PONO) assignment, ambiguity-aware positive labels, an IoU localization
//! loss, and self-balancing class/size loss weights learned alongside the
//! network. A small reverse-mode differentiation engine drives training.

pub mod anchors;
pub mod assignment;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod loss;
pub mod model;
pub mod train;

pub use anchors::{build_grid, kmeans_anchors, AnchorGrid, AnchorSet};
pub use assignment::{assign_ao, compute_pono, GroundTruth, LabelMap, PonoMap, PredIoUMap};
pub use autodiff::{Tape, Tensor, Var};
pub use data::{Dataset, GenSpec, Scene};
pub use error::{Error, Result};
pub use eval::{map_eval, EvalReport};
pub use geometry::{decode, encode, iou, nms, BBox, Detection, Offsets};
pub use grid::{CellMap, GridDims};
pub use loss::{BalanceWeights, ClsLoss, LossReport, WeightMode};
pub use model::{Model, PredictorOutput, ToyNetConfig};
pub use train::{Checkpoint, LabelRule, RunState, TrainConfig, Trainer};
