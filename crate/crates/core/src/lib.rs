//! Hierarchical visual localization.
//!
//! A fast handcrafted-feature tracker estimates relative motion frame to frame,
//! while selected keyframes are aligned against a prior map built from learned
//! features. A windowed bundle adjustment estimates one shared drift transform
//! for the recent keyframes and folds it back into the local map.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod estimation;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod hba;
pub mod matching;
pub mod pipeline;
pub mod synth;
mod io_util;
pub mod worldmap;

pub use error::{Error, Result};
pub use estimation::{RobustKernel, SolverConfig};
pub use features::{Channel, Descriptor, FeatureGrid, Keypoint};
pub use geometry::{CameraIntrinsics, CameraPoint, Pose, Twist};
pub use io_util::{fmt_f64, fmt_sig};
pub use worldmap::{Keyframe, MapPoint, Observation, ViewFilter, VisualMap};
