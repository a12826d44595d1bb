//! Global multi-camera multi-object association.
//!
//! The crate is organised bottom-up:
//!
//! * [`geom`] – boxes, frame references, IoU-based ground-truth labelling and
//!   window arithmetic.
//! * [`simworld`] – deterministic synthetic multi-camera scenes and detections.
//! * [`features`] – spatio-temporal features and the two feature encoders.
//! * [`assoc`] – the one-layer encoder/decoder association transformer, the
//!   per-frame softmax, the association loss and its analytic gradients.
//! * [`tracker`] – online sliding-window tracking with a memory bank.
//! * [`metrics`] – cross-view CVMA / CVIDF1 evaluation.

pub mod assignment;
pub mod assoc;
pub mod error;
pub mod features;
pub mod geom;
pub mod linalg;
pub mod metrics;
pub mod params;
pub mod simworld;
pub mod tracker;

pub use error::{Error, Result};
pub use geom::{BoxPx, FrameRef, SceneDims, TargetObs, Trajectory, TrajectoryId};
