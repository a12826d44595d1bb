//! Shared domain types, box geometry, ground-truth labelling of detections
//! and sliding-window arithmetic.

use std::fmt;

use crate::error::{Error, Result};

/// Minimum IoU (exclusive) for a detection to inherit a ground-truth label.
pub const GT_ASSIGN_IOU: f64 = 0.6;

/// Axis-aligned box in pixel coordinates, `(x1, y1)` top-left and `(x2, y2)`
/// bottom-right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPx {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxPx {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("non-finite box {b:?}")));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::Config(format!("inverted box {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Intersection with the rectangle `[0, w] x [0, h]`, or `None` if empty.
    pub fn clip(&self, w: f64, h: f64) -> Option<BoxPx> {
        let b = BoxPx {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        };
        (b.x2 > b.x1 && b.y2 > b.y1).then_some(b)
    }

    pub fn within(&self, w: f64, h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= w && self.y2 <= h
    }
}

/// Intersection over union. Boxes with zero union area give 0.
pub fn iou(a: &BoxPx, b: &BoxPx) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One camera frame, 1-based on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameRef {
    pub camera: u32,
    pub time: u32,
}

impl FrameRef {
    pub fn new(camera: u32, time: u32) -> Self {
        Self { camera, time }
    }

    /// Ordering key used everywhere members are sorted: time first.
    pub fn time_major(&self) -> (u32, u32) {
        (self.time, self.camera)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrajectoryId(pub u64);

impl fmt::Display for TrajectoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneDims {
    pub width: f64,
    pub height: f64,
    pub horizon: u32,
    pub cameras: u32,
}

impl SceneDims {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) || self.horizon == 0 || self.cameras == 0 {
            return Err(Error::Config(format!(
                "scene dims must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, frame: FrameRef) -> bool {
        (1..=self.cameras).contains(&frame.camera) && (1..=self.horizon).contains(&frame.time)
    }
}

/// A single detection with its raw appearance vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetObs {
    pub bbox: BoxPx,
    pub frame: FrameRef,
    pub app: Vec<f64>,
    pub det_score: f64,
}

/// Ground-truth or predicted trajectory: at most one box per frame, sorted by
/// `(time, camera)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: TrajectoryId,
    pub members: Vec<(FrameRef, BoxPx)>,
}

impl Trajectory {
    pub fn new(id: TrajectoryId) -> Self {
        Self {
            id,
            members: Vec::new(),
        }
    }

    /// Sorts members and rejects duplicate frames.
    pub fn normalized(mut self) -> Result<Self> {
        self.members.sort_by_key(|(f, _)| f.time_major());
        if self.members.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Config(format!(
                "trajectory {} has two members in one frame",
                self.id
            )));
        }
        Ok(self)
    }

    pub fn box_at(&self, frame: FrameRef) -> Option<&BoxPx> {
        self.members
            .binary_search_by_key(&frame.time_major(), |(f, _)| f.time_major())
            .ok()
            .map(|i| &self.members[i].1)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Labels detections of one frame with ground-truth trajectory ids.
///
/// A ground-truth box goes to the detection with the highest IoU (lowest
/// index on ties) if that IoU exceeds [`GT_ASSIGN_IOU`]. When two ground-truth
/// boxes pick the same detection the higher IoU wins (lower gt index on ties)
/// and the loser stays unassigned.
pub fn assign_targets_to_gt(
    detections: &[BoxPx],
    gt: &[(TrajectoryId, BoxPx)],
) -> Vec<Option<TrajectoryId>> {
    let mut labels: Vec<Option<TrajectoryId>> = vec![None; detections.len()];
    let mut best_iou = vec![f64::NEG_INFINITY; detections.len()];
    for (gt_id, gt_box) in gt {
        let mut arg: Option<(usize, f64)> = None;
        for (n, det) in detections.iter().enumerate() {
            let v = iou(gt_box, det);
            if arg.is_none_or(|(_, best)| v > best) {
                arg = Some((n, v));
            }
        }
        if let Some((n, v)) = arg {
            if v > GT_ASSIGN_IOU && v > best_iou[n] {
                best_iou[n] = v;
                labels[n] = Some(*gt_id);
            }
        }
    }
    labels
}

/// First frame of the window ending at `current`: `max(1, current - window + 1)`.
pub fn window_start(current: u32, window: u32) -> u32 {
    debug_assert!(current >= 1 && window >= 1);
    (current + 1).saturating_sub(window).max(1)
}
