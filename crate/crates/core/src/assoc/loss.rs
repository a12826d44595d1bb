//! Per-frame softmax with a null option, ground-truth association matrices
//! and the summed per-frame cross-entropy.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::geom::{FrameRef, TrajectoryId};
use crate::linalg::Mat;

/// Score of "no corresponding target"; a constant, not a parameter.
pub const NULL_SCORE: f64 = 0.0;

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Columns grouped by the frame they were detected in.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGroups {
    /// Distinct frames, ordered by `(time, camera)`.
    pub frames: Vec<FrameRef>,
    /// Column indices belonging to each frame, ascending.
    pub members: Vec<Vec<usize>>,
}

impl FrameGroups {
    pub fn from_columns(cols: &[FrameRef]) -> Self {
        let mut map: BTreeMap<(u32, u32), (FrameRef, Vec<usize>)> = BTreeMap::new();
        for (j, f) in cols.iter().enumerate() {
            map.entry(f.time_major()).or_insert_with(|| (*f, Vec::new())).1.push(j);
        }
        let (frames, members) = map.into_values().unzip();
        Self { frames, members }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Raw scores `G` with the frame of every column and every query row.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub g: Mat,
    pub col_frames: Vec<FrameRef>,
    pub row_frames: Vec<FrameRef>,
}

impl SimilarityMatrix {
    pub fn new(g: Mat, row_frames: Vec<FrameRef>, col_frames: Vec<FrameRef>) -> Result<Self> {
        if g.rows() != row_frames.len() || g.cols() != col_frames.len() {
            return Err(shape_err(
                "similarity metadata",
                format!("{:?}", g.shape()),
                format!("({}, {})", row_frames.len(), col_frames.len()),
            ));
        }
        Ok(Self { g, col_frames, row_frames })
    }
}

/// Association probabilities `H` and per-(query, frame) null probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AssocProbs {
    pub h: Mat,
    /// `N_q x groups.len()`
    pub null: Mat,
    pub groups: FrameGroups,
}

/// Softmax of each query's scores within every column frame, with the
/// constant null score competing in each frame.
pub fn per_frame_softmax(sim: &SimilarityMatrix) -> AssocProbs {
    let groups = FrameGroups::from_columns(&sim.col_frames);
    let g = &sim.g;
    let mut h = Mat::zeros(g.rows(), g.cols());
    let mut null = Mat::zeros(g.rows(), groups.len());
    for i in 0..g.rows() {
        let row = g.row(i);
        for (k, cols) in groups.members.iter().enumerate() {
            let max = cols.iter().map(|&j| row[j]).fold(NULL_SCORE, f64::max);
            let null_e = (NULL_SCORE - max).exp();
            let denom = null_e + cols.iter().map(|&j| (row[j] - max).exp()).sum::<f64>();
            for &j in cols {
                h[(i, j)] = (row[j] - max).exp() / denom;
            }
            null[(i, k)] = null_e / denom;
        }
    }
    AssocProbs { h, null, groups }
}

/// Ground-truth association: `x[i][j] = 1` iff query `i` and column `j`
/// carry the same label; `x0[i][k] = 1` iff the labeled query `i` has no
/// counterpart in frame `k`. Unlabeled queries have all-zero rows and are
/// excluded from the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GtAssoc {
    pub x: Mat,
    pub x0: Mat,
    pub active_rows: Vec<bool>,
}

pub fn build_gt_association(
    row_labels: &[Option<TrajectoryId>],
    col_labels: &[Option<TrajectoryId>],
    groups: &FrameGroups,
) -> GtAssoc {
    let mut x = Mat::zeros(row_labels.len(), col_labels.len());
    let mut x0 = Mat::zeros(row_labels.len(), groups.len());
    for (i, li) in row_labels.iter().enumerate() {
        let Some(li) = li else { continue };
        for (k, cols) in groups.members.iter().enumerate() {
            let mut hit = false;
            for &j in cols {
                if col_labels[j] == Some(*li) {
                    x[(i, j)] = 1.0;
                    hit = true;
                }
            }
            if !hit {
                x0[(i, k)] = 1.0;
            }
        }
    }
    GtAssoc {
        x,
        x0,
        active_rows: row_labels.iter().map(Option::is_some).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// One entry per frame group, in group order.
    pub per_frame: Vec<f64>,
}

/// `L = Σ_frames -(1/N) Σ_i [Σ_j X_ij log H_ij + x0_i log h0_i]` with `N`
/// the number of columns.
pub fn association_loss(probs: &AssocProbs, gt: &GtAssoc) -> Result<LossReport> {
    check_shapes(probs, gt)?;
    let n = probs.h.cols() as f64;
    let mut per_frame = vec![0.0; probs.groups.len()];
    for i in 0..probs.h.rows() {
        if !gt.active_rows[i] {
            continue;
        }
        for (k, cols) in probs.groups.members.iter().enumerate() {
            let mut s = 0.0;
            for &j in cols {
                let y = gt.x[(i, j)];
                if y != 0.0 {
                    s += y * probs.h[(i, j)].max(LOG_CLAMP).ln();
                }
            }
            let y0 = gt.x0[(i, k)];
            if y0 != 0.0 {
                s += y0 * probs.null[(i, k)].max(LOG_CLAMP).ln();
            }
            per_frame[k] -= s / n;
        }
    }
    Ok(LossReport {
        total: per_frame.iter().sum(),
        per_frame,
    })
}

/// `dL/dG` for [`association_loss`] ∘ [`per_frame_softmax`]. Clamped
/// probabilities contribute a constant, hence no gradient.
pub fn loss_grad_scores(probs: &AssocProbs, gt: &GtAssoc) -> Result<Mat> {
    check_shapes(probs, gt)?;
    let n = probs.h.cols() as f64;
    let mut dg = Mat::zeros(probs.h.rows(), probs.h.cols());
    for i in 0..probs.h.rows() {
        if !gt.active_rows[i] {
            continue;
        }
        for (k, cols) in probs.groups.members.iter().enumerate() {
            let live = |p: f64, y: f64| if p >= LOG_CLAMP { y } else { 0.0 };
            let mut mass = live(probs.null[(i, k)], gt.x0[(i, k)]);
            for &j in cols {
                mass += live(probs.h[(i, j)], gt.x[(i, j)]);
            }
            for &j in cols {
                let p = probs.h[(i, j)];
                dg[(i, j)] = -(live(p, gt.x[(i, j)]) - p * mass) / n;
            }
        }
    }
    Ok(dg)
}

fn check_shapes(probs: &AssocProbs, gt: &GtAssoc) -> Result<()> {
    if probs.h.shape() != gt.x.shape() || probs.null.shape() != gt.x0.shape() || gt.active_rows.len() != probs.h.rows() {
        return Err(shape_err(
            "association loss",
            format!("{:?} / {:?}", probs.h.shape(), probs.null.shape()),
            format!("{:?} / {:?}", gt.x.shape(), gt.x0.shape()),
        ));
    }
    Ok(())
}
