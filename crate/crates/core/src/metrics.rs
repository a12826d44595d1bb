//! Cross-view tracking metrics.
//!
//! Both scores start from a per-frame correspondence between ground-truth and
//! predicted boxes ([`match_frame`]). CVMA charges misses, false positives and
//! doubly weighted identity mismatches; a mismatch is any change of the
//! predicted id attached to a ground-truth identity, compared against its last
//! match in any camera. CVIDF1 pairs ground-truth and predicted identities
//! once for the whole sequence and counts detections covered by that pairing.

use std::collections::BTreeMap;

use crate::assignment::solve_max;
use crate::error::{Error, Result};
use crate::geom::{iou, BoxPx, FrameRef, Trajectory, TrajectoryId};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Minimum IoU for a ground-truth box and a prediction to correspond.
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("IoU threshold {} outside (0, 1]", self.iou_threshold)));
        }
        Ok(())
    }
}

/// Correspondence in one `(camera, time)` frame, by input index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrameMatch {
    /// `(gt index, prediction index)`, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub misses: Vec<usize>,
    pub false_positives: Vec<usize>,
}

/// Error counts of one time step, summed over cameras.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameCounters {
    pub time: u32,
    pub gt: usize,
    pub misses: usize,
    pub false_positives: usize,
    pub mismatches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvScores {
    /// `None` when there is no ground truth.
    pub cvma: Option<f64>,
    pub cvidp: Option<f64>,
    pub cvidr: Option<f64>,
    pub cvidf1: Option<f64>,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
    pub gt: usize,
    pub misses: usize,
    pub false_positives: usize,
    pub mismatches: usize,
}

/// Maximum-cardinality matching among pairs with IoU at or above the
/// threshold, ties broken by maximum total IoU.
pub fn match_frame(gt: &[(TrajectoryId, BoxPx)], pred: &[(TrajectoryId, BoxPx)], cfg: &EvalConfig) -> FrameMatch {
    let (n, m) = (gt.len(), pred.len());
    // every admissible pair is worth more than any IoU total of a smaller matching
    let big = (n.min(m) + 1) as f64;
    let mut w = Mat::zeros(n, m);
    let mut allowed = vec![false; n * m];
    for (i, (_, g)) in gt.iter().enumerate() {
        for (j, (_, p)) in pred.iter().enumerate() {
            let v = iou(g, p);
            if v >= cfg.iou_threshold {
                w[(i, j)] = big + v;
                allowed[i * m + j] = true;
            }
        }
    }
    let pairs: Vec<(usize, usize)> = solve_max(&w).pairs().filter(|&(i, j)| allowed[i * m + j]).collect();
    let mut gt_hit = vec![false; n];
    let mut pred_hit = vec![false; m];
    for &(i, j) in &pairs {
        gt_hit[i] = true;
        pred_hit[j] = true;
    }
    FrameMatch {
        pairs,
        misses: (0..n).filter(|&i| !gt_hit[i]).collect(),
        false_positives: (0..m).filter(|&j| !pred_hit[j]).collect(),
    }
}

type FrameBoxes = (Vec<(TrajectoryId, BoxPx)>, Vec<(TrajectoryId, BoxPx)>);

/// Ground-truth and predicted boxes of every frame, in `(time, camera)` order.
fn frames(gt: &[Trajectory], pred: &[Trajectory]) -> BTreeMap<(u32, u32), FrameBoxes> {
    let mut out: BTreeMap<(u32, u32), FrameBoxes> = BTreeMap::new();
    for t in gt {
        for (f, b) in &t.members {
            out.entry(f.time_major()).or_default().0.push((t.id, *b));
        }
    }
    for t in pred {
        for (f, b) in &t.members {
            out.entry(f.time_major()).or_default().1.push((t.id, *b));
        }
    }
    // ties between identical boxes then break by ascending id, whatever the input order
    for (g, p) in out.values_mut() {
        g.sort_by_key(|e| e.0);
        p.sort_by_key(|e| e.0);
    }
    out
}

/// Matched `(gt id, predicted id)` pairs of every frame plus per-step
/// counters.
fn correspondences(
    gt: &[Trajectory],
    pred: &[Trajectory],
    cfg: &EvalConfig,
) -> (Vec<(FrameRef, TrajectoryId, TrajectoryId)>, Vec<FrameCounters>) {
    let mut pairs = Vec::new();
    let mut counters: Vec<FrameCounters> = Vec::new();
    let mut last: BTreeMap<TrajectoryId, TrajectoryId> = BTreeMap::new();
    for ((time, camera), (g, p)) in frames(gt, pred) {
        if counters.last().is_none_or(|c| c.time != time) {
            counters.push(FrameCounters {
                time,
                ..Default::default()
            });
        }
        let c = counters.last_mut().expect("pushed above");
        let fm = match_frame(&g, &p, cfg);
        c.gt += g.len();
        c.misses += fm.misses.len();
        c.false_positives += fm.false_positives.len();
        for (i, j) in fm.pairs {
            let (gid, pid) = (g[i].0, p[j].0);
            if last.insert(gid, pid).is_some_and(|prev| prev != pid) {
                c.mismatches += 1;
            }
            pairs.push((FrameRef::new(camera, time), gid, pid));
        }
    }
    (pairs, counters)
}

/// `1 - Σ(m + fp + 2 mme) / Σ g`, with the per-step counters.
pub fn cvma(gt: &[Trajectory], pred: &[Trajectory], cfg: &EvalConfig) -> (Option<f64>, Vec<FrameCounters>) {
    let (_, counters) = correspondences(gt, pred, cfg);
    (cvma_from(&counters), counters)
}

fn cvma_from(counters: &[FrameCounters]) -> Option<f64> {
    let g: usize = counters.iter().map(|c| c.gt).sum();
    if g == 0 {
        return None;
    }
    let err: usize = counters.iter().map(|c| c.misses + c.false_positives + 2 * c.mismatches).sum();
    Some(1.0 - err as f64 / g as f64)
}

/// Harmonic mean of precision and recall; undefined when either is, or when
/// both are zero.
pub fn f1(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Every score at once.
pub fn evaluate(gt: &[Trajectory], pred: &[Trajectory], cfg: &EvalConfig) -> CvScores {
    let (pairs, counters) = correspondences(gt, pred, cfg);
    let gt_ids: Vec<TrajectoryId> = gt.iter().map(|t| t.id).collect();
    let pred_ids: Vec<TrajectoryId> = pred.iter().map(|t| t.id).collect();
    let gi: BTreeMap<TrajectoryId, usize> = gt_ids.iter().enumerate().map(|(k, id)| (*id, k)).collect();
    let pi: BTreeMap<TrajectoryId, usize> = pred_ids.iter().enumerate().map(|(k, id)| (*id, k)).collect();
    let mut overlap = Mat::zeros(gt_ids.len(), pred_ids.len());
    for (_, g, p) in &pairs {
        overlap[(gi[g], pi[p])] += 1.0;
    }
    let idtp = solve_max(&overlap).total.round() as usize;
    let n_gt: usize = gt.iter().map(Trajectory::len).sum();
    let n_pred: usize = pred.iter().map(Trajectory::len).sum();
    let (idfp, idfn) = (n_pred - idtp, n_gt - idtp);
    let cvidp = ratio(idtp, idtp + idfp);
    let cvidr = ratio(idtp, idtp + idfn);
    // equals f1(cvidp, cvidr) whenever that is defined, and 0 when nothing
    // is covered
    let cvidf1 = ratio(2 * idtp, 2 * idtp + idfp + idfn);
    CvScores {
        cvma: cvma_from(&counters),
        cvidp,
        cvidr,
        cvidf1,
        idtp,
        idfp,
        idfn,
        gt: counters.iter().map(|c| c.gt).sum(),
        misses: counters.iter().map(|c| c.misses).sum(),
        false_positives: counters.iter().map(|c| c.false_positives).sum(),
        mismatches: counters.iter().map(|c| c.mismatches).sum(),
    }
}

/// CVIDF1 and its parts.
pub fn cvidf1(gt: &[Trajectory], pred: &[Trajectory], cfg: &EvalConfig) -> CvScores {
    evaluate(gt, pred, cfg)
}
