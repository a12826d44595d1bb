//! Online tracking over a sliding window of time steps.
//!
//! Each call to [`TrackerState::step`] consumes the detections of one time
//! step from every camera and resolves them in three passes:
//!
//! 1. window association: per camera, detections are matched to active
//!    trajectories through the membership-aggregated scores `G·M` and the
//!    null-gated softmax, accepting matches above `theta_window`;
//! 2. memory association: what is left is buffered and matched against the
//!    averaged features of retired trajectories, accepting matches above
//!    `theta_memory` and reviving those trajectories;
//! 3. cross-view linking: remaining detections of one camera may join a
//!    trajectory that received a detection from another camera in this same
//!    step (scored against that detection's column of `G`); anything still
//!    unmatched starts a new trajectory.
//!
//! Matching is one-to-one within a camera, so a trajectory gains at most one
//! member per `(camera, time)` while still collecting one member from each
//! camera that sees it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::assoc::{association_scores, GmtParams, NULL_SCORE};
use crate::error::{shape_err, Error, Result};
use crate::features::fused_features;
use crate::geom::{window_start, BoxPx, FrameRef, SceneDims, TargetObs, Trajectory, TrajectoryId};
use crate::linalg::{softmax_with_null, Mat};

pub use crate::assignment::{solve_max as hungarian, Assignment};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Window length `W` in time steps.
    pub window: u32,
    /// Stride between steps; only 1 is supported.
    pub stride: u32,
    /// `θ1`
    pub theta_window: f64,
    /// `θ2`
    pub theta_memory: f64,
    /// Number of most recent features averaged into a memory entry.
    pub n_mem: usize,
    /// Trajectories with fewer members are dropped by [`TrackerState::finalize`].
    pub min_traj_len: usize,
    pub memory_enabled: bool,
    /// Oldest entries are evicted beyond this many.
    pub memory_capacity: Option<usize>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            window: 60,
            stride: 1,
            theta_window: 0.1,
            theta_memory: 0.2,
            n_mem: 10,
            min_traj_len: 10,
            memory_enabled: true,
            memory_capacity: None,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.window == 0 {
            return Err(Error::Config("tracker window must be at least 1".into()));
        }
        if self.stride != 1 {
            return Err(Error::Config(format!("tracker stride must be 1, got {}", self.stride)));
        }
        if !unit(self.theta_window) || !unit(self.theta_memory) {
            return Err(Error::Config(format!(
                "thresholds must lie in [0, 1], got {} and {}",
                self.theta_window, self.theta_memory
            )));
        }
        if self.n_mem == 0 || self.min_traj_len == 0 || self.memory_capacity == Some(0) {
            return Err(Error::Config("n_mem, min_traj_len and memory capacity must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedTarget {
    pub obs: TargetObs,
    pub feature: Vec<f64>,
    pub trajectory: Option<TrajectoryId>,
}

/// Targets of the most recent time steps, oldest first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowCache {
    steps: VecDeque<(u32, Vec<CachedTarget>)>,
}

impl WindowCache {
    /// Number of cached time steps.
    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    pub fn first_time(&self) -> Option<u32> {
        self.steps.front().map(|s| s.0)
    }

    pub fn targets(&self) -> impl Iterator<Item = &CachedTarget> {
        self.steps.iter().flat_map(|s| s.1.iter())
    }

    pub fn len(&self) -> usize {
        self.steps.iter().map(|s| s.1.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slide(&mut self, start: u32) {
        while self.steps.front().is_some_and(|s| s.0 < start) {
            self.steps.pop_front();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveTrajectory {
    pub id: TrajectoryId,
    pub members: Vec<(FrameRef, BoxPx)>,
    /// Most recent fused features, oldest first, at most `n_mem` long.
    pub history: VecDeque<Vec<f64>>,
    pub last_seen: u32,
}

impl ActiveTrajectory {
    fn push(&mut self, obs: &TargetObs, feature: &[f64], n_mem: usize) {
        self.members.push((obs.frame, obs.bbox));
        self.history.push_back(feature.to_vec());
        while self.history.len() > n_mem {
            self.history.pop_front();
        }
        self.last_seen = obs.frame.time;
    }

    fn into_trajectory(self) -> Trajectory {
        let mut members = self.members;
        members.sort_by_key(|(f, _)| f.time_major());
        Trajectory { id: self.id, members }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub trajectory: ActiveTrajectory,
    /// Mean of the last `n_mem` features at retirement.
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryBank {
    entries: Vec<MemoryEntry>,
    capacity: Option<usize>,
}

impl MemoryBank {
    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: TrajectoryId) -> bool {
        self.entries.iter().any(|e| e.trajectory.id == id)
    }

    /// Inserts an entry; returns the evicted entry when over capacity.
    fn insert(&mut self, entry: MemoryEntry) -> Option<MemoryEntry> {
        self.entries.push(entry);
        match self.capacity {
            Some(cap) if self.entries.len() > cap => {
                let oldest = (0..self.entries.len())
                    .min_by_key(|&i| (self.entries[i].trajectory.last_seen, self.entries[i].trajectory.id))
                    .expect("nonempty");
                Some(self.entries.remove(oldest))
            }
            _ => None,
        }
    }

    fn take(&mut self, id: TrajectoryId) -> Option<MemoryEntry> {
        let i = self.entries.iter().position(|e| e.trajectory.id == id)?;
        Some(self.entries.remove(i))
    }
}

/// What one step did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutput {
    /// Trajectory id of every input detection, in input order.
    pub ids: Vec<TrajectoryId>,
    /// Matches accepted by the window association pass.
    pub window_accepted: usize,
    /// Detections that revived a trajectory from the memory bank.
    pub revived: usize,
    /// Detections that joined a trajectory started by another camera this step.
    pub linked: usize,
    pub created: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    config: TrackerConfig,
    dims: SceneDims,
    cache: WindowCache,
    active: Vec<ActiveTrajectory>,
    /// Indices of the last step's detections left over by the window pass.
    buffer: Vec<usize>,
    memory: MemoryBank,
    /// Retired trajectories that are no longer matchable.
    finished: Vec<ActiveTrajectory>,
    next_id: u64,
    last_time: Option<u32>,
}

impl TrackerState {
    pub fn new(config: TrackerConfig, dims: SceneDims) -> Result<Self> {
        config.validate()?;
        dims.validate()?;
        let memory = MemoryBank {
            entries: Vec::new(),
            capacity: config.memory_capacity,
        };
        Ok(Self {
            config,
            dims,
            cache: WindowCache::default(),
            active: Vec::new(),
            buffer: Vec::new(),
            memory,
            finished: Vec::new(),
            next_id: 1,
            last_time: None,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn dims(&self) -> &SceneDims {
        &self.dims
    }

    pub fn cache(&self) -> &WindowCache {
        &self.cache
    }

    pub fn active(&self) -> &[ActiveTrajectory] {
        &self.active
    }

    pub fn memory(&self) -> &MemoryBank {
        &self.memory
    }

    pub fn buffer(&self) -> &[usize] {
        &self.buffer
    }

    pub fn last_time(&self) -> Option<u32> {
        self.last_time
    }

    /// Replaces both thresholds.
    pub fn set_thresholds(&mut self, theta_window: f64, theta_memory: f64) -> Result<()> {
        let cfg = TrackerConfig {
            theta_window,
            theta_memory,
            ..self.config.clone()
        };
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// Processes every detection of time step `time`.
    pub fn step(&mut self, time: u32, detections: &[TargetObs], params: &GmtParams) -> Result<StepOutput> {
        if let Some(last) = self.last_time {
            if time <= last {
                return Err(Error::TimeRegression { last, got: time });
            }
        }
        if time == 0 || time > self.dims.horizon {
            return Err(Error::OutOfBounds(format!("time {time} outside [1, {}]", self.dims.horizon)));
        }
        for d in detections {
            if d.frame.time != time {
                return Err(Error::OutOfBounds(format!(
                    "detection at time {} passed to step {time}",
                    d.frame.time
                )));
            }
            if !self.dims.contains(d.frame) || !d.bbox.within(self.dims.width, self.dims.height) {
                return Err(Error::OutOfBounds(format!(
                    "detection {:?} in camera {} outside the scene",
                    d.bbox, d.frame.camera
                )));
            }
        }
        params.validate()?;
        self.last_time = Some(time);

        let ws = window_start(time, self.config.window);
        self.cache.slide(ws);
        self.retire(ws)?;
        self.buffer.clear();

        let mut out = StepOutput {
            ids: Vec::new(),
            window_accepted: 0,
            revived: 0,
            linked: 0,
            created: 0,
        };
        let n = detections.len();
        if n == 0 {
            self.cache.steps.push_back((time, Vec::new()));
            return Ok(out);
        }

        let refs: Vec<&TargetObs> = detections.iter().collect();
        let feats = fused_features(&refs, &self.dims, &params.features)?;
        let d = feats.cols();
        let mut rows: Vec<&[f64]> = self.cache.targets().map(|t| t.feature.as_slice()).collect();
        let n_cache = rows.len();
        rows.extend((0..n).map(|i| feats.row(i)));
        let f = Mat::from_rows(&rows, d)?;
        let g = association_scores(&feats, &f, &params.assoc)?;
        if !g.is_finite() {
            return Err(Error::NonFinite {
                iteration: time as usize,
                detail: "window association scores".into(),
            });
        }

        let by_camera = group_by_camera(detections);
        let mut assigned: Vec<Option<TrajectoryId>> = vec![None; n];

        // window association
        let labels: Vec<Option<TrajectoryId>> = self
            .cache
            .targets()
            .map(|t| t.trajectory)
            .chain(std::iter::repeat_n(None, n))
            .collect();
        let candidates: Vec<TrajectoryId> = self
            .active
            .iter()
            .map(|t| t.id)
            .filter(|id| labels.contains(&Some(*id)))
            .collect();
        if !candidates.is_empty() {
            let m = membership_matrix(&labels, &candidates)?;
            let g_traj = trajectory_scores(&g, &m)?;
            for idx in by_camera.values() {
                for (i, j, p) in gated_matches(idx, candidates.len(), |i, j| g_traj[(i, j)]) {
                    if p > self.config.theta_window {
                        assigned[i] = Some(candidates[j]);
                        out.window_accepted += 1;
                    }
                }
            }
        }

        // memory association
        self.buffer = (0..n).filter(|&i| assigned[i].is_none()).collect();
        if self.config.memory_enabled && !self.buffer.is_empty() && !self.memory.is_empty() {
            let ids: Vec<TrajectoryId> = self.memory.entries.iter().map(|e| e.trajectory.id).collect();
            let mem_rows: Vec<&[f64]> = self.memory.entries.iter().map(|e| e.feature.as_slice()).collect();
            let fm = Mat::from_rows(&mem_rows, d)?;
            let qb = feats.select_rows(&self.buffer);
            let gm = association_scores(&qb, &fm, &params.assoc)?;
            if !gm.is_finite() {
                return Err(Error::NonFinite {
                    iteration: time as usize,
                    detail: "memory association scores".into(),
                });
            }
            let buffer_pos: BTreeMap<usize, usize> = self.buffer.iter().enumerate().map(|(k, &i)| (i, k)).collect();
            let mut revived = BTreeSet::new();
            for idx in by_camera.values() {
                let waiting: Vec<usize> = idx.iter().copied().filter(|i| buffer_pos.contains_key(i)).collect();
                for (i, j, p) in gated_matches(&waiting, ids.len(), |i, j| gm[(buffer_pos[&i], j)]) {
                    if p > self.config.theta_memory {
                        assigned[i] = Some(ids[j]);
                        revived.insert(ids[j]);
                        out.revived += 1;
                    }
                }
            }
            for id in revived {
                let entry = self.memory.take(id).expect("matched entry is in memory");
                self.active.push(entry.trajectory);
            }
        }

        // cross-view linking, then new trajectories
        for (&camera, idx) in &by_camera {
            let waiting: Vec<usize> = idx.iter().copied().filter(|&i| assigned[i].is_none()).collect();
            if waiting.is_empty() {
                continue;
            }
            let seen_here: BTreeSet<TrajectoryId> = idx.iter().filter_map(|&i| assigned[i]).collect();
            let mut linkable: BTreeMap<TrajectoryId, Vec<usize>> = BTreeMap::new();
            for (i, a) in assigned.iter().enumerate() {
                if let Some(id) = a {
                    if detections[i].frame.camera != camera && !seen_here.contains(id) {
                        linkable.entry(*id).or_default().push(i);
                    }
                }
            }
            let link_ids: Vec<TrajectoryId> = linkable.keys().copied().collect();
            let link_cols: Vec<&Vec<usize>> = linkable.values().collect();
            let score = |i: usize, j: usize| {
                let cols = link_cols[j];
                cols.iter().map(|&c| g[(i, n_cache + c)]).sum::<f64>() / cols.len() as f64
            };
            for (i, j, p) in gated_matches(&waiting, link_ids.len(), score) {
                if p > self.config.theta_window {
                    assigned[i] = Some(link_ids[j]);
                    out.linked += 1;
                }
            }
            for &i in &waiting {
                if assigned[i].is_none() {
                    let id = TrajectoryId(self.next_id);
                    self.next_id += 1;
                    self.active.push(ActiveTrajectory {
                        id,
                        members: Vec::new(),
                        history: VecDeque::new(),
                        last_seen: time,
                    });
                    assigned[i] = Some(id);
                    out.created += 1;
                }
            }
        }

        // commit
        let slot: BTreeMap<TrajectoryId, usize> = self.active.iter().enumerate().map(|(k, t)| (t.id, k)).collect();
        let mut cached = Vec::with_capacity(n);
        for (i, det) in detections.iter().enumerate() {
            let id = assigned[i].expect("every detection is resolved");
            let k = *slot.get(&id).ok_or(Error::DanglingTrajectory(id.0))?;
            self.active[k].push(det, feats.row(i), self.config.n_mem);
            cached.push(CachedTarget {
                obs: det.clone(),
                feature: feats.row(i).to_vec(),
                trajectory: Some(id),
            });
            out.ids.push(id);
        }
        self.cache.steps.push_back((time, cached));
        Ok(out)
    }

    /// Moves trajectories without any member at or after `start` out of the
    /// active set.
    fn retire(&mut self, start: u32) -> Result<()> {
        let (keep, gone): (Vec<_>, Vec<_>) = std::mem::take(&mut self.active)
            .into_iter()
            .partition(|t| t.last_seen >= start);
        self.active = keep;
        for t in gone {
            if !self.config.memory_enabled {
                self.finished.push(t);
                continue;
            }
            let history: Vec<Vec<f64>> = t.history.iter().cloned().collect();
            let feature = memory_feature(&history, self.config.n_mem)?;
            if let Some(evicted) = self.memory.insert(MemoryEntry { trajectory: t, feature }) {
                self.finished.push(evicted.trajectory);
            }
        }
        Ok(())
    }

    /// Every trajectory (active, in memory, or evicted) with at least
    /// `min_traj_len` members, ordered by id.
    pub fn finalize(&self) -> Vec<Trajectory> {
        let mut out: Vec<Trajectory> = self
            .active
            .iter()
            .chain(self.memory.entries.iter().map(|e| &e.trajectory))
            .chain(&self.finished)
            .filter(|t| t.members.len() >= self.config.min_traj_len)
            .map(|t| t.clone().into_trajectory())
            .collect();
        out.sort_by_key(|t| t.id);
        out
    }
}

fn group_by_camera(detections: &[TargetObs]) -> BTreeMap<u32, Vec<usize>> {
    let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        m.entry(d.frame.camera).or_default().push(i);
    }
    m
}

/// Gates `score(i, j)` for every query in `queries` against `cols` columns,
/// runs the assignment on the probabilities and returns `(query, column,
/// probability)` for each matched pair.
fn gated_matches(queries: &[usize], cols: usize, score: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize, f64)> {
    if queries.is_empty() || cols == 0 {
        return Vec::new();
    }
    let mut probs = Mat::zeros(queries.len(), cols);
    for (r, &i) in queries.iter().enumerate() {
        let row: Vec<f64> = (0..cols).map(|j| score(i, j)).collect();
        let (p, _) = gate_scores(&row);
        probs.row_mut(r).copy_from_slice(&p);
    }
    hungarian(&probs)
        .pairs()
        .map(|(r, j)| (queries[r], j, probs[(r, j)]))
        .collect()
}

/// `M[i][j] = 1` iff row `i` belongs to trajectory `columns[j]`.
pub fn membership_matrix(rows: &[Option<TrajectoryId>], columns: &[TrajectoryId]) -> Result<Mat> {
    let index: BTreeMap<TrajectoryId, usize> = columns.iter().enumerate().map(|(j, id)| (*id, j)).collect();
    if index.len() != columns.len() {
        return Err(Error::Config("duplicate trajectory column".into()));
    }
    let mut m = Mat::zeros(rows.len(), columns.len());
    for (i, r) in rows.iter().enumerate() {
        if let Some(id) = r {
            let j = *index.get(id).ok_or(Error::DanglingTrajectory(id.0))?;
            m[(i, j)] = 1.0;
        }
    }
    Ok(m)
}

/// `G·M` with every column divided by its member count. Columns without
/// members stay zero.
pub fn trajectory_scores(g: &Mat, m: &Mat) -> Result<Mat> {
    if g.cols() != m.rows() {
        return Err(shape_err("trajectory_scores", g.cols(), m.rows()));
    }
    let mut out = g.matmul(m)?;
    let counts = m.col_sums();
    for r in 0..out.rows() {
        for (j, &c) in counts.iter().enumerate() {
            if c > 0.0 {
                out[(r, j)] /= c;
            }
        }
    }
    Ok(out)
}

/// Softmax over one query's trajectory scores plus the null score; returns
/// `(per-trajectory probabilities, null probability)`.
pub fn gate_scores(row: &[f64]) -> (Vec<f64>, f64) {
    softmax_with_null(row, NULL_SCORE)
}

/// Mean of the `min(n_mem, len)` most recent features (the last ones).
pub fn memory_feature(history: &[Vec<f64>], n_mem: usize) -> Result<Vec<f64>> {
    let Some(last) = history.last() else {
        return Err(Error::EmptyHistory);
    };
    let k = n_mem.max(1).min(history.len());
    let mut out = vec![0.0; last.len()];
    for h in &history[history.len() - k..] {
        if h.len() != out.len() {
            return Err(shape_err("memory feature", out.len(), h.len()));
        }
        for (o, v) in out.iter_mut().zip(h) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= k as f64;
    }
    Ok(out)
}
