//! Gradient-based training over randomly sampled windows of labeled
//! detections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss_gradients, GmtParams, TrainingBatch};
use crate::error::{Error, Result};
use crate::features::RawBatch;
use crate::geom::{assign_targets_to_gt, FrameRef, SceneDims, TargetObs, TrajectoryId};
use crate::params::Parameters;
use crate::simworld::{GroundTruthScene, TimeStep};

/// One labeled scenario: detections per time step plus the ground truth used
/// to label them.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub dims: SceneDims,
    pub gt: GroundTruthScene,
    pub steps: Vec<TimeStep>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum (0 for plain descent).
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Consecutive frames per sampled window.
    pub window_frames: u32,
    /// Frames are dropped from the end of a window beyond this many targets.
    pub max_targets: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            iterations: 600,
            seed: 7,
            optimizer: OptimizerKind::adam(),
            window_frames: 12,
            max_targets: 200,
            grad_clip: Some(5.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: GmtParams,
    /// Loss of the sampled batch at every iteration, before its update.
    pub loss_curve: Vec<f64>,
}

/// Labels every detection of a time step by IoU against the ground truth of
/// its frame.
pub fn label_step(step: &TimeStep, gt: &GroundTruthScene) -> Vec<Option<TrajectoryId>> {
    let mut labels = vec![None; step.obs.len()];
    let mut cameras: Vec<u32> = step.obs.iter().map(|o| o.frame.camera).collect();
    cameras.sort_unstable();
    cameras.dedup();
    for c in cameras {
        let frame = FrameRef::new(c, step.time);
        let idx: Vec<usize> = (0..step.obs.len()).filter(|&i| step.obs[i].frame == frame).collect();
        let boxes: Vec<_> = idx.iter().map(|&i| step.obs[i].bbox).collect();
        for (k, l) in assign_targets_to_gt(&boxes, &gt.boxes_in(frame)).into_iter().enumerate() {
            labels[idx[k]] = l;
        }
    }
    labels
}

/// Builds a batch from frames `start..start + frames` of one scene.
pub fn window_batch(
    scene: &TrainingScene,
    labels: &[Vec<Option<TrajectoryId>>],
    start: usize,
    frames: usize,
    max_targets: usize,
    d_raw: usize,
) -> Result<TrainingBatch> {
    let mut obs: Vec<&TargetObs> = Vec::new();
    let mut lab = Vec::new();
    for (step, step_labels) in scene.steps.iter().zip(labels).skip(start).take(frames) {
        if !obs.is_empty() && obs.len() + step.obs.len() > max_targets {
            break;
        }
        obs.extend(step.obs.iter());
        lab.extend(step_labels.iter().copied());
    }
    Ok(TrainingBatch {
        raw: RawBatch::from_obs(&obs, &scene.dims, d_raw)?,
        frames: obs.iter().map(|o| o.frame).collect(),
        labels: lab,
    })
}

/// Trains `init` on windows sampled from `scenes`. Deterministic in
/// `cfg.seed`.
pub fn train(scenes: &[TrainingScene], init: GmtParams, cfg: &TrainConfig) -> Result<TrainOutput> {
    init.validate()?;
    if cfg.iterations == 0 {
        return Ok(TrainOutput {
            params: init,
            loss_curve: Vec::new(),
        });
    }
    let labels: Vec<Vec<Vec<Option<TrajectoryId>>>> = scenes
        .iter()
        .map(|s| s.steps.iter().map(|st| label_step(st, &s.gt)).collect())
        .collect();
    let usable: Vec<usize> = (0..scenes.len())
        .filter(|&i| scenes[i].steps.iter().any(|s| !s.obs.is_empty()))
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyData("no detections in any training scene".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d_raw = init.features.dims().d_raw;
    let mut params = init;
    let mut opt = Optimizer::new(cfg.optimizer, &params);
    let mut loss_curve = Vec::with_capacity(cfg.iterations);
    let win = cfg.window_frames.max(1) as usize;

    for it in 0..cfg.iterations {
        let batch = loop {
            let s = usable[rng.random_range(0..usable.len())];
            let steps = scenes[s].steps.len();
            let start = rng.random_range(0..steps.saturating_sub(win) + 1);
            let b = window_batch(&scenes[s], &labels[s], start, win, cfg.max_targets, d_raw)?;
            if b.labels.iter().any(Option::is_some) {
                break b;
            }
        };
        let (report, mut grad) = loss_gradients(&batch, &params).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { iteration: it, detail },
            e => e,
        })?;
        loss_curve.push(report.total);
        if let Some(clip) = cfg.grad_clip {
            let norm = grad.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip {
                grad.scale_all(clip / norm);
            }
        }
        opt.step(&mut params, &grad, cfg.learning_rate);
        if !params.all_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                detail: "parameters diverged".into(),
            });
        }
    }
    Ok(TrainOutput { params, loss_curve })
}

struct Optimizer {
    kind: OptimizerKind,
    m: GmtParams,
    v: GmtParams,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, like: &GmtParams) -> Self {
        Self {
            kind,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut GmtParams, grad: &GmtParams, lr: f64) {
        self.t += 1;
        let grads = grad.tensors();
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(&grads).zip(&mut ms).zip(&mut vs) {
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((w, gi), mi) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()) {
                        *mi = momentum * *mi + gi;
                        *w -= lr * *mi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    for (((w, gi), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
