//! Run configuration, read from a TOML file.
//!
//! ```toml
//! [scenario]
//! identities = 5
//! frames = 100
//! seed = 11
//!
//! [scenario.embedding]
//! seed = 12
//!
//! [scenario.noise]
//! seed = 13
//!
//! [model]
//! seed = 14
//!
//! [train]
//! seed = 15
//! ```
//!
//! Every section and key other than the seeds has a default. Unknown keys
//! are rejected. `MTMC_SEED_OVERRIDE`, when set, replaces every seed.

use std::fs;
use std::path::{Path, PathBuf};

use gmt_core::assoc::{OptimizerKind, TrainConfig, TrainingScene};
use gmt_core::features::FeatureDims;
use gmt_core::metrics::EvalConfig;
use gmt_core::simworld::{
    generate_scene, render_detections, Affine, EmbeddingModel, GroundTruthScene, NoiseModel, Occlusion, TimeStep,
    WorldConfig,
};
use gmt_core::tracker::TrackerConfig;
use gmt_core::{SceneDims, TrajectoryId};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_OVERRIDE_ENV: &str = "MTMC_SEED_OVERRIDE";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioSection,
    pub model: ModelSection,
    pub tracker: TrackerSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub identities: u32,
    pub frames: u32,
    pub seed: Option<u64>,
    pub width: f64,
    pub height: f64,
    pub ground_size: f64,
    /// One `[a, b, c, d, e, f]` ground-to-image map per camera; the two-camera
    /// layout when absent.
    pub affines: Option<Vec<[f64; 6]>>,
    pub speed_range: [f64; 2],
    pub box_width_range: [f64; 2],
    pub box_height_range: [f64; 2],
    pub entry_spread: u32,
    pub exit_spread: u32,
    pub embedding: EmbeddingSection,
    pub noise: NoiseSection,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let w = WorldConfig::two_camera(5, 100, 0);
        Self {
            identities: w.identities,
            frames: w.frames,
            seed: None,
            width: w.width,
            height: w.height,
            ground_size: w.ground_size,
            affines: None,
            speed_range: [w.speed_range.0, w.speed_range.1],
            box_width_range: [w.box_width_range.0, w.box_width_range.1],
            box_height_range: [w.box_height_range.0, w.box_height_range.1],
            entry_spread: 0,
            exit_spread: 0,
            embedding: EmbeddingSection::default(),
            noise: NoiseSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub dim: usize,
    /// Norm of the per-camera appearance offset.
    pub camera_bias: f64,
    pub sigma: f64,
    pub seed: Option<u64>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            dim: 32,
            camera_bias: 0.1,
            sigma: 0.05,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub jitter_px: f64,
    pub p_miss: f64,
    pub fp_rate: f64,
    pub seed: Option<u64>,
    pub occlusions: Vec<OcclusionSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionSpec {
    pub identity: u64,
    pub camera: u32,
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_raw: usize,
    pub d_roi: usize,
    pub d_st: usize,
    pub hidden_roi: usize,
    pub hidden_st: usize,
    pub heads: usize,
    pub seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = FeatureDims::desk();
        Self {
            d_raw: d.d_raw,
            d_roi: d.d_roi,
            d_st: d.d_st,
            hidden_roi: d.hidden_roi,
            hidden_st: d.hidden_st,
            heads: 8,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerSection {
    pub window: u32,
    pub theta_window: f64,
    pub theta_memory: f64,
    pub n_mem: usize,
    pub min_traj_len: usize,
    pub memory_enabled: bool,
    /// 0 for an unbounded memory bank.
    pub memory_capacity: usize,
}

impl Default for TrackerSection {
    fn default() -> Self {
        let t = TrackerConfig::default();
        Self {
            window: t.window,
            theta_window: t.theta_window,
            theta_memory: t.theta_memory,
            n_mem: t.n_mem,
            min_traj_len: t.min_traj_len,
            memory_enabled: t.memory_enabled,
            memory_capacity: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: Option<u64>,
    pub optimizer: OptimizerName,
    /// Only used by `sgd`.
    pub momentum: f64,
    pub window_frames: u32,
    pub max_targets: usize,
    /// 0 disables clipping.
    pub grad_clip: f64,
    /// Number of generated training scenes, disjoint from the tracked one.
    pub scenes: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            iterations: 300,
            seed: None,
            optimizer: OptimizerName::Adam,
            momentum: 0.9,
            window_frames: t.window_frames,
            max_targets: t.max_targets,
            grad_clip: t.grad_clip.unwrap_or(0.0),
            scenes: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub iou_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_threshold: EvalConfig::default().iou_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub weights: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// A generated scenario: ground truth and per-frame detections.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub gt: GroundTruthScene,
    pub steps: Vec<TimeStep>,
}

fn seed(v: Option<u64>, key: &str) -> std::result::Result<u64, String> {
    v.ok_or_else(|| format!("missing seed `{key}`"))
}

impl RunConfig {
    /// Reads, applies the seed override from the environment, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_owned(),
            msg: format!("cannot read: {e}"),
        })?;
        let over = std::env::var(SEED_OVERRIDE_ENV).ok();
        Self::parse(&text, over.as_deref()).map_err(|msg| CliError::Config {
            path: path.to_owned(),
            msg,
        })
    }

    pub fn parse(text: &str, seed_override: Option<&str>) -> std::result::Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        if let Some(v) = seed_override {
            let s: u64 = v
                .trim()
                .parse()
                .map_err(|_| format!("{SEED_OVERRIDE_ENV}={v:?} is not an unsigned integer"))?;
            cfg.set_all_seeds(s);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_all_seeds(&mut self, s: u64) {
        self.scenario.seed = Some(s);
        self.scenario.embedding.seed = Some(s);
        self.scenario.noise.seed = Some(s);
        self.model.seed = Some(s);
        self.train.seed = Some(s);
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.seeds()?;
        self.world().validate().map_err(|e| e.to_string())?;
        self.noise().validate(self.scenario.frames).map_err(|e| e.to_string())?;
        let e = &self.scenario.embedding;
        if e.dim < 2 || !(e.sigma >= 0.0) || !(e.camera_bias >= 0.0) {
            return Err(format!("invalid scenario.embedding {e:?}"));
        }
        if self.model.d_raw != e.dim {
            return Err(format!(
                "model.d_raw = {} must equal scenario.embedding.dim = {}",
                self.model.d_raw, e.dim
            ));
        }
        let dims = self.feature_dims();
        if [dims.d_roi, dims.hidden_roi, dims.hidden_st].contains(&0) {
            return Err("model dimensions must be positive".into());
        }
        gmt_core::assoc::AssocConfig::new(dims.fused(), self.model.heads)
            .validate()
            .map_err(|e| e.to_string())?;
        self.tracker_config().validate().map_err(|e| e.to_string())?;
        self.eval_config().validate().map_err(|e| e.to_string())?;
        let t = &self.train;
        if !(t.learning_rate > 0.0) || !(t.grad_clip >= 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return Err("train.learning_rate must be positive, grad_clip >= 0, momentum in [0, 1)".into());
        }
        if t.iterations > 0 && t.scenes == 0 {
            return Err("train.scenes must be at least 1".into());
        }
        Ok(())
    }

    /// `(world, embedding, noise, model, train)` seeds.
    pub fn seeds(&self) -> std::result::Result<[u64; 5], String> {
        Ok([
            seed(self.scenario.seed, "scenario.seed")?,
            seed(self.scenario.embedding.seed, "scenario.embedding.seed")?,
            seed(self.scenario.noise.seed, "scenario.noise.seed")?,
            seed(self.model.seed, "model.seed")?,
            seed(self.train.seed, "train.seed")?,
        ])
    }

    fn seeds_or_zero(&self) -> [u64; 5] {
        self.seeds().unwrap_or([0; 5])
    }

    pub fn world(&self) -> WorldConfig {
        let s = &self.scenario;
        let mut w = WorldConfig::two_camera(s.identities, s.frames, self.seeds_or_zero()[0]);
        if let Some(a) = &s.affines {
            w.affines = a.iter().map(|m| Affine(*m)).collect();
            w.cameras = a.len() as u32;
        }
        w.width = s.width;
        w.height = s.height;
        w.ground_size = s.ground_size;
        w.speed_range = (s.speed_range[0], s.speed_range[1]);
        w.box_width_range = (s.box_width_range[0], s.box_width_range[1]);
        w.box_height_range = (s.box_height_range[0], s.box_height_range[1]);
        w.entry_spread = s.entry_spread;
        w.exit_spread = s.exit_spread;
        w
    }

    pub fn scene_dims(&self) -> SceneDims {
        self.world().dims()
    }

    pub fn noise(&self) -> NoiseModel {
        let n = &self.scenario.noise;
        NoiseModel {
            jitter_px: n.jitter_px,
            p_miss: n.p_miss,
            fp_rate: n.fp_rate,
            occlusions: n
                .occlusions
                .iter()
                .map(|o| Occlusion {
                    identity: TrajectoryId(o.identity),
                    camera: o.camera,
                    start: o.start,
                    end: o.end,
                })
                .collect(),
        }
    }

    pub fn embedding(&self, seed: u64) -> EmbeddingModel {
        let e = &self.scenario.embedding;
        let w = self.world();
        EmbeddingModel::random(e.dim, w.identities, w.cameras, e.camera_bias, e.sigma, seed)
    }

    pub fn feature_dims(&self) -> FeatureDims {
        let m = &self.model;
        FeatureDims {
            d_raw: m.d_raw,
            d_roi: m.d_roi,
            d_st: m.d_st,
            hidden_roi: m.hidden_roi,
            hidden_st: m.hidden_st,
        }
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        let t = &self.tracker;
        TrackerConfig {
            window: t.window,
            stride: 1,
            theta_window: t.theta_window,
            theta_memory: t.theta_memory,
            n_mem: t.n_mem,
            min_traj_len: t.min_traj_len,
            memory_enabled: t.memory_enabled,
            memory_capacity: (t.memory_capacity > 0).then_some(t.memory_capacity),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            iterations: t.iterations,
            seed: self.seeds_or_zero()[4],
            optimizer: match t.optimizer {
                OptimizerName::Adam => OptimizerKind::adam(),
                OptimizerName::Sgd => OptimizerKind::Sgd { momentum: t.momentum },
            },
            window_frames: t.window_frames,
            max_targets: t.max_targets,
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            iou_threshold: self.eval.iou_threshold,
        }
    }

    /// The scenario described by the configuration.
    pub fn scenario(&self) -> Result<Scenario> {
        let [w, e, n, _, _] = self.seeds_or_zero();
        self.generate(w, e, n)
    }

    /// Training scenarios: same settings, seeds shifted away from the tracked
    /// scenario.
    pub fn training_scenes(&self) -> Result<Vec<TrainingScene>> {
        let [w, e, n, _, _] = self.seeds_or_zero();
        (1..=self.train.scenes as u64)
            .map(|k| {
                let off = k.wrapping_mul(1_000_003);
                let s = self.generate(w.wrapping_add(off), e.wrapping_add(off), n.wrapping_add(off))?;
                Ok(TrainingScene {
                    dims: s.gt.dims,
                    gt: s.gt,
                    steps: s.steps,
                })
            })
            .collect()
    }

    fn generate(&self, world_seed: u64, emb_seed: u64, noise_seed: u64) -> Result<Scenario> {
        let mut world = self.world();
        world.seed = world_seed;
        let gt = generate_scene(&world)?;
        let steps = render_detections(&gt, &self.noise(), &self.embedding(emb_seed), noise_seed)?;
        Ok(Scenario { gt, steps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEEDS: &str = "[scenario]\nseed = 1\n[scenario.embedding]\nseed = 2\n[scenario.noise]\nseed = 3\n[model]\nseed = 4\n[train]\nseed = 5\n";

    #[test]
    fn defaults_with_explicit_seeds() {
        let cfg = RunConfig::parse(SEEDS, None).unwrap();
        assert_eq!(cfg.seeds().unwrap(), [1, 2, 3, 4, 5]);
        assert_eq!(cfg.tracker_config(), TrackerConfig::default());
        assert_eq!(cfg.feature_dims(), FeatureDims::desk());
        assert_eq!(cfg.scene_dims().cameras, 2);
    }

    #[test]
    fn missing_seed_is_an_error() {
        let err = RunConfig::parse("[scenario]\nseed = 1\n", None).unwrap_err();
        assert!(err.contains("scenario.embedding.seed"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse(&format!("{SEEDS}[tracker]\nwindw = 3\n"), None).unwrap_err();
        assert!(err.contains("windw"), "{err}");
        let err = RunConfig::parse(&format!("{SEEDS}[trackr]\n"), None).unwrap_err();
        assert!(err.contains("trackr"), "{err}");
    }

    #[test]
    fn seed_override_replaces_every_seed() {
        let cfg = RunConfig::parse("", Some("77")).unwrap();
        assert_eq!(cfg.seeds().unwrap(), [77; 5]);
        assert!(RunConfig::parse(SEEDS, Some("x")).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for extra in [
            "[tracker]\ntheta_window = 2.0\n",
            "[tracker]\nwindow = 0\n",
            "[model]\nseed = 4\nd_raw = 16\n",
            "[model]\nseed = 4\nheads = 5\n",
            "[eval]\niou_threshold = 0.0\n",
        ] {
            let text = SEEDS.replace("[model]\nseed = 4\n", "") + extra;
            let text = if extra.starts_with("[model]") { text } else { format!("{text}[model]\nseed = 4\n") };
            assert!(RunConfig::parse(&text, None).is_err(), "{extra}");
        }
    }

    #[test]
    fn training_scenes_differ_from_the_tracked_scene() {
        let mut cfg = RunConfig::parse(SEEDS, None).unwrap();
        cfg.scenario.frames = 20;
        cfg.train.scenes = 2;
        let tracked = cfg.scenario().unwrap();
        let train = cfg.training_scenes().unwrap();
        assert_eq!(train.len(), 2);
        assert_ne!(train[0].gt, tracked.gt);
        assert_ne!(train[0].gt, train[1].gt);
    }
}
