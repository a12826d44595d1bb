//! Deterministic synthetic multi-camera scenarios.
//!
//! Agents walk between random waypoints on a shared ground plane. Each camera
//! sees the plane through its own affine map, so the same agent shows up in
//! several views with different geometry. Detections are rendered from the
//! ground truth with optional jitter, misses, scripted occlusions, false
//! positives and identity-conditioned appearance vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::{BoxPx, FrameRef, SceneDims, TargetObs, Trajectory, TrajectoryId};

/// Ground-to-image map `u = a0 x + a1 y + a2`, `v = a3 x + a4 y + a5`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let a = &self.0;
        (a[0] * x + a[1] * y + a[2], a[3] * x + a[4] * y + a[5])
    }

    pub fn determinant(&self) -> f64 {
        self.0[0] * self.0[4] - self.0[1] * self.0[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub cameras: u32,
    pub frames: u32,
    pub identities: u32,
    pub width: f64,
    pub height: f64,
    /// Side length of the square ground plane.
    pub ground_size: f64,
    pub affines: Vec<Affine>,
    /// Ground units per frame.
    pub speed_range: (f64, f64),
    pub box_width_range: (f64, f64),
    pub box_height_range: (f64, f64),
    /// Identity `i` enters uniformly within the first `entry_spread` frames
    /// and leaves uniformly within the last `exit_spread` frames.
    pub entry_spread: u32,
    pub exit_spread: u32,
    pub seed: u64,
}

impl WorldConfig {
    /// Two fully overlapping views of a 100x100 ground plane.
    pub fn two_camera(identities: u32, frames: u32, seed: u64) -> Self {
        Self {
            cameras: 2,
            frames,
            identities,
            width: 1920.0,
            height: 1080.0,
            ground_size: 100.0,
            affines: vec![
                Affine([16.0, 0.0, 160.0, 0.0, 7.0, 250.0]),
                Affine([0.0, -15.0, 1700.0, 6.0, 1.5, 280.0]),
            ],
            speed_range: (0.3, 1.2),
            box_width_range: (40.0, 80.0),
            box_height_range: (100.0, 180.0),
            entry_spread: 0,
            exit_spread: 0,
            seed,
        }
    }

    pub fn dims(&self) -> SceneDims {
        SceneDims {
            width: self.width,
            height: self.height,
            horizon: self.frames,
            cameras: self.cameras,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        if self.identities == 0 {
            return Err(Error::Config("identities must be at least 1".into()));
        }
        if self.affines.len() != self.cameras as usize {
            return Err(Error::Config(format!(
                "{} affine transforms for {} cameras",
                self.affines.len(),
                self.cameras
            )));
        }
        for (c, a) in self.affines.iter().enumerate() {
            if a.determinant().abs() < 1e-12 || !a.0.iter().all(|v| v.is_finite()) {
                return Err(Error::SingularTransform { camera: c + 1 });
            }
        }
        let ranges = [self.speed_range, self.box_width_range, self.box_height_range];
        if ranges.iter().any(|(lo, hi)| !(*lo >= 0.0 && lo <= hi)) || self.ground_size <= 0.0 {
            return Err(Error::Config("invalid speed/box/ground ranges".into()));
        }
        if self.entry_spread + self.exit_spread >= self.frames && self.entry_spread + self.exit_spread > 0 {
            return Err(Error::Config("entry/exit spread leaves no visible frames".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occlusion {
    pub identity: TrajectoryId,
    pub camera: u32,
    pub start: u32,
    pub end: u32,
}

impl Occlusion {
    pub fn covers(&self, id: TrajectoryId, frame: FrameRef) -> bool {
        self.identity == id && self.camera == frame.camera && (self.start..=self.end).contains(&frame.time)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseModel {
    pub jitter_px: f64,
    pub p_miss: f64,
    /// Mean false positives per camera frame.
    pub fp_rate: f64,
    pub occlusions: Vec<Occlusion>,
}

impl NoiseModel {
    pub fn validate(&self, frames: u32) -> Result<()> {
        if !(self.jitter_px >= 0.0) || !(0.0..=1.0).contains(&self.p_miss) || !(self.fp_rate >= 0.0) {
            return Err(Error::Config(format!("invalid noise model {self:?}")));
        }
        for o in &self.occlusions {
            if o.start < 1 || o.end > frames || o.start > o.end {
                return Err(Error::Config(format!("occlusion {o:?} outside [1, {frames}]")));
            }
        }
        Ok(())
    }
}

/// Identity-conditioned appearance generator standing in for a re-id network.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub dim: usize,
    /// Unit-norm anchor per identity; identity `i` uses `anchors[i - 1]`.
    pub anchors: Vec<Vec<f64>>,
    /// Additive bias per camera; camera `c` uses `camera_bias[c - 1]`.
    pub camera_bias: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl EmbeddingModel {
    /// Random anchors on the unit sphere and Gaussian camera biases of norm
    /// roughly `bias_scale`.
    pub fn random(dim: usize, identities: u32, cameras: u32, bias_scale: f64, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = (0..identities).map(|_| random_unit(&mut rng, dim)).collect();
        let camera_bias = (0..cameras)
            .map(|_| {
                random_unit(&mut rng, dim)
                    .into_iter()
                    .map(|v| v * bias_scale)
                    .collect()
            })
            .collect();
        Self {
            dim,
            anchors,
            camera_bias,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("appearance dimension must be at least 2".into()));
        }
        for a in self.anchors.iter().chain(&self.camera_bias) {
            if a.len() != self.dim {
                return Err(Error::Config("anchor/bias dimension mismatch".into()));
            }
        }
        if self.anchors.iter().any(|a| (norm(a) - 1.0).abs() > 1e-9) {
            return Err(Error::Config("anchors must be unit norm".into()));
        }
        Ok(())
    }

    /// Appearance of identity `id` seen from `camera`.
    pub fn sample(&self, id: TrajectoryId, camera: u32, rng: &mut impl Rng) -> Vec<f64> {
        let anchor = &self.anchors[(id.0 - 1) as usize];
        let bias = self.camera_bias.get((camera - 1) as usize);
        let mut v: Vec<f64> = anchor
            .iter()
            .enumerate()
            .map(|(k, a)| a + bias.map_or(0.0, |b| b[k]))
            .collect();
        if self.sigma > 0.0 {
            for x in &mut v {
                let z: f64 = StandardNormal.sample(rng);
                *x += self.sigma * z;
            }
        }
        normalize(&mut v);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub dims: SceneDims,
    pub trajectories: Vec<Trajectory>,
}

impl GroundTruthScene {
    /// Ground-truth boxes of one frame, in trajectory order.
    pub fn boxes_in(&self, frame: FrameRef) -> Vec<(TrajectoryId, BoxPx)> {
        self.trajectories
            .iter()
            .filter_map(|t| t.box_at(frame).map(|b| (t.id, *b)))
            .collect()
    }

    pub fn member_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Detections of one time step across all cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeStep {
    pub time: u32,
    pub obs: Vec<TargetObs>,
    /// Identity that produced each detection, `None` for false positives.
    pub sources: Vec<Option<TrajectoryId>>,
}

/// Generates ground-truth trajectories for every identity.
pub fn generate_scene(config: &WorldConfig) -> Result<GroundTruthScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let g = config.ground_size;
    let margin = 0.05 * g;
    let mut trajectories = Vec::with_capacity(config.identities as usize);

    for i in 1..=config.identities {
        let id = TrajectoryId(i as u64);
        let bw = sample_range(&mut rng, config.box_width_range);
        let bh = sample_range(&mut rng, config.box_height_range);
        let enter = 1 + if config.entry_spread > 0 { rng.random_range(0..=config.entry_spread) } else { 0 };
        let leave = config.frames - if config.exit_spread > 0 { rng.random_range(0..=config.exit_spread) } else { 0 };
        let mut pos = (rng.random_range(margin..g - margin), rng.random_range(margin..g - margin));
        let mut target = pos;
        let mut speed = 0.0;
        let mut traj = Trajectory::new(id);

        for t in 1..=config.frames {
            // advance along the walk every frame so the path does not depend on visibility
            let (dx, dy) = (target.0 - pos.0, target.1 - pos.1);
            let dist = (dx * dx + dy * dy).sqrt();
            if dist <= speed || speed == 0.0 {
                pos = if speed == 0.0 { pos } else { target };
                target = (rng.random_range(margin..g - margin), rng.random_range(margin..g - margin));
                speed = sample_range(&mut rng, config.speed_range);
            } else {
                pos = (pos.0 + dx / dist * speed, pos.1 + dy / dist * speed);
            }
            if t < enter || t > leave {
                continue;
            }
            for (c, affine) in config.affines.iter().enumerate() {
                let (u, v) = affine.apply(pos.0, pos.1);
                let full = BoxPx {
                    x1: u - bw / 2.0,
                    y1: v - bh,
                    x2: u + bw / 2.0,
                    y2: v,
                };
                // an agent more than half outside the view is not annotated
                if let Some(clipped) = full.clip(config.width, config.height) {
                    if clipped.area() >= 0.5 * full.area() {
                        traj.members.push((FrameRef::new(c as u32 + 1, t), clipped));
                    }
                }
            }
        }
        trajectories.push(traj.normalized()?);
    }
    Ok(GroundTruthScene {
        dims: config.dims(),
        trajectories,
    })
}

/// Renders noisy detections, one [`TimeStep`] per frame `1..=horizon`.
pub fn render_detections(
    scene: &GroundTruthScene,
    noise: &NoiseModel,
    emb: &EmbeddingModel,
    seed: u64,
) -> Result<Vec<TimeStep>> {
    noise.validate(scene.dims.horizon)?;
    emb.validate()?;
    if let Some(t) = scene.trajectories.iter().find(|t| t.id.0 == 0 || t.id.0 as usize > emb.anchors.len()) {
        return Err(Error::Config(format!("no appearance anchor for identity {}", t.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = scene.dims;
    let jitter = Normal::new(0.0, noise.jitter_px.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let fp_dist = if noise.fp_rate > 0.0 {
        Some(Poisson::new(noise.fp_rate).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut steps = Vec::with_capacity(dims.horizon as usize);

    for t in 1..=dims.horizon {
        let mut obs = Vec::new();
        let mut sources = Vec::new();
        for c in 1..=dims.cameras {
            let frame = FrameRef::new(c, t);
            for traj in &scene.trajectories {
                let Some(gt) = traj.box_at(frame) else { continue };
                // draw unconditionally so the random stream is independent of the script
                let missed = noise.p_miss > 0.0 && rng.random::<f64>() < noise.p_miss;
                let occluded = noise.occlusions.iter().any(|o| o.covers(traj.id, frame));
                let bbox = if noise.jitter_px > 0.0 {
                    let mut j = || jitter.sample(&mut rng);
                    let (a, b, cc, d) = (gt.x1 + j(), gt.y1 + j(), gt.x2 + j(), gt.y2 + j());
                    BoxPx {
                        x1: a.min(cc),
                        y1: b.min(d),
                        x2: a.max(cc),
                        y2: b.max(d),
                    }
                    .clip(dims.width, dims.height)
                } else {
                    Some(*gt)
                };
                let app = emb.sample(traj.id, c, &mut rng);
                if missed || occluded {
                    continue;
                }
                let Some(bbox) = bbox else { continue };
                obs.push(TargetObs {
                    bbox,
                    frame,
                    app,
                    det_score: 0.9,
                });
                sources.push(Some(traj.id));
            }
            if let Some(fp) = &fp_dist {
                let count = fp.sample(&mut rng) as usize;
                for _ in 0..count {
                    let w = rng.random_range(20.0..100.0f64).min(dims.width);
                    let h = rng.random_range(50.0..200.0f64).min(dims.height);
                    let x1 = rng.random_range(0.0..=(dims.width - w));
                    let y1 = rng.random_range(0.0..=(dims.height - h));
                    obs.push(TargetObs {
                        bbox: BoxPx {
                            x1,
                            y1,
                            x2: x1 + w,
                            y2: y1 + h,
                        },
                        frame,
                        app: random_unit(&mut rng, emb.dim),
                        det_score: rng.random_range(0.3..0.6),
                    });
                    sources.push(None);
                }
            }
        }
        steps.push(TimeStep { time: t, obs, sources });
    }
    Ok(steps)
}

/// Length of the scripted occlusion, in frames.
pub const SCRIPTED_OCCLUSION_FRAMES: u32 = 152;

/// Seed of the canned occlusion scene.
pub const SCRIPTED_OCCLUSION_SEED: u64 = 152;

/// World used by [`scripted_occlusion_scene`]: three identities seen by two
/// cameras for 230 frames.
pub fn scripted_occlusion_config() -> WorldConfig {
    let mut cfg = WorldConfig::two_camera(3, 230, SCRIPTED_OCCLUSION_SEED);
    cfg.speed_range = (0.2, 0.6);
    cfg
}

/// A two-camera scene in which identity 1 vanishes from every camera for
/// [`SCRIPTED_OCCLUSION_FRAMES`] consecutive frames (frames 31..=182), which
/// is longer than any window of at most 151 frames.
pub fn scripted_occlusion_scene(window: u32) -> Result<(GroundTruthScene, NoiseModel)> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let cfg = scripted_occlusion_config();
    let scene = generate_scene(&cfg)?;
    let start = 31;
    let end = start + SCRIPTED_OCCLUSION_FRAMES - 1;
    let occlusions = (1..=cfg.cameras)
        .map(|camera| Occlusion {
            identity: TrajectoryId(1),
            camera,
            start,
            end,
        })
        .collect();
    Ok((
        scene,
        NoiseModel {
            occlusions,
            ..NoiseModel::default()
        },
    ))
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if norm(&v) > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    fn emb(identities: u32, sigma: f64, bias: f64) -> EmbeddingModel {
        EmbeddingModel::random(16, identities, 2, bias, sigma, 5)
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::two_camera(5, 50, 9);
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
        let mut other = cfg.clone();
        other.seed = 10;
        assert_ne!(generate_scene(&cfg).unwrap(), generate_scene(&other).unwrap());
    }

    #[test]
    fn identity_count_matches_config() {
        let scene = generate_scene(&WorldConfig::two_camera(5, 20, 1)).unwrap();
        assert_eq!(scene.trajectories.len(), 5);
        let ids: Vec<_> = scene.trajectories.iter().map(|t| t.id.0).collect();
        assert_eq!(ids, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn all_boxes_within_frame() {
        for seed in 0..20 {
            let mut cfg = WorldConfig::two_camera(6, 80, seed);
            // second view only partly covers the ground plane
            cfg.affines[1] = Affine([0.0, -30.0, 2500.0, 14.0, 0.0, -200.0]);
            cfg.entry_spread = 10;
            cfg.exit_spread = 10;
            let scene = generate_scene(&cfg).unwrap();
            for t in &scene.trajectories {
                for (f, b) in &t.members {
                    assert!(b.within(cfg.width, cfg.height), "{b:?}");
                    assert!(b.area() > 0.0);
                    assert!(scene.dims.contains(*f));
                }
            }
        }
    }

    #[test]
    fn singular_affine_rejected() {
        let mut cfg = WorldConfig::two_camera(2, 10, 1);
        cfg.affines[1] = Affine([1.0, 2.0, 0.0, 2.0, 4.0, 0.0]);
        assert_eq!(generate_scene(&cfg), Err(Error::SingularTransform { camera: 2 }));
    }

    #[test]
    fn zero_noise_is_bijective() {
        let scene = generate_scene(&WorldConfig::two_camera(4, 30, 3)).unwrap();
        let steps = render_detections(&scene, &NoiseModel::default(), &emb(4, 0.05, 0.1), 1).unwrap();
        let total: usize = steps.iter().map(|s| s.obs.len()).sum();
        assert_eq!(total, scene.member_count());
        for s in &steps {
            for (o, src) in s.obs.iter().zip(&s.sources) {
                let t = &scene.trajectories[(src.unwrap().0 - 1) as usize];
                assert_eq!(t.box_at(o.frame), Some(&o.bbox));
                assert_eq!(o.frame.time, s.time);
            }
        }
    }

    #[test]
    fn occlusion_script_suppresses_detections() {
        let scene = generate_scene(&WorldConfig::two_camera(4, 200, 3)).unwrap();
        let noise = NoiseModel {
            occlusions: vec![Occlusion {
                identity: TrajectoryId(3),
                camera: 1,
                start: 10,
                end: 161,
            }],
            ..Default::default()
        };
        let steps = render_detections(&scene, &noise, &emb(4, 0.05, 0.1), 1).unwrap();
        for s in &steps {
            let hit = s
                .obs
                .iter()
                .zip(&s.sources)
                .any(|(o, src)| *src == Some(TrajectoryId(3)) && o.frame.camera == 1);
            assert_eq!(hit, !(10..=161).contains(&s.time) && scene.trajectories[2].box_at(FrameRef::new(1, s.time)).is_some());
        }
    }

    #[test]
    fn zero_sigma_gives_identical_appearance() {
        let scene = generate_scene(&WorldConfig::two_camera(3, 10, 3)).unwrap();
        let e = emb(3, 0.0, 0.0);
        let steps = render_detections(&scene, &NoiseModel::default(), &e, 1).unwrap();
        for s in &steps {
            for (o, src) in s.obs.iter().zip(&s.sources) {
                let anchor = &e.anchors[(src.unwrap().0 - 1) as usize];
                for (a, b) in o.app.iter().zip(anchor) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
        // inter-identity dot products equal anchor dot products
        let a = &steps[0].obs[0];
        let b = steps[0].obs.iter().zip(&steps[0].sources).find(|(_, s)| **s != steps[0].sources[0]).unwrap().0;
        let (ia, ib) = (steps[0].sources[0].unwrap(), steps[0].sources[steps[0].obs.iter().position(|o| o == b).unwrap()].unwrap());
        let expected = dot(&e.anchors[(ia.0 - 1) as usize], &e.anchors[(ib.0 - 1) as usize]);
        assert!((dot(&a.app, &b.app) - expected).abs() < 1e-15);
    }

    #[test]
    fn false_positives_are_unlabeled_and_in_frame() {
        let scene = generate_scene(&WorldConfig::two_camera(2, 40, 3)).unwrap();
        let noise = NoiseModel {
            fp_rate: 1.5,
            jitter_px: 3.0,
            p_miss: 0.1,
            ..Default::default()
        };
        let steps = render_detections(&scene, &noise, &emb(2, 0.05, 0.1), 8).unwrap();
        assert_eq!(steps, render_detections(&scene, &noise, &emb(2, 0.05, 0.1), 8).unwrap());
        let fps = steps.iter().flat_map(|s| &s.sources).filter(|s| s.is_none()).count();
        assert!(fps > 0);
        for s in &steps {
            for o in &s.obs {
                assert!(o.bbox.within(1920.0, 1080.0));
                assert!((norm(&o.app) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scripted_occlusion_exceeds_window() {
        for w in [60, 151] {
            let (scene, noise) = scripted_occlusion_scene(w).unwrap();
            let o = noise.occlusions[0];
            assert!(o.end - o.start + 1 > w);
            assert_eq!(o.end - o.start + 1, SCRIPTED_OCCLUSION_FRAMES);
            assert_eq!(noise.occlusions.len(), scene.dims.cameras as usize);
        }
        assert_eq!(scripted_occlusion_scene(60).unwrap(), scripted_occlusion_scene(60).unwrap());
        // the occluded identity is visible before and after the gap
        let (scene, _) = scripted_occlusion_scene(60).unwrap();
        let t1 = &scene.trajectories[0];
        assert!(t1.members.iter().any(|(f, _)| f.time < 31));
        assert!(t1.members.iter().any(|(f, _)| f.time > 182));
    }
}
