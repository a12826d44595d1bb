//! Simulation, training, tracking and scoring through the library API.

use std::collections::{BTreeMap, BTreeSet};

use gmt_core::assoc::{train, GmtParams, TrainConfig, TrainingScene};
use gmt_core::features::FeatureDims;
use gmt_core::metrics::{evaluate, EvalConfig};
use gmt_core::simworld::{
    generate_scene, render_detections, scripted_occlusion_config, scripted_occlusion_scene, EmbeddingModel,
    NoiseModel, WorldConfig, SCRIPTED_OCCLUSION_FRAMES,
};
use gmt_core::tracker::{TrackerConfig, TrackerState};

fn scene(seed: u64) -> TrainingScene {
    let cfg = WorldConfig::two_camera(5, 100, seed);
    let gt = generate_scene(&cfg).unwrap();
    let emb = EmbeddingModel::random(32, 5, 2, 0.1, 0.05, seed + 1);
    let steps = render_detections(&gt, &NoiseModel::default(), &emb, seed + 2).unwrap();
    TrainingScene { dims: gt.dims, gt, steps }
}

fn trained() -> GmtParams {
    let scenes: Vec<_> = (0..4).map(|k| scene(1000 + 10 * k)).collect();
    let init = GmtParams::init(&FeatureDims::desk(), 8, 7).unwrap();
    let cfg = TrainConfig {
        iterations: 300,
        ..Default::default()
    };
    let out = train(&scenes, init, &cfg).unwrap();
    let c = &out.loss_curve;
    assert!(c[c.len() - 20..].iter().sum::<f64>() < c[..20].iter().sum::<f64>() / 10.0);
    out.params
}

#[test]
fn trained_model_tracks_held_out_scene_and_survives_long_occlusion() {
    let params = trained();

    let test = scene(42);
    let mut st = TrackerState::new(TrackerConfig::default(), test.dims).unwrap();
    for s in &test.steps {
        st.step(s.time, &s.obs, &params).unwrap();
    }
    let pred = st.finalize();
    let sc = evaluate(&test.gt.trajectories, &pred, &EvalConfig::default());
    assert!(sc.cvma.unwrap() >= 0.95 && sc.cvidf1.unwrap() >= 0.95, "{sc:?}");

    // identity 1 vanishes from both cameras for longer than the window
    let (gt, noise) = scripted_occlusion_scene(60).unwrap();
    let wc = scripted_occlusion_config();
    let emb = EmbeddingModel::random(32, wc.identities, wc.cameras, 0.1, 0.05, 99);
    let steps = render_detections(&gt, &noise, &emb, 100).unwrap();
    let gap_end = 30 + SCRIPTED_OCCLUSION_FRAMES;
    for memory in [true, false] {
        let cfg = TrackerConfig {
            memory_enabled: memory,
            ..Default::default()
        };
        let mut st = TrackerState::new(cfg, gt.dims).unwrap();
        let mut ids: BTreeMap<(bool, u64), BTreeSet<u64>> = BTreeMap::new();
        for s in &steps {
            let out = st.step(s.time, &s.obs, &params).unwrap();
            for (src, id) in s.sources.iter().zip(&out.ids) {
                if let Some(src) = src {
                    ids.entry((s.time > gap_end, src.0)).or_default().insert(id.0);
                }
            }
        }
        let before = &ids[&(false, 1)];
        let after = &ids[&(true, 1)];
        assert_eq!(before.len(), 1);
        assert_eq!(after.len(), 1);
        assert_eq!(before == after, memory, "memory {memory}: {before:?} then {after:?}");
        // the other identities are never disturbed
        for who in [2, 3] {
            assert_eq!(ids[&(false, who)].len(), 1);
            assert_eq!(ids[&(false, who)], ids[&(true, who)]);
        }
    }
}
