//! Full-model gradient checks at the desk dimensions.

use gmt_core::assoc::gradcheck::check_gradients;
use gmt_core::assoc::{loss_gradients, GmtParams};
use gmt_core::assoc::train::{label_step, window_batch, TrainingScene};
use gmt_core::features::FeatureDims;
use gmt_core::params::Parameters;
use gmt_core::simworld::{generate_scene, render_detections, EmbeddingModel, NoiseModel, WorldConfig};

#[test]
fn simulated_window_gradients_match_finite_differences() {
    let cfg = WorldConfig::two_camera(4, 20, 5);
    let gt = generate_scene(&cfg).unwrap();
    let emb = EmbeddingModel::random(32, 4, 2, 0.1, 0.05, 6);
    let noise = NoiseModel {
        jitter_px: 3.0,
        p_miss: 0.1,
        fp_rate: 0.5,
        occlusions: vec![],
    };
    let steps = render_detections(&gt, &noise, &emb, 7).unwrap();
    let scene = TrainingScene { dims: gt.dims, gt, steps };
    let labels: Vec<_> = scene.steps.iter().map(|s| label_step(s, &scene.gt)).collect();
    let batch = window_batch(&scene, &labels, 4, 3, 30, 32).unwrap();
    assert!(batch.len() >= 10 && batch.labels.iter().any(Option::is_none));

    let mut params = GmtParams::init(&FeatureDims::desk(), 8, 11).unwrap();
    for (k, t) in params.tensors_mut().into_iter().enumerate() {
        for (i, v) in t.data.iter_mut().enumerate() {
            *v += 0.05 * ((k * 31 + i) as f64 * 0.7).sin();
        }
    }
    let (_, grad) = loss_gradients(&batch, &params).unwrap();
    let rep = check_gradients(&batch, &params, &grad, 1e-5, Some(6), 3).unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    assert!(rep.kinks * 50 <= rep.checked, "{rep:?}");
}
