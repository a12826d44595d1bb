//! Global association transformer and its training objective.
//!
//! During training every target in a window is both a query and a key
//! (`Q = F`), so the similarity matrix is square. Gradients are obtained by
//! reverse accumulation through every layer, including the two feature
//! encoders, and are validated against central finite differences in
//! [`gradcheck`].

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod train;

pub use loss::{
    association_loss, build_gt_association, loss_grad_scores, per_frame_softmax, AssocProbs, FrameGroups, GtAssoc,
    LossReport, SimilarityMatrix, LOG_CLAMP, NULL_SCORE,
};
pub use model::{
    association_scores, decoder_forward, encoder_forward, similarity_scores, AssocConfig, AssocModelParams,
    GmtParams,
};
pub use train::{train, OptimizerKind, TrainConfig, TrainOutput, TrainingScene};

use crate::error::{shape_err, Error, Result};
use crate::features::{fused_backward, fused_batch, RawBatch};
use crate::geom::{FrameRef, TrajectoryId};
use crate::linalg::Mat;
use crate::params::Parameters;
use model::{decoder_backward, encoder_backward};

/// A labeled window of targets.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub raw: RawBatch,
    pub frames: Vec<FrameRef>,
    pub labels: Vec<Option<TrajectoryId>>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyData("training batch has no targets".into()));
        }
        if self.raw.len() != self.len() || self.labels.len() != self.len() {
            return Err(shape_err(
                "training batch",
                self.len(),
                format!("{} raw / {} labels", self.raw.len(), self.labels.len()),
            ));
        }
        Ok(())
    }
}

/// Encoder, decoder with `Q = F`, similarity and per-frame softmax.
pub fn forward_training(f: &Mat, frames: &[FrameRef], params: &AssocModelParams) -> Result<(SimilarityMatrix, AssocProbs)> {
    let g = association_scores(f, f, params)?;
    let sim = SimilarityMatrix::new(g, frames.to_vec(), frames.to_vec())?;
    let probs = per_frame_softmax(&sim);
    Ok((sim, probs))
}

/// Loss of a batch under `params`, forward only.
pub fn batch_loss(batch: &TrainingBatch, params: &GmtParams) -> Result<LossReport> {
    batch.validate()?;
    let (f, _) = fused_batch(&batch.raw, &params.features)?;
    let (_, probs) = forward_training(&f, &batch.frames, &params.assoc)?;
    let gt = build_gt_association(&batch.labels, &batch.labels, &probs.groups);
    association_loss(&probs, &gt)
}

/// Loss and exact gradients with respect to every learnable value.
pub fn loss_gradients(batch: &TrainingBatch, params: &GmtParams) -> Result<(LossReport, GmtParams)> {
    loss_gradients_scaled(batch, params, 1.0)
}

/// Gradients of `scale * loss`.
pub fn loss_gradients_scaled(batch: &TrainingBatch, params: &GmtParams, scale: f64) -> Result<(LossReport, GmtParams)> {
    batch.validate()?;
    let p = &params.assoc;
    let (f, feat_cache) = fused_batch(&batch.raw, &params.features)?;
    let (f_e, enc_cache) = encoder_forward(&f, p)?;
    let (q_d, dec_cache) = decoder_forward(&f, &f_e, p)?;
    let g = similarity_scores(&q_d, &f_e)?;
    let sim = SimilarityMatrix::new(g, batch.frames.clone(), batch.frames.clone())?;
    let probs = per_frame_softmax(&sim);
    let gt = build_gt_association(&batch.labels, &batch.labels, &probs.groups);
    let report = association_loss(&probs, &gt)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            detail: format!("loss {} on a batch of {} targets", report.total, batch.len()),
        });
    }

    let mut grad = params.zeros_like();
    let mut dg = loss_grad_scores(&probs, &gt)?;
    dg.scale(scale);
    // G = Q_d F_eᵀ
    let d_qd = dg.matmul(&f_e)?;
    let mut d_fe = dg.t_matmul(&q_d)?;
    let (d_q, d_fe_dec) = decoder_backward(p, &dec_cache, &d_qd, &mut grad.assoc)?;
    d_fe.add_assign(&d_fe_dec)?;
    let mut d_f = encoder_backward(p, &enc_cache, &d_fe, &mut grad.assoc)?;
    d_f.add_assign(&d_q)?;
    fused_backward(&params.features, &feat_cache, &d_f, &mut grad.features)?;
    debug_assert!(grad.all_finite());
    Ok((report, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureDims, ST_DIM};

    fn batch(n: usize) -> TrainingBatch {
        TrainingBatch {
            raw: RawBatch {
                app: Mat::from_vec(n, 4, (0..n * 4).map(|k| (k as f64 * 0.37).sin()).collect()).unwrap(),
                st: Mat::from_vec(n, ST_DIM, (0..n * ST_DIM).map(|k| (k as f64 * 0.11).cos().abs()).collect()).unwrap(),
            },
            frames: (0..n as u32).map(|k| FrameRef::new(1 + k % 2, 1 + k / 2)).collect(),
            labels: (0..n as u64).map(|k| Some(TrajectoryId(k / 2))).collect(),
        }
    }

    fn params() -> GmtParams {
        let dims = FeatureDims {
            d_raw: 4,
            d_roi: 4,
            d_st: 2,
            hidden_roi: 4,
            hidden_st: 2,
        };
        GmtParams::init(&dims, 2, 9).unwrap()
    }

    #[test]
    fn malformed_batches_are_rejected() {
        let p = params();
        let mut b = batch(0);
        assert!(matches!(batch_loss(&b, &p), Err(Error::EmptyData(_))));
        b = batch(4);
        b.labels.pop();
        assert!(matches!(batch_loss(&b, &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradients_scale_with_the_loss() {
        let (b, p) = (batch(6), params());
        let (r1, g1) = loss_gradients(&b, &p).unwrap();
        let (r3, g3) = loss_gradients_scaled(&b, &p, 3.0).unwrap();
        assert_eq!(r1, r3);
        assert_eq!(r1.total, batch_loss(&b, &p).unwrap().total);
        for (x, y) in g1.flatten().iter().zip(g3.flatten()) {
            assert!((3.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}
