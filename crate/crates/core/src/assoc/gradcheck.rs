//! Central finite-difference check of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_loss, GmtParams, TrainingBatch};
use crate::error::Result;
use crate::params::Parameters;

/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Relative disagreement of forward and backward differences above which a
/// coordinate is treated as sitting on a kink.
pub const KINK_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the one-sided differences disagree, i.e.
    /// a ReLU changes state inside the stencil.
    pub kinks: usize,
    /// `(tensor, index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` against central differences of the forward loss.
///
/// With `per_tensor = None` every coordinate is checked; otherwise that many
/// coordinates are sampled from each tensor with `seed`.
pub fn check_gradients(
    batch: &TrainingBatch,
    params: &GmtParams,
    analytic: &GmtParams,
    step: f64,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout: Vec<(String, usize)> = params.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        kinks: 0,
        worst: None,
    };
    let mut probe = params.clone();
    for (ti, (name, len)) in layout.iter().enumerate() {
        if *len == 0 {
            continue;
        }
        let idx: Vec<usize> = match per_tensor {
            None => (0..*len).collect(),
            Some(k) if k >= *len => (0..*len).collect(),
            Some(k) => (0..k).map(|_| rng.random_range(0..*len)).collect(),
        };
        for i in idx {
            let orig = probe.tensors()[ti].data[i];
            probe.tensors_mut()[ti].data[i] = orig + step;
            let plus = batch_loss(batch, &probe)?.total;
            probe.tensors_mut()[ti].data[i] = orig - step;
            let minus = batch_loss(batch, &probe)?.total;
            probe.tensors_mut()[ti].data[i] = orig;
            let centre = batch_loss(batch, &probe)?.total;
            let (fwd, bwd) = ((plus - centre) / step, (centre - minus) / step);
            if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(1.0) {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads[ti][i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((name.clone(), i, a, numeric));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assoc::loss_gradients;
    use crate::features::{FeatureDims, RawBatch, ST_DIM};
    use crate::geom::{FrameRef, TrajectoryId};
    use crate::linalg::Mat;

    fn instance() -> (TrainingBatch, GmtParams) {
        let dims = FeatureDims {
            d_raw: 4,
            d_roi: 6,
            d_st: 2,
            hidden_roi: 5,
            hidden_st: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 8;
        let batch = TrainingBatch {
            raw: RawBatch {
                app: Mat::from_vec(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
                st: Mat::from_vec(n, ST_DIM, (0..n * ST_DIM).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
            },
            frames: (0..n as u32).map(|k| FrameRef::new(1 + k % 2, 1 + k / 4)).collect(),
            labels: (0..n as u64).map(|k| Some(TrajectoryId(1 + k % 3))).collect(),
        };
        (batch, GmtParams::init(&dims, 2, 4).unwrap())
    }

    #[test]
    fn relative_error_uses_the_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn exact_gradients_pass_and_scaled_ones_fail() {
        let (batch, params) = instance();
        let (_, grad) = loss_gradients(&batch, &params).unwrap();
        let rep = check_gradients(&batch, &params, &grad, 1e-5, None, 0).unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        assert_eq!(rep.checked + rep.kinks, params.num_values());
        let mut off = grad;
        off.scale_all(1.01);
        let rep = check_gradients(&batch, &params, &off, 1e-5, Some(5), 1).unwrap();
        assert!(rep.max_rel_err > 5e-3, "{rep:?}");
    }
}
