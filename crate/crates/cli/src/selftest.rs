//! Built-in oracle suites run by `gmt selftest`.

use std::time::Instant;

use gmt_core::assignment::solve_max;
use gmt_core::assoc::gradcheck::check_gradients;
use gmt_core::assoc::{loss_gradients, per_frame_softmax, GmtParams, SimilarityMatrix, TrainingBatch};
use gmt_core::features::{FeatureDims, RawBatch, ST_DIM};
use gmt_core::linalg::Mat;
use gmt_core::metrics::{evaluate, EvalConfig};
use gmt_core::params::Parameters;
use gmt_core::{BoxPx, FrameRef, Trajectory, TrajectoryId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, Default)]
pub struct SelftestOptions {
    /// Perturbs the analytic gradient so the gradient suite must fail.
    pub inject_gradient_fault: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Suite = Box<dyn Fn() -> Result<String, String>>;

pub fn run_selftest(opts: SelftestOptions) -> Vec<SuiteResult> {
    let suites: [(&'static str, Suite); 4] = [
        ("hungarian", Box::new(|| hungarian_suite(300))),
        ("gradients", Box::new(move || gradient_suite(3, opts.inject_gradient_fault))),
        ("softmax", Box::new(|| softmax_suite(1000))),
        ("metrics", Box::new(|| metric_suite(200))),
    ];
    suites
        .into_iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let r = f();
            SuiteResult {
                name,
                passed: r.is_ok(),
                detail: r.unwrap_or_else(|e| e),
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

/// Best total over every one-to-one matching of the smaller side.
fn brute_force_max(m: &Mat) -> f64 {
    fn rec(m: &Mat, r: usize, used: &mut [bool], transpose: bool) -> f64 {
        let (rows, cols) = if transpose { (m.cols(), m.rows()) } else { m.shape() };
        if r == rows {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                let v = if transpose { m[(c, r)] } else { m[(r, c)] };
                best = best.max(v + rec(m, r + 1, used, transpose));
                used[c] = false;
            }
        }
        best
    }
    let transpose = m.rows() > m.cols();
    let cols = m.rows().max(m.cols());
    if m.rows() == 0 || m.cols() == 0 {
        return 0.0;
    }
    rec(m, 0, &mut vec![false; cols], transpose)
}

fn hungarian_suite(trials: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4a55);
    for k in 0..trials {
        let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
        // multiples of 1/64 add exactly
        let data = (0..r * c).map(|_| rng.random_range(-64..=64) as f64 / 64.0).collect();
        let m = Mat::from_vec(r, c, data).map_err(|e| e.to_string())?;
        let got = solve_max(&m).total;
        let want = brute_force_max(&m);
        if got != want {
            return Err(format!("trial {k} ({r}x{c}): assignment {got} vs brute force {want}"));
        }
    }
    Ok(format!("{trials} matrices up to 6x6 match brute force"))
}

/// A small random labelled batch and perturbed parameters, for gradient
/// checks.
pub fn gradient_instance(seed: u64, targets: usize) -> (TrainingBatch, GmtParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = FeatureDims {
        d_raw: 6,
        d_roi: 8,
        d_st: 4,
        hidden_roi: 8,
        hidden_st: 4,
    };
    let mut params = GmtParams::init(&dims, 2, seed).expect("valid dims");
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let app = (0..targets * dims.d_raw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let st = (0..targets * ST_DIM).map(|_| rng.random_range(0.0..1.0)).collect();
    let frames: Vec<FrameRef> = (0..targets)
        .map(|_| FrameRef::new(rng.random_range(1..=2), rng.random_range(1..=4)))
        .collect();
    let labels = (0..targets)
        .map(|_| {
            let l = rng.random_range(0..5u64);
            (l > 0).then_some(TrajectoryId(l))
        })
        .collect();
    let batch = TrainingBatch {
        raw: RawBatch {
            app: Mat::from_vec(targets, dims.d_raw, app).expect("sized"),
            st: Mat::from_vec(targets, ST_DIM, st).expect("sized"),
        },
        frames,
        labels,
    };
    (batch, params)
}

fn gradient_suite(instances: u64, inject_fault: bool) -> Result<String, String> {
    let mut worst = 0.0f64;
    for s in 0..instances {
        let (batch, params) = gradient_instance(1000 + s, 12);
        let (_, mut grad) = loss_gradients(&batch, &params).map_err(|e| e.to_string())?;
        if inject_fault {
            grad.scale_all(1.01);
        }
        let rep = check_gradients(&batch, &params, &grad, 1e-5, Some(40), s).map_err(|e| e.to_string())?;
        worst = worst.max(rep.max_rel_err);
        if rep.max_rel_err >= 1e-4 {
            return Err(format!("instance {s}: relative error {:.3e} at {:?}", rep.max_rel_err, rep.worst));
        }
    }
    Ok(format!("{instances} instances, max relative error {worst:.2e}"))
}

fn softmax_suite(instances: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x50f7);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (q, n) = (rng.random_range(1..8), rng.random_range(1..12));
        let g = Mat::from_vec(q, n, (0..q * n).map(|_| rng.random_range(-30.0..30.0)).collect()).expect("sized");
        let frame = |rng: &mut ChaCha8Rng| FrameRef::new(rng.random_range(1..=3), rng.random_range(1..=3));
        let cols = (0..n).map(|_| frame(&mut rng)).collect();
        let rows = (0..q).map(|_| frame(&mut rng)).collect();
        let probs = per_frame_softmax(&SimilarityMatrix::new(g, rows, cols).map_err(|e| e.to_string())?);
        for i in 0..q {
            for (k, cols) in probs.groups.members.iter().enumerate() {
                let s: f64 = probs.null[(i, k)] + cols.iter().map(|&j| probs.h[(i, j)]).sum::<f64>();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    if worst > 1e-9 {
        return Err(format!("group sums deviate from 1 by {worst:.3e}"));
    }
    Ok(format!("{instances} instances, max deviation {worst:.1e}"))
}

/// Identity pairing by exhaustive search, with overlaps counted by exact box
/// equality.
fn pairing_oracle(gt: &[Trajectory], pred: &[Trajectory]) -> usize {
    fn rec(i: usize, ov: &[Vec<usize>], used: &mut [bool]) -> usize {
        if i == ov.len() {
            return 0;
        }
        let mut best = rec(i + 1, ov, used);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(ov[i][j] + rec(i + 1, ov, used));
                used[j] = false;
            }
        }
        best
    }
    let ov: Vec<Vec<usize>> = gt
        .iter()
        .map(|g| {
            pred.iter()
                .map(|p| g.members.iter().filter(|(f, b)| p.box_at(*f) == Some(b)).count())
                .collect()
        })
        .collect();
    rec(0, &ov, &mut vec![false; pred.len()])
}

/// Random well-separated ground truth and predictions that copy some of its
/// boxes under shuffled ids.
fn metric_instance(rng: &mut ChaCha8Rng) -> (Vec<Trajectory>, Vec<Trajectory>) {
    let n_gt = rng.random_range(1..=3u64);
    let n_pred = rng.random_range(1..=4u64);
    let mut gt: Vec<Trajectory> = (1..=n_gt).map(|i| Trajectory::new(TrajectoryId(i))).collect();
    let mut pred: Vec<Trajectory> = (1..=n_pred).map(|i| Trajectory::new(TrajectoryId(10 + i))).collect();
    for t in 1..=4 {
        for c in 1..=2 {
            let f = FrameRef::new(c, t);
            for (k, g) in gt.iter_mut().enumerate() {
                if rng.random_bool(0.2) {
                    continue;
                }
                let x = 100.0 * k as f64;
                let b = BoxPx::new(x, 0.0, x + 20.0, 40.0).expect("ordered");
                g.members.push((f, b));
                if rng.random_bool(0.8) {
                    let p = rng.random_range(0..pred.len());
                    if pred[p].box_at(f).is_none() {
                        pred[p].members.push((f, b));
                    }
                }
            }
            if rng.random_bool(0.2) {
                let p = rng.random_range(0..pred.len());
                if pred[p].box_at(f).is_none() {
                    pred[p].members.push((f, BoxPx::new(900.0, 0.0, 920.0, 40.0).expect("ordered")));
                }
            }
        }
    }
    gt.retain(|t| !t.is_empty());
    pred.retain(|t| !t.is_empty());
    (gt, pred)
}

fn metric_suite(trials: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let cfg = EvalConfig::default();
    for k in 0..trials {
        let (gt, pred) = metric_instance(&mut rng);
        let s = evaluate(&gt, &pred, &cfg);
        let tp = pairing_oracle(&gt, &pred);
        let n_gt: usize = gt.iter().map(Trajectory::len).sum();
        let n_pred: usize = pred.iter().map(Trajectory::len).sum();
        if (s.idtp, s.idfp, s.idfn) != (tp, n_pred - tp, n_gt - tp) {
            return Err(format!(
                "trial {k}: id counts {:?} vs enumeration {:?}",
                (s.idtp, s.idfp, s.idfn),
                (tp, n_pred - tp, n_gt - tp)
            ));
        }
    }
    Ok(format!("{trials} identity pairings match enumeration"))
}
