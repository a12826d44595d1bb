//! The `simulate`, `train`, `track` and `evaluate` pipelines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gmt_core::assoc::{train, GmtParams};
use gmt_core::metrics::{evaluate, CvScores, EvalConfig};
use gmt_core::tracker::TrackerState;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::trackfile::{
    detections_by_frame, read_records, records_from_trajectories, trajectories_from_records, write_records,
    TrackRecord,
};
use crate::weights::{read_weights, write_weights, WeightsHeader};

pub const GT_FILE: &str = "gt.csv";
pub const DETECTIONS_FILE: &str = "detections.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulateOutput {
    pub gt: PathBuf,
    pub detections: PathBuf,
}

/// Writes `gt.csv` and `detections.csv` into `out_dir`.
pub fn simulate(cfg: &RunConfig, out_dir: &Path) -> Result<SimulateOutput> {
    let s = cfg.scenario()?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let gt = out_dir.join(GT_FILE);
    let detections = out_dir.join(DETECTIONS_FILE);
    write_records(&gt, &records_from_trajectories(&s.gt.trajectories, 1.0))?;
    let dets: Vec<TrackRecord> = s
        .steps
        .iter()
        .flat_map(|st| st.obs.iter())
        .map(|o| TrackRecord {
            camera: o.frame.camera,
            frame: o.frame.time,
            id: None,
            bbox: o.bbox,
            score: o.det_score,
            app: o.app.clone(),
        })
        .collect();
    write_records(&detections, &dets)?;
    Ok(SimulateOutput { gt, detections })
}

/// Path of the loss record written next to a weights file.
pub fn loss_curve_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

/// Trains on scenes generated from the configuration and writes the weights
/// plus `<weights>.loss.csv`.
pub fn train_model(cfg: &RunConfig, weights_out: &Path) -> Result<TrainSummary> {
    let [_, _, _, model_seed, _] = cfg.seeds().map_err(CliError::Data)?;
    let init = GmtParams::init(&cfg.feature_dims(), cfg.model.heads, model_seed)?;
    let scenes = cfg.training_scenes()?;
    let out = train(&scenes, init, &cfg.train_config())?;
    write_weights(weights_out, &out.params)?;
    let mut curve = String::from("iteration,loss\n");
    for (i, l) in out.loss_curve.iter().enumerate() {
        let _ = writeln!(curve, "{i},{l:e}");
    }
    let curve_path = loss_curve_path(weights_out);
    fs::write(&curve_path, curve).map_err(|e| CliError::io(&curve_path, e))?;
    Ok(TrainSummary {
        iterations: out.loss_curve.len(),
        first_loss: out.loss_curve.first().copied(),
        last_loss: out.loss_curve.last().copied(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackSummary {
    pub detections: usize,
    pub trajectories: usize,
}

/// Streams a detection file through the tracker and writes the finalized
/// trajectories.
pub fn track(cfg: &RunConfig, weights: &Path, detections: &Path, out: &Path) -> Result<TrackSummary> {
    let params = read_weights(weights)?;
    WeightsHeader::of(&params).check(&cfg.feature_dims(), cfg.model.heads)?;
    let records = read_records(detections)?;
    let d_raw = cfg.model.d_raw;
    if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.app.len() != d_raw) {
        return Err(CliError::Parse {
            path: detections.to_owned(),
            line: i + 2,
            msg: format!("{} appearance values, the model expects {d_raw}", r.app.len()),
        });
    }
    let steps = detections_by_frame(&records, detections)?;
    let mut state = TrackerState::new(cfg.tracker_config(), cfg.scene_dims())?;
    for (time, obs) in &steps {
        state.step(*time, obs, &params)?;
    }
    let trajectories = state.finalize();
    let mut recs = records_from_trajectories(&trajectories, 1.0);
    recs.iter_mut().for_each(|r| r.app.clear());
    write_records(out, &recs)?;
    Ok(TrackSummary {
        detections: records.len(),
        trajectories: trajectories.len(),
    })
}

/// Scores a prediction file against a ground-truth file.
pub fn evaluate_files(gt: &Path, pred: &Path, cfg: &EvalConfig) -> Result<CvScores> {
    cfg.validate()?;
    let g = trajectories_from_records(&read_records(gt)?, gt)?;
    let p = trajectories_from_records(&read_records(pred)?, pred)?;
    Ok(evaluate(&g, &p, cfg))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// `key=value` lines, a blank line, then an aligned table.
pub fn format_report(s: &CvScores) -> String {
    let rows: [(&str, String); 11] = [
        ("cvma", fmt_opt(s.cvma)),
        ("cvidp", fmt_opt(s.cvidp)),
        ("cvidr", fmt_opt(s.cvidr)),
        ("cvidf1", fmt_opt(s.cvidf1)),
        ("idtp", s.idtp.to_string()),
        ("idfp", s.idfp.to_string()),
        ("idfn", s.idfn.to_string()),
        ("gt", s.gt.to_string()),
        ("misses", s.misses.to_string()),
        ("false_positives", s.false_positives.to_string()),
        ("mismatches", s.mismatches.to_string()),
    ];
    let mut out = String::new();
    for (k, v) in &rows {
        let _ = writeln!(out, "{k}={v}");
    }
    out.push('\n');
    let kw = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let vw = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let _ = writeln!(out, "{:<kw$}  {:>vw$}", "metric", "value");
    let _ = writeln!(out, "{}  {}", "-".repeat(kw), "-".repeat(vw));
    for (k, v) in &rows {
        let _ = writeln!(out, "{k:<kw$}  {v:>vw$}");
    }
    out
}
