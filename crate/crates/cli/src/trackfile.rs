//! Comma-separated track files.
//!
//! ```text
//! camera,frame,id,x1,y1,x2,y2,score
//! 1,1,3,120.000000,340.500000,180.000000,480.000000,0.900000
//! ```
//!
//! `id` is `-1` for detections without an identity. Detection files may carry
//! extra columns `app0,app1,...` with the appearance vector.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gmt_core::{BoxPx, FrameRef, TargetObs, Trajectory, TrajectoryId};

use crate::error::{CliError, Result};

pub const HEADER: &str = "camera,frame,id,x1,y1,x2,y2,score";

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub camera: u32,
    pub frame: u32,
    pub id: Option<u64>,
    pub bbox: BoxPx,
    pub score: f64,
    pub app: Vec<f64>,
}

impl TrackRecord {
    pub fn frame_ref(&self) -> FrameRef {
        FrameRef::new(self.camera, self.frame)
    }
}

/// Renders records with a header; appearance columns are written when the
/// records carry them, and must then have equal length.
pub fn format_records(records: &[TrackRecord]) -> Result<String> {
    let n_app = records.first().map_or(0, |r| r.app.len());
    if records.iter().any(|r| r.app.len() != n_app) {
        return Err(CliError::Data("records have unequal appearance lengths".into()));
    }
    let mut out = String::from(HEADER);
    for k in 0..n_app {
        let _ = write!(out, ",app{k}");
    }
    out.push('\n');
    for r in records {
        let id = r.id.map_or(-1, |v| v as i64);
        let b = &r.bbox;
        let _ = write!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.camera, r.frame, id, b.x1, b.y1, b.x2, b.y2, r.score
        );
        for v in &r.app {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let text = format_records(records)?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<TrackRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_records(&text, path)
}

pub fn parse_records(text: &str, path: &Path) -> Result<Vec<TrackRecord>> {
    let err = |line: usize, msg: String| CliError::Parse {
        path: path.to_owned(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(err(1, "empty file, expected a header".into()));
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    let base: Vec<&str> = HEADER.split(',').collect();
    if cols.len() < base.len() || cols[..base.len()] != base[..] {
        return Err(err(1, format!("header must start with `{HEADER}`")));
    }
    let n_app = cols.len() - base.len();
    for (k, c) in cols[base.len()..].iter().enumerate() {
        if *c != format!("app{k}") {
            return Err(err(1, format!("unexpected column `{c}`, expected `app{k}`")));
        }
    }

    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split(',').collect();
        if f.len() != cols.len() {
            return Err(err(line, format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        let int = |k: usize| -> Result<i64> {
            f[k].trim()
                .parse::<i64>()
                .map_err(|_| err(line, format!("field `{}` = {:?} is not an integer", cols[k], f[k])))
        };
        let num = |k: usize| -> Result<f64> {
            match f[k].trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(line, format!("field `{}` = {:?} is not a finite number", cols[k], f[k]))),
            }
        };
        let camera = int(0)?;
        let frame = int(1)?;
        let id = int(2)?;
        if camera < 1 || camera > u32::MAX as i64 || frame < 1 || frame > u32::MAX as i64 {
            return Err(err(line, "camera and frame must be at least 1".into()));
        }
        if id < -1 {
            return Err(err(line, format!("id {id} is negative (use -1 for none)")));
        }
        let bbox = BoxPx::new(num(3)?, num(4)?, num(5)?, num(6)?).map_err(|e| err(line, e.to_string()))?;
        let score = num(7)?;
        let app = (0..n_app).map(|k| num(base.len() + k)).collect::<Result<Vec<_>>>()?;
        out.push(TrackRecord {
            camera: camera as u32,
            frame: frame as u32,
            id: (id >= 0).then_some(id as u64),
            bbox,
            score,
            app,
        });
    }
    Ok(out)
}

/// One record per member, ordered by `(frame, camera, id)`.
pub fn records_from_trajectories(trajectories: &[Trajectory], score: f64) -> Vec<TrackRecord> {
    let mut out: Vec<TrackRecord> = trajectories
        .iter()
        .flat_map(|t| {
            t.members.iter().map(move |(f, b)| TrackRecord {
                camera: f.camera,
                frame: f.time,
                id: Some(t.id.0),
                bbox: *b,
                score,
                app: Vec::new(),
            })
        })
        .collect();
    out.sort_by_key(|r| (r.frame, r.camera, r.id));
    out
}

/// Groups records by id. Every record needs an id, and an id may appear at
/// most once per `(camera, frame)`.
pub fn trajectories_from_records(records: &[TrackRecord], path: &Path) -> Result<Vec<Trajectory>> {
    let mut by_id: BTreeMap<u64, Trajectory> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let Some(id) = r.id else {
            return Err(CliError::Parse {
                path: path.to_owned(),
                line: i + 2,
                msg: "record without an id".into(),
            });
        };
        by_id
            .entry(id)
            .or_insert_with(|| Trajectory::new(TrajectoryId(id)))
            .members
            .push((r.frame_ref(), r.bbox));
    }
    by_id
        .into_values()
        .map(|t| t.normalized().map_err(|e| CliError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Splits detection records into time steps. Frames must not decrease
/// along the file.
pub fn detections_by_frame(records: &[TrackRecord], path: &Path) -> Result<Vec<(u32, Vec<TargetObs>)>> {
    let mut out: Vec<(u32, Vec<TargetObs>)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match out.last() {
            Some((t, _)) if r.frame < *t => {
                return Err(CliError::Parse {
                    path: path.to_owned(),
                    line: i + 2,
                    msg: format!("frame {} after frame {t}: input must be ordered by frame", r.frame),
                });
            }
            Some((t, _)) if r.frame == *t => {}
            _ => out.push((r.frame, Vec::new())),
        }
        out.last_mut().expect("pushed above").1.push(TargetObs {
            bbox: r.bbox,
            frame: r.frame_ref(),
            app: r.app.clone(),
            det_score: r.score,
        });
    }
    Ok(out)
}
