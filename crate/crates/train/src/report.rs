//! Report assembly: run the metric suite over a trained pipeline and emit
//! `metrics.json` (nested per metric and horizon) plus `metrics.csv` (one
//! row per variant).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use uwm_world::Episode;

use crate::eval::{
    self, average_precision, collect_rollouts, detection_frames, planning_table, step_collisions,
    EvalError,
};
use crate::fid::{fid_proxy, FidError};
use crate::trainer::{Pipeline, TrainError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Fid(#[from] FidError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Open-loop planning block: displacement and collision frequency at each
/// even horizon, plus the full-horizon averages.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanningReport {
    pub horizons: Vec<usize>,
    pub l2_m: Vec<f64>,
    pub collision_pct: Vec<f64>,
    pub avg_l2_m: f64,
    pub avg_collision_pct: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionReport {
    pub ap: f64,
    pub mean_translation_error_m: f64,
    pub matches: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationReport {
    pub fid: f64,
}

/// Per-frame dump for verbose reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameRecord {
    pub episode: usize,
    pub frame: usize,
    pub l2_m: Option<f64>,
    pub collisions: Option<Vec<bool>>,
}

/// Everything measured on one trained model over one dataset. Blocks are
/// absent when the matching head was disabled for that run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub order: String,
    pub frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planning: Option<PlanningReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_frame: Option<Vec<FrameRecord>>,
}

/// Run the full metric suite over every supervised frame of `episodes`.
pub fn evaluate(
    pipe: &Pipeline,
    episodes: &[Episode],
    verbose: bool,
) -> Result<EvalReport, ReportError> {
    let rollouts = collect_rollouts(pipe, episodes)?;
    let ego = (pipe.cfg.eval.ego_length, pipe.cfg.eval.ego_width);

    let planning = planning_table(&rollouts, ego.0, ego.1)?.map(|t| PlanningReport {
        horizons: t.ks,
        l2_m: t.l2,
        collision_pct: t.collision_pct,
        avg_l2_m: t.avg_l2,
        avg_collision_pct: t.avg_collision_pct,
    });

    let detection = if pipe.cfg.train.use_detection {
        let frames = detection_frames(pipe, episodes)?;
        let d = average_precision(&frames, pipe.cfg.eval.iou_thresh);
        Some(DetectionReport {
            ap: d.ap,
            mean_translation_error_m: d.mean_translation_error,
            matches: d.matches,
        })
    } else {
        None
    };

    let generation = fid_proxy(pipe, &rollouts)?.map(|fid| GenerationReport { fid });

    let per_frame = if verbose {
        let mut records = Vec::with_capacity(rollouts.len());
        for r in &rollouts {
            let (l2, coll) = match &r.traj {
                Some(traj) => (
                    Some(eval::l2_metric(traj, &r.expert, r.expert.nrows())?),
                    Some(step_collisions(traj, &r.futures, ego.0, ego.1)?),
                ),
                None => (None, None),
            };
            records.push(FrameRecord {
                episode: r.episode,
                frame: r.frame,
                l2_m: l2,
                collisions: coll,
            });
        }
        Some(records)
    } else {
        None
    };

    Ok(EvalReport {
        mode: mode_name(pipe),
        order: order_name(pipe),
        frames: rollouts.len(),
        planning,
        detection,
        generation,
        per_frame,
    })
}

fn mode_name(pipe: &Pipeline) -> String {
    serde_json::to_value(pipe.cfg.train.mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn order_name(pipe: &Pipeline) -> String {
    serde_json::to_value(pipe.cfg.train.order)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// One named row of a report table: an evaluated model or a placeholder for
/// a variant whose checkpoint never materialized.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum VariantOutcome {
    Evaluated(EvalReport),
    Absent { reason: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub order: String,
    #[serde(flatten)]
    pub outcome: VariantOutcome,
}

/// Placeholder used in CSV cells whose metric does not exist for the row.
pub const EMPTY_CELL: &str = "--";

/// CSV header matching [`csv_row`]: identity, status, planning columns at
/// each horizon, detection, generation.
pub fn csv_header(horizons: &[usize]) -> String {
    let mut cols = vec!["variant".to_string(), "order".into(), "status".into()];
    for &k in horizons {
        cols.push(format!("l2_m@{k}"));
    }
    cols.push("avg_l2_m".into());
    for &k in horizons {
        cols.push(format!("collision_pct@{k}"));
    }
    cols.push("avg_collision_pct".into());
    cols.push("ap".into());
    cols.push("mean_translation_error_m".into());
    cols.push("fid".into());
    cols.join(",")
}

pub fn csv_row(row: &VariantRow, horizons: &[usize]) -> String {
    let mut cols = vec![row.variant.clone(), row.order.clone()];
    match &row.outcome {
        VariantOutcome::Absent { .. } => {
            cols.push("absent".into());
            for _ in 0..2 * horizons.len() + 5 {
                cols.push(EMPTY_CELL.into());
            }
        }
        VariantOutcome::Evaluated(r) => {
            cols.push("evaluated".into());
            let num = |v: f64| format!("{v:.6}");
            match &r.planning {
                Some(p) => {
                    for &v in &p.l2_m {
                        cols.push(num(v));
                    }
                    cols.push(num(p.avg_l2_m));
                    for &v in &p.collision_pct {
                        cols.push(num(v));
                    }
                    cols.push(num(p.avg_collision_pct));
                }
                None => {
                    for _ in 0..2 * horizons.len() + 2 {
                        cols.push(EMPTY_CELL.into());
                    }
                }
            }
            match &r.detection {
                Some(d) => {
                    cols.push(num(d.ap));
                    cols.push(num(d.mean_translation_error_m));
                }
                None => {
                    cols.push(EMPTY_CELL.into());
                    cols.push(EMPTY_CELL.into());
                }
            }
            match &r.generation {
                Some(g) => cols.push(num(g.fid)),
                None => cols.push(EMPTY_CELL.into()),
            }
        }
    }
    cols.join(",")
}

/// Write `metrics.json` and `metrics.csv` for a set of variant rows.
pub fn write_reports(
    out_dir: &Path,
    json: &serde_json::Value,
    rows: &[VariantRow],
    horizons: &[usize],
) -> Result<(), ReportError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(json)? + "\n")?;
    let mut csv = csv_header(horizons) + "\n";
    for row in rows {
        csv.push_str(&csv_row(row, horizons));
        csv.push('\n');
    }
    fs::write(out_dir.join("metrics.csv"), csv)?;
    Ok(())
}
