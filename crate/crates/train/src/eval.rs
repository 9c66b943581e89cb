//! Open-loop evaluation: prefix waypoint displacement, binary collision
//! rate, detection average precision, and the per-horizon rollout tables
//! the reports are built from.

use thiserror::Error;

use uwm_core::parallel::pmap;
use uwm_core::tensor::{softmax_rows, Mat, Tape};
use uwm_core::params::Binding;
use uwm_model::layout::Mode;
use uwm_world::geometry::{obb_iou, obb_overlap, Obb, Vec2};
use uwm_world::{AgentBox, Episode};

use crate::batch;
use crate::trainer::{Pipeline, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Mean Euclidean displacement over the first `k` waypoints.
pub fn l2_metric(pred: &Mat, expert: &Mat, k: usize) -> Result<f64, EvalError> {
    if pred.dim() != expert.dim() {
        return Err(EvalError::Shape(format!(
            "prediction is {:?}, expert is {:?}",
            pred.dim(),
            expert.dim()
        )));
    }
    if pred.ncols() != 2 {
        return Err(EvalError::Shape(format!("waypoints have {} columns", pred.ncols())));
    }
    if k == 0 || k > pred.nrows() {
        return Err(EvalError::Shape(format!(
            "horizon {k} outside 1..={}",
            pred.nrows()
        )));
    }
    let mut sum = 0.0;
    for i in 0..k {
        sum += (pred[(i, 0)] - expert[(i, 0)]).hypot(pred[(i, 1)] - expert[(i, 1)]);
    }
    Ok(sum / k as f64)
}

/// Per-step collision indicators: the ego footprint placed at each waypoint,
/// heading taken from the approach segment, against that step's agent
/// footprints. Degenerate segments keep the previous heading.
pub fn step_collisions(
    traj: &Mat,
    futures: &[Vec<AgentBox>],
    ego_length: f64,
    ego_width: f64,
) -> Result<Vec<bool>, EvalError> {
    if traj.nrows() != futures.len() {
        return Err(EvalError::Shape(format!(
            "{} waypoints but {} future agent sets",
            traj.nrows(),
            futures.len()
        )));
    }
    if traj.ncols() != 2 {
        return Err(EvalError::Shape(format!("waypoints have {} columns", traj.ncols())));
    }
    let mut out = Vec::with_capacity(traj.nrows());
    let (mut px, mut py) = (0.0, 0.0);
    let mut heading = 0.0;
    for (i, agents) in futures.iter().enumerate() {
        let (x, y) = (traj[(i, 0)], traj[(i, 1)]);
        let (dx, dy) = (x - px, y - py);
        if dx.hypot(dy) > 1e-9 {
            heading = dy.atan2(dx);
        }
        let ego = Obb::new(Vec2::new(x, y), ego_length, ego_width, heading);
        out.push(agents.iter().any(|a| obb_overlap(&ego, &a.obb())));
        (px, py) = (x, y);
    }
    Ok(out)
}

/// Collision frequency (%) over the first `k` steps, averaged across
/// examples.
pub fn collision_rate(indicators: &[Vec<bool>], k: usize) -> Result<f64, EvalError> {
    if indicators.is_empty() {
        return Err(EvalError::Shape("no examples".into()));
    }
    let mut total = 0.0;
    for ind in indicators {
        if k == 0 || k > ind.len() {
            return Err(EvalError::Shape(format!("horizon {k} outside 1..={}", ind.len())));
        }
        let hits = ind[..k].iter().filter(|&&b| b).count();
        total += hits as f64 / k as f64;
    }
    Ok(100.0 * total / indicators.len() as f64)
}

// ----------------------------------------------------------------------
// Detection metrics
// ----------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Detection {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub yaw: f64,
    /// Foreground confidence: one minus the background probability.
    pub score: f64,
}

impl Detection {
    fn obb(&self) -> Obb {
        Obb::new(
            Vec2::new(self.center[0], self.center[1]),
            self.size[0],
            self.size[1],
            self.yaw,
        )
    }
}

/// Decode detection-head outputs into scored boxes. `logits` carries
/// `n_classes` foreground columns plus a trailing background column.
pub fn decode_detections(boxes: &Mat, logits: &Mat, n_classes: usize) -> Vec<Detection> {
    let probs = softmax_rows(logits);
    (0..boxes.nrows())
        .map(|p| Detection {
            center: [boxes[(p, 0)], boxes[(p, 1)]],
            size: [boxes[(p, 2)].max(1e-3), boxes[(p, 3)].max(1e-3)],
            yaw: boxes[(p, 4)],
            score: 1.0 - probs[(p, n_classes)],
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DetectionEval {
    /// 11-point interpolated average precision at the IoU threshold.
    pub ap: f64,
    /// Mean center distance over true-positive matches.
    pub mean_translation_error: f64,
    pub matches: usize,
}

/// Dataset-level AP: all detections ranked by confidence, each greedily
/// matched to the best still-unmatched ground truth of its frame at BEV
/// IoU ≥ `iou_thresh`.
pub fn average_precision(
    frames: &[(Vec<Detection>, Vec<AgentBox>)],
    iou_thresh: f64,
) -> DetectionEval {
    let total_gt: usize = frames.iter().map(|(_, g)| g.len()).sum();
    let mut ranked: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, (dets, _))| (0..dets.len()).map(move |d| (f, d)))
        .collect();
    ranked.sort_by(|&(fa, da), &(fb, db)| {
        let sa = frames[fa].0[da].score;
        let sb = frames[fb].0[db].score;
        sb.partial_cmp(&sa).unwrap().then(fa.cmp(&fb)).then(da.cmp(&db))
    });

    let mut taken: Vec<Vec<bool>> = frames.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    let mut translation = 0.0;
    let mut matches = 0usize;
    for (f, d) in ranked {
        let det = &frames[f].0[d];
        let det_obb = det.obb();
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in frames[f].1.iter().enumerate() {
            if taken[f][g] {
                continue;
            }
            let iou = obb_iou(&det_obb, &gt.obb());
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[f][g] = true;
            tp_flags.push(true);
            let gt = &frames[f].1[g];
            translation += (det.center[0] - gt.center[0] as f64)
                .hypot(det.center[1] - gt.center[1] as f64);
            matches += 1;
        } else {
            tp_flags.push(false);
        }
    }

    if total_gt == 0 {
        return DetectionEval { ap: 0.0, mean_translation_error: 0.0, matches: 0 };
    }

    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / total_gt as f64);
    }
    let mut ap = 0.0;
    for j in 0..=10 {
        let r = j as f64 / 10.0;
        let p = precisions
            .iter()
            .zip(&recalls)
            .filter(|&(_, &rec)| rec >= r - 1e-12)
            .map(|(&p, _)| p)
            .fold(0.0, f64::max);
        ap += p / 11.0;
    }
    let mte = if matches > 0 { translation / matches as f64 } else { 0.0 };
    DetectionEval { ap, mean_translation_error: mte, matches }
}

/// Run the frozen detection head over every frame of the dataset.
pub fn detection_frames(
    pipe: &Pipeline,
    episodes: &[Episode],
) -> Result<Vec<(Vec<Detection>, Vec<AgentBox>)>, TrainError> {
    let frames: Vec<(usize, usize)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.usable).map(move |t| (e, t)))
        .collect();
    let n_classes = pipe.cfg.model.n_classes;
    pmap(frames, |(e, t)| {
        let ep = &episodes[e];
        let tape = Tape::new();
        let bind = Binding::new(&pipe.store);
        let (_qs, q_p, _f) = pipe.models.qt.encode_scene(&tape, &bind, &batch::scene_views(ep, t))?;
        let (boxes, logits) = pipe.models.qt.detect(&tape, &bind, q_p);
        let dets = decode_detections(&tape.value(boxes), &tape.value(logits), n_classes);
        Ok((dets, batch::agents_ego(ep, t)))
    })
    .into_iter()
    .collect()
}

// ----------------------------------------------------------------------
// Open-loop rollout collection and the planning table
// ----------------------------------------------------------------------

/// One evaluated frame: the model's open-loop products next to the ground
/// truth they are scored against.
pub struct FrameRollout {
    pub episode: usize,
    pub frame: usize,
    pub traj: Option<Mat>,
    pub expert: Mat,
    pub futures: Vec<Vec<AgentBox>>,
    /// Predicted future front view, flat `(3,h,w)`.
    pub gen: Option<(Vec<f32>, usize, usize)>,
    /// Ground-truth future front view at the decoder's resolution.
    pub real: (Vec<f32>, usize, usize),
}

/// Roll the model over every supervised frame of every episode.
pub fn collect_rollouts(
    pipe: &Pipeline,
    episodes: &[Episode],
) -> Result<Vec<FrameRollout>, TrainError> {
    let frames: Vec<(usize, usize)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.usable).map(move |t| (e, t)))
        .collect();
    let horizon = pipe.cfg.world.horizon;
    let offset = pipe.cfg.world.future_offset;
    let lo = pipe.cfg.world.lo_resolution;
    let hi = pipe.cfg.world.view.resolution;
    pmap(frames, |(e, t)| {
        let ep = &episodes[e];
        let flat = (e * ep.usable + t) as u64;
        let gen_seed = pipe.seed.wrapping_add(flat.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let roll = pipe.rollout(ep, t, gen_seed)?;
        let real = match pipe.cfg.train.mode {
            Mode::Ar => (batch::front_lo_pixels(ep, t + offset), lo, lo),
            Mode::Fm => (batch::front_hi_pixels(ep, t + offset), hi, hi),
        };
        Ok(FrameRollout {
            episode: e,
            frame: t,
            traj: roll.traj,
            expert: batch::expert_mat(ep, t),
            futures: batch::future_agents_ego(ep, t, horizon),
            gen: roll.frame,
            real,
        })
    })
    .into_iter()
    .collect()
}

/// Planning metrics at even horizons plus the full-horizon average.
#[derive(Clone, Debug)]
pub struct PlanningTable {
    pub ks: Vec<usize>,
    pub l2: Vec<f64>,
    pub collision_pct: Vec<f64>,
    pub avg_l2: f64,
    pub avg_collision_pct: f64,
}

/// Evaluation horizons for an `m`-step plan: every second step, and `m`
/// itself for the average column.
pub fn horizons(m: usize) -> Vec<usize> {
    (1..=m / 2).map(|i| 2 * i).collect()
}

pub fn planning_table(
    rollouts: &[FrameRollout],
    ego_length: f64,
    ego_width: f64,
) -> Result<Option<PlanningTable>, EvalError> {
    if rollouts.is_empty() {
        return Err(EvalError::Shape("no rollouts".into()));
    }
    if rollouts.iter().any(|r| r.traj.is_none()) {
        return Ok(None);
    }
    let m = rollouts[0].expert.nrows();
    let indicators: Vec<Vec<bool>> = rollouts
        .iter()
        .map(|r| step_collisions(r.traj.as_ref().unwrap(), &r.futures, ego_length, ego_width))
        .collect::<Result<_, _>>()?;
    let ks = horizons(m);
    let mut l2 = Vec::with_capacity(ks.len());
    let mut collision_pct = Vec::with_capacity(ks.len());
    for &k in &ks {
        let mut sum = 0.0;
        for r in rollouts {
            sum += l2_metric(r.traj.as_ref().unwrap(), &r.expert, k)?;
        }
        l2.push(sum / rollouts.len() as f64);
        collision_pct.push(collision_rate(&indicators, k)?);
    }
    let mut avg = 0.0;
    for r in rollouts {
        avg += l2_metric(r.traj.as_ref().unwrap(), &r.expert, m)?;
    }
    let avg_l2 = avg / rollouts.len() as f64;
    let avg_collision_pct = collision_rate(&indicators, m)?;
    Ok(Some(PlanningTable { ks, l2, collision_pct, avg_l2, avg_collision_pct }))
}
