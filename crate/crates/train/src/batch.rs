//! Example extraction and deterministic batch scheduling.
//!
//! A training example is one supervised frame of one episode. Everything the
//! losses consume is expressed in that frame's ego coordinates, matching the
//! expert waypoint convention, so the extraction helpers here are the single
//! place world→ego geometry happens.

use ndarray::Array3;
use uwm_core::rng::DetRng;
use uwm_core::tensor::Mat;
use uwm_world::{AgentBox, Episode, LaneMap};

/// Index of one supervised example plus the task drawn for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExampleRef {
    /// Flat index: episode * usable + frame.
    pub index: usize,
    /// Command-prediction (text) task instead of the driving objective.
    pub text: bool,
}

/// Deterministic epoch-permutation scheduler. The examples visited by step
/// `s` are a pure function of (seed, s); stage-2 runs additionally draw a
/// per-slot task kind.
#[derive(Clone, Debug)]
pub struct Scheduler {
    pub seed: u64,
    pub n_examples: usize,
    pub batch_size: usize,
    pub text_ratio: f64,
    pub mix_text: bool,
}

impl Scheduler {
    pub fn batch(&self, step: u64) -> Vec<ExampleRef> {
        assert!(self.n_examples > 0, "empty dataset");
        let mut out = Vec::with_capacity(self.batch_size);
        let mut cached_epoch = u64::MAX;
        let mut perm = Vec::new();
        for slot in 0..self.batch_size as u64 {
            let g = step * self.batch_size as u64 + slot;
            let epoch = g / self.n_examples as u64;
            if epoch != cached_epoch {
                let mut rng = DetRng::indexed(self.seed, "batch-order", epoch, 0);
                perm = rng.permutation(self.n_examples);
                cached_epoch = epoch;
            }
            let index = perm[(g % self.n_examples as u64) as usize];
            let text = self.mix_text
                && DetRng::indexed(self.seed, "task-mix", g, 0).uniform() < self.text_ratio;
            out.push(ExampleRef { index, text });
        }
        out
    }
}

/// Split a flat example index into (episode, frame).
pub fn locate(index: usize, usable: usize) -> (usize, usize) {
    (index / usable, index % usable)
}

fn rotate(x: f64, y: f64, yaw: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// World point → ego frame of `pose`.
pub fn world_to_ego(pose: [f32; 3], p: [f32; 2]) -> [f32; 2] {
    let dx = p[0] as f64 - pose[0] as f64;
    let dy = p[1] as f64 - pose[1] as f64;
    let (x, y) = rotate(dx, dy, -(pose[2] as f64));
    [x as f32, y as f32]
}

/// Ego-frame point → world.
pub fn ego_to_world(pose: [f32; 3], p: [f32; 2]) -> [f32; 2] {
    let (x, y) = rotate(p[0] as f64, p[1] as f64, pose[2] as f64);
    [(x + pose[0] as f64) as f32, (y + pose[1] as f64) as f32]
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI);
    if a < 0.0 {
        a += 2.0 * std::f64::consts::PI;
    }
    a - std::f64::consts::PI
}

pub fn agent_to_ego(pose: [f32; 3], a: &AgentBox) -> AgentBox {
    let center = world_to_ego(pose, a.center);
    let (vx, vy) = rotate(a.velocity[0] as f64, a.velocity[1] as f64, -(pose[2] as f64));
    AgentBox {
        center,
        size: a.size,
        yaw: wrap_angle(a.yaw as f64 - pose[2] as f64) as f32,
        velocity: [vx as f32, vy as f32],
        class_id: a.class_id,
    }
}

pub fn map_to_ego(pose: [f32; 3], map: &LaneMap) -> LaneMap {
    let tx = |p: &[f32; 2]| world_to_ego(pose, *p);
    LaneMap {
        lane_boundaries: map
            .lane_boundaries
            .iter()
            .map(|line| line.iter().map(tx).collect())
            .collect(),
        drivable_polygon: map.drivable_polygon.iter().map(tx).collect(),
    }
}

fn flat(views: &[Array3<f32>]) -> Vec<f32> {
    let mut out = Vec::with_capacity(views.iter().map(|v| v.len()).sum());
    for v in views {
        out.extend(v.as_slice().expect("contiguous view"));
    }
    out
}

/// All camera views of frame `t`, flattened view-major for the scene encoder.
pub fn scene_views(ep: &Episode, t: usize) -> Vec<f32> {
    flat(&ep.frames[t].views)
}

/// Views of the up-to `bank` frames before `t`, oldest first.
pub fn history_views(ep: &Episode, t: usize, bank: usize) -> Vec<Vec<f32>> {
    let start = t.saturating_sub(bank);
    (start..t).map(|k| scene_views(ep, k)).collect()
}

/// Agents of frame `t` in its own ego frame (detection targets).
pub fn agents_ego(ep: &Episode, t: usize) -> Vec<AgentBox> {
    let pose = ep.frames[t].ego.pose;
    ep.frames[t].agents.iter().map(|a| agent_to_ego(pose, a)).collect()
}

/// Agent footprints at frames t+1..t+m, all in frame t's ego coordinates —
/// the obstacle sets the trajectory losses score against.
pub fn future_agents_ego(ep: &Episode, t: usize, m: usize) -> Vec<Vec<AgentBox>> {
    let pose = ep.frames[t].ego.pose;
    (1..=m)
        .map(|i| ep.frames[t + i].agents.iter().map(|a| agent_to_ego(pose, a)).collect())
        .collect()
}

pub fn map_ego(ep: &Episode, t: usize) -> LaneMap {
    map_to_ego(ep.frames[t].ego.pose, &ep.map)
}

/// Expert waypoints of frame `t` as an (m,2) matrix.
pub fn expert_mat(ep: &Episode, t: usize) -> Mat {
    let wp = &ep.expert[t];
    let mut m = Mat::zeros((wp.len(), 2));
    for (i, p) in wp.iter().enumerate() {
        m[(i, 0)] = p[0] as f64;
        m[(i, 1)] = p[1] as f64;
    }
    m
}

/// Low-resolution front view of frame `t`, flattened (c,h,w).
pub fn front_lo_pixels(ep: &Episode, t: usize) -> Vec<f32> {
    ep.frames[t].front_lo.as_slice().expect("contiguous").to_vec()
}

/// Full-resolution front view of frame `t`, flattened (c,h,w).
pub fn front_hi_pixels(ep: &Episode, t: usize) -> Vec<f32> {
    ep.frames[t].views[0].as_slice().expect("contiguous").to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn one_epoch_visits_every_example_exactly_once() {
        let s = Scheduler {
            seed: 3,
            n_examples: 17,
            batch_size: 4,
            text_ratio: 0.0,
            mix_text: false,
        };
        let mut seen = Vec::new();
        for step in 0..5 {
            seen.extend(s.batch(step).into_iter().map(|r| r.index));
        }
        let first_epoch: HashSet<usize> = seen[..17].iter().copied().collect();
        assert_eq!(first_epoch.len(), 17);
        assert_eq!(s.batch(2), s.batch(2));
    }

    #[test]
    fn task_mix_ratio_holds_over_many_draws() {
        let s = Scheduler {
            seed: 9,
            n_examples: 100,
            batch_size: 1,
            text_ratio: 0.25,
            mix_text: true,
        };
        let n = 10_000;
        let text = (0..n).filter(|&step| s.batch(step)[0].text).count();
        let ratio = text as f64 / n as f64;
        assert!((ratio - 0.25).abs() < 0.02, "observed ratio {ratio}");
    }

    #[test]
    fn identity_pose_is_a_no_op() {
        let p = [3.25f32, -1.5];
        assert_eq!(world_to_ego([0.0, 0.0, 0.0], p), p);
    }

    #[test]
    fn quarter_turn_pose_swaps_axes() {
        let pose = [1.0f32, 2.0, std::f32::consts::FRAC_PI_2];
        // World point one meter ahead of the ego (which faces +y).
        let p = world_to_ego(pose, [1.0, 3.0]);
        assert!((p[0] - 1.0).abs() < 1e-6);
        assert!(p[1].abs() < 1e-6);
        let back = ego_to_world(pose, p);
        assert!((back[0] - 1.0).abs() < 1e-6);
        assert!((back[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn agent_transform_preserves_shape_and_relative_heading() {
        let pose = [5.0f32, -2.0, 0.7];
        let a = AgentBox {
            center: [8.0, 1.0],
            size: [4.2, 1.9],
            yaw: 1.2,
            velocity: [2.0, 0.5],
            class_id: 1,
        };
        let e = agent_to_ego(pose, &a);
        assert_eq!(e.size, a.size);
        assert_eq!(e.class_id, a.class_id);
        assert!((e.yaw - (1.2 - 0.7)).abs() < 1e-6);
        let speed = |v: [f32; 2]| (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!((speed(e.velocity) - speed(a.velocity)).abs() < 1e-5);
        // Distance from ego origin is invariant.
        let d_world = ((8.0f32 - 5.0).powi(2) + (1.0f32 + 2.0).powi(2)).sqrt();
        let d_ego = (e.center[0].powi(2) + e.center[1].powi(2)).sqrt();
        assert!((d_world - d_ego).abs() < 1e-5);
    }

    #[test]
    fn locate_inverts_flat_indexing() {
        assert_eq!(locate(0, 12), (0, 0));
        assert_eq!(locate(13, 12), (1, 1));
        assert_eq!(locate(35, 12), (2, 11));
    }
}
