//! Procedural episode synthesis. A scene draw places a road template and a
//! handful of agents; a dynamic-programming speed planner then drives the
//! ego along its lane under acceleration, curvature, and clearance
//! constraints. Draws with no feasible plan are rejected and retried.
//!
//! Clearance margins are deliberately wider than the margins used by the
//! collision penalty (0.5 m) and the evaluator's ego footprint, so expert
//! trajectories score exactly zero on both by construction.

use crate::geometry::{obb_overlap, obb_sdf, polygon_sdf, Obb, Vec2};
use crate::render::render_views;
use crate::types::{
    AgentBox, Command, EgoState, Episode, Frame, LaneMap, ViewSpec, WorldConfig, WorldError, DT,
};
use uwm_core::DetRng;

pub type GenError = WorldError;

/// Ego footprint (length, width) used for clearance and evaluation.
pub const EGO_SIZE: (f64, f64) = (4.0, 1.8);
/// Extra inflation of the ego footprint during expert planning.
const PLAN_MARGIN: f64 = 0.5;
/// Minimum ego-center clearance to any agent footprint during planning;
/// keeps the waypoint collision penalty (margin 0.5 m) strictly at zero.
const CENTER_CLEARANCE: f64 = 0.6;
/// Speed quantum of the planner grid, m/s.
const V_QUANT: f64 = 0.5;

#[derive(Clone, Copy, PartialEq)]
enum Template {
    Straight,
    CurveLeft,
    CurveRight,
}

/// Road geometry: a centerline parameterized by arclength with two lanes.
struct Road {
    template: Template,
    radius: f64,
    length: f64,
    lane_width: f64,
}

impl Road {
    fn new(template: Template, lane_width: f64) -> Self {
        Road {
            template,
            radius: 40.0,
            length: 90.0,
            lane_width,
        }
    }

    /// Centerline pose at arclength `s`, shifted `offset` meters to the left.
    /// Returns (position, yaw, curvature).
    fn point(&self, s: f64, offset: f64) -> (Vec2, f64, f64) {
        let (base, yaw, kappa) = match self.template {
            Template::Straight => (Vec2::new(s, 0.0), 0.0, 0.0),
            Template::CurveLeft => {
                let th = s / self.radius;
                (
                    Vec2::new(self.radius * th.sin(), self.radius * (1.0 - th.cos())),
                    th,
                    1.0 / self.radius,
                )
            }
            Template::CurveRight => {
                let th = s / self.radius;
                (
                    Vec2::new(self.radius * th.sin(), -self.radius * (1.0 - th.cos())),
                    -th,
                    -1.0 / self.radius,
                )
            }
        };
        let normal = Vec2::new(-yaw.sin(), yaw.cos());
        (base.add(normal.scale(offset)), yaw, kappa)
    }

    fn lane_offset(&self, lane: usize) -> f64 {
        // Lane 0 is the ego (right) lane, lane 1 the left lane.
        if lane == 0 {
            -self.lane_width / 2.0
        } else {
            self.lane_width / 2.0
        }
    }

    fn lane_map(&self) -> LaneMap {
        let sample = |offset: f64, step: f64| -> Vec<[f32; 2]> {
            let n = (self.length / step).ceil() as usize;
            (0..=n)
                .map(|i| {
                    let s = (i as f64 * step).min(self.length);
                    let (p, _, _) = self.point(s, offset);
                    [p.x as f32, p.y as f32]
                })
                .collect()
        };
        let w = self.lane_width;
        let left_edge = sample(w, 2.0);
        let center = sample(0.0, 2.0);
        let right_edge = sample(-w, 2.0);
        // Counterclockwise boundary: along the right edge, back along the left.
        let mut polygon = sample(-w, 3.0);
        let mut back = sample(w, 3.0);
        back.reverse();
        polygon.extend(back);
        LaneMap {
            lane_boundaries: vec![left_edge, center, right_edge],
            drivable_polygon: polygon,
        }
    }
}

struct AgentScript {
    s0: f64,
    speed: f64,
    from_lane: usize,
    to_lane: usize,
    /// Lane-change window [start, start+len) in frames; empty when staying.
    change_start: usize,
    change_len: usize,
    size: (f64, f64),
    class_id: u8,
}

impl AgentScript {
    fn state_at(&self, road: &Road, k: usize) -> AgentBox {
        let s = self.s0 + self.speed * DT * k as f64;
        let from = road.lane_offset(self.from_lane);
        let to = road.lane_offset(self.to_lane);
        let offset = if self.change_len == 0 || k <= self.change_start {
            from
        } else if k >= self.change_start + self.change_len {
            to
        } else {
            let u = (k - self.change_start) as f64 / self.change_len as f64;
            let smooth = u * u * (3.0 - 2.0 * u);
            from + (to - from) * smooth
        };
        let (p, yaw, _) = road.point(s, offset);
        let tangent = Vec2::new(yaw.cos(), yaw.sin());
        AgentBox {
            center: [p.x as f32, p.y as f32],
            size: [self.size.0 as f32, self.size.1 as f32],
            yaw: yaw as f32,
            velocity: [
                (tangent.x * self.speed) as f32,
                (tangent.y * self.speed) as f32,
            ],
            class_id: self.class_id,
        }
    }
}

struct SceneDraw {
    road: Road,
    command: Command,
    v0_idx: usize,
    agents: Vec<AgentScript>,
}

fn draw_scene(seed: u64, attempt: usize, config: &WorldConfig) -> SceneDraw {
    let mut rng = DetRng::indexed(seed, "scene", attempt as u64, 0);
    let template_name = &config.templates[rng.below(config.templates.len())];
    let template = match template_name.as_str() {
        "curve_left" => Template::CurveLeft,
        "curve_right" => Template::CurveRight,
        _ => Template::Straight,
    };
    let road = Road::new(template, config.lane_width);
    let stopping = rng.uniform() < config.stop_prob;
    let command = if stopping {
        Command::Stop
    } else {
        match template {
            Template::CurveLeft => Command::Left,
            Template::CurveRight => Command::Right,
            Template::Straight => Command::Straight,
        }
    };
    // Initial ego speed: 3.0–5.0 m/s on the planner grid.
    let v0_idx = 6 + rng.below(5);

    let mut agents = Vec::new();
    if stopping {
        agents.push(AgentScript {
            s0: 22.0 + rng.uniform() * 8.0,
            speed: 0.0,
            from_lane: 0,
            to_lane: 0,
            change_start: 0,
            change_len: 0,
            size: (4.4, 1.9),
            class_id: 0,
        });
    }
    let span = config.agents_max - config.agents_min;
    let extra = config.agents_min
        + if span > 0 {
            rng.below(span + 1)
        } else {
            0
        };
    let travel_time = DT * (config.frames + config.horizon) as f64;
    // Around a stopped blocker all other traffic keeps to the passing lane,
    // otherwise scripted agents pile into the queue.
    let lanes: Vec<usize> = (0..extra)
        .map(|_| if stopping { 1 } else { rng.below(2) })
        .collect();
    for lane in 0..2 {
        let members = lanes.iter().filter(|&&l| l == lane).count();
        if members == 0 {
            continue;
        }
        // Disjoint spawn slots per lane so initial gaps never collapse, and
        // speed growing with position so the gaps do not close later. The
        // cap keeps every agent on the road for the whole episode.
        let lo = if lane == 0 { 12.0 } else { 5.0 };
        let hi = if stopping { 70.0 } else { 55.0 };
        let slot = (hi - lo) / members as f64;
        let first = agents.len();
        for j in 0..members {
            let s0 = lo + slot * (j as f64 + 0.2 + 0.6 * rng.uniform());
            let frac = (s0 - lo) / (hi - lo);
            let speed = (1.5 + 4.5 * frac + rng.range(-0.5, 0.5))
                .clamp(0.5, ((road.length - 6.0 - s0) / travel_time).min(6.0));
            let truck = rng.uniform() < 0.25;
            let (len, wid) = if truck {
                (5.5 + rng.uniform(), 2.0 + rng.uniform() * 0.3)
            } else {
                (4.0 + rng.uniform() * 0.6, 1.7 + rng.uniform() * 0.2)
            };
            let changes = !stopping && rng.uniform() < 0.2;
            agents.push(AgentScript {
                s0,
                speed,
                from_lane: lane,
                to_lane: if changes { 1 - lane } else { lane },
                change_start: 2 + rng.below(5),
                change_len: if changes { 6 } else { 0 },
                size: (len, wid),
                class_id: truck as u8,
            });
        }
        // No car may outrun the one ahead of it (the on-road speed cap can
        // otherwise leave a front car slower than the traffic behind it).
        for j in (first..agents.len().saturating_sub(1)).rev() {
            agents[j].speed = agents[j].speed.min(agents[j + 1].speed);
        }
    }
    SceneDraw {
        road,
        command,
        v0_idx,
        agents,
    }
}

/// Agents must stay on the road and never collide with each other.
fn agents_consistent(draw: &SceneDraw, total_frames: usize) -> bool {
    for k in 0..total_frames {
        let boxes: Vec<Obb> = draw
            .agents
            .iter()
            .map(|a| a.state_at(&draw.road, k).obb())
            .collect();
        for (i, a) in draw.agents.iter().enumerate() {
            let s = a.s0 + a.speed * DT * k as f64;
            if s < 2.0 || s > draw.road.length - 5.0 {
                return false;
            }
            for j in i + 1..boxes.len() {
                if obb_overlap(&boxes[i].inflate(0.3), &boxes[j]) {
                    return false;
                }
            }
        }
    }
    true
}

/// Dynamic program over (frame, arclength, speed) on a quantized grid.
/// Returns per-frame (arclength, speed) for the lowest-cost feasible plan.
fn plan_speed_profile(
    draw: &SceneDraw,
    config: &WorldConfig,
    total_frames: usize,
) -> Option<Vec<(f64, f64)>> {
    // Plan past the end of the episode (agent scripts extrapolate), so the
    // optimum cannot exploit the horizon by coasting into an obstacle it
    // would only hit after the last scored frame.
    let padded = total_frames + 8;
    let v_max_idx = (config.max_speed / V_QUANT).round() as usize;
    let dv_max = ((config.max_accel * DT) / V_QUANT).floor() as usize;
    let s_quant = V_QUANT * DT; // 0.25 m per index step
    let n_s = v_max_idx * padded + 1;
    let n_v = v_max_idx + 1;
    let ego_offset = draw.road.lane_offset(0);
    let v_target = (config.max_speed * 0.75 / V_QUANT).round() as usize;

    // Precompute per-frame agent boxes.
    let frame_boxes: Vec<Vec<Obb>> = (0..padded)
        .map(|k| {
            draw.agents
                .iter()
                .map(|a| a.state_at(&draw.road, k).obb())
                .collect()
        })
        .collect();

    // Feasibility of ego standing at arclength index `si` on frame `k`
    // with speed index `vi`.
    let feasible = |k: usize, si: usize, vi: usize| -> bool {
        let s = si as f64 * s_quant;
        if s > draw.road.length - 8.0 {
            return false;
        }
        let (p, yaw, kappa) = draw.road.point(s, ego_offset);
        let v = vi as f64 * V_QUANT;
        if kappa.abs() > 1e-9 && v > config.max_yaw_rate / kappa.abs() {
            return false;
        }
        let ego = Obb::new(p, EGO_SIZE.0, EGO_SIZE.1, yaw).inflate(PLAN_MARGIN);
        for b in &frame_boxes[k] {
            if obb_overlap(&ego, b) {
                return false;
            }
            if obb_sdf(p, b) < CENTER_CLEARANCE {
                return false;
            }
        }
        true
    };

    const INF: f64 = f64::INFINITY;
    let idx = |si: usize, vi: usize| si * n_v + vi;
    let mut cost = vec![INF; n_s * n_v];
    let mut prev_cost = vec![INF; n_s * n_v];
    // Parent speed index per (frame, state) for backtracking.
    let mut parent = vec![u8::MAX; padded * n_s * n_v];

    if !feasible(0, 0, draw.v0_idx) {
        return None;
    }
    prev_cost[idx(0, draw.v0_idx)] = 0.0;

    for k in 1..padded {
        cost.fill(INF);
        for si in 0..n_s {
            for vi in 0..n_v {
                let c0 = prev_cost[idx(si, vi)];
                if !c0.is_finite() {
                    continue;
                }
                let lo = vi.saturating_sub(dv_max);
                let hi = (vi + dv_max).min(v_max_idx);
                for nvi in lo..=hi {
                    let nsi = si + nvi; // Δs = v'·dt = nvi · 0.25 m
                    if nsi >= n_s {
                        continue;
                    }
                    let dv = nvi as f64 - vi as f64;
                    let verr = nvi as f64 - v_target as f64;
                    // Discounting speed error makes a blocked ego cover
                    // distance early and brake late instead of creeping,
                    // while an unobstructed ego still just holds target
                    // speed. The smoothness term stays undiscounted.
                    let discount = 0.8f64.powi(k as i32);
                    let step_cost = discount * verr * verr + 0.5 * dv * dv;
                    let c = c0 + step_cost;
                    let slot = idx(nsi, nvi);
                    if c < cost[slot] && feasible(k, nsi, nvi) {
                        cost[slot] = c;
                        parent[k * n_s * n_v + slot] = vi as u8;
                    }
                }
            }
        }
        std::mem::swap(&mut cost, &mut prev_cost);
    }

    // Best terminal state; fixed iteration order makes ties deterministic.
    let mut best: Option<(usize, usize, f64)> = None;
    for si in 0..n_s {
        for vi in 0..n_v {
            let c = prev_cost[idx(si, vi)];
            if c.is_finite() && best.map_or(true, |(_, _, bc)| c < bc) {
                best = Some((si, vi, c));
            }
        }
    }
    let (mut si, mut vi, _) = best?;

    let mut states = vec![(0.0, 0.0); padded];
    for k in (1..padded).rev() {
        states[k] = (si as f64 * s_quant, vi as f64 * V_QUANT);
        let pv = parent[k * n_s * n_v + idx(si, vi)];
        debug_assert_ne!(pv, u8::MAX);
        si -= vi; // Δs of the step that arrived here
        vi = pv as usize;
    }
    states[0] = (0.0, draw.v0_idx as f64 * V_QUANT);
    states.truncate(total_frames);
    Some(states)
}

fn world_to_ego(pose: [f32; 3], p: Vec2) -> [f32; 2] {
    let rel = p
        .sub(Vec2::new(pose[0] as f64, pose[1] as f64))
        .rot(-(pose[2] as f64));
    [rel.x as f32, rel.y as f32]
}

/// Generate one episode deterministically from (seed, config).
pub fn generate_episode(seed: u64, config: &WorldConfig) -> Result<Episode, WorldError> {
    assert!(config.future_offset <= config.horizon, "future frame must lie within the waypoint horizon");
    let total_frames = config.frames + config.horizon;
    for attempt in 0..config.retries.max(1) {
        let draw = draw_scene(seed, attempt, config);
        if !agents_consistent(&draw, total_frames) {
            continue;
        }
        let Some(profile) = plan_speed_profile(&draw, config, total_frames) else {
            continue;
        };
        return Ok(assemble_episode(seed, config, draw, profile, total_frames)?);
    }
    Err(WorldError::GenerationInfeasible {
        seed,
        retries: config.retries,
    })
}

fn assemble_episode(
    seed: u64,
    config: &WorldConfig,
    draw: SceneDraw,
    profile: Vec<(f64, f64)>,
    total_frames: usize,
) -> Result<Episode, WorldError> {
    let map = draw.road.lane_map();
    let ego_offset = draw.road.lane_offset(0);

    let poses: Vec<[f32; 3]> = profile
        .iter()
        .map(|&(s, _)| {
            let (p, yaw, _) = draw.road.point(s, ego_offset);
            [p.x as f32, p.y as f32, yaw as f32]
        })
        .collect();

    let lo_spec = ViewSpec {
        headings_deg: vec![0.0],
        resolution: config.lo_resolution,
        ..config.view.clone()
    };

    let mut frames = Vec::with_capacity(total_frames);
    for k in 0..total_frames {
        let agents: Vec<AgentBox> = draw
            .agents
            .iter()
            .map(|a| a.state_at(&draw.road, k))
            .collect();
        let views = render_views(poses[k], &agents, &map, &config.view)?;
        let front_lo = render_views(poses[k], &agents, &map, &lo_spec)?
            .pop()
            .expect("one low-res view");
        frames.push(Frame {
            timestamp_index: k as u32,
            ego: EgoState {
                pose: poses[k],
                speed: profile[k].1 as f32,
                command: draw.command,
            },
            agents,
            views,
            front_lo,
        });
    }

    let usable = config.frames;
    let mut expert = Vec::with_capacity(usable);
    for t in 0..usable {
        let wp: Vec<[f32; 2]> = (1..=config.horizon)
            .map(|i| {
                let p = Vec2::new(poses[t + i][0] as f64, poses[t + i][1] as f64);
                world_to_ego(poses[t], p)
            })
            .collect();
        expert.push(wp);
    }

    // Belt and braces: the planner's margins must guarantee clearance and
    // containment at every labeled waypoint.
    let drivable = map.drivable_f64();
    for (t, wp) in expert.iter().enumerate() {
        for (i, w) in wp.iter().enumerate() {
            let world = Vec2::new(poses[t][0] as f64, poses[t][1] as f64).add(
                Vec2::new(w[0] as f64, w[1] as f64).rot(poses[t][2] as f64),
            );
            debug_assert!(polygon_sdf(world, &drivable) > 0.0);
            for a in &frames[t + 1 + i].agents {
                debug_assert!(obb_sdf(world, &a.obb()) >= CENTER_CLEARANCE - 1e-6);
            }
        }
    }

    Ok(Episode {
        seed,
        command: draw.command,
        frames,
        usable,
        expert,
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point_in_polygon;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = WorldConfig::default();
        let a = generate_episode(0, &cfg).unwrap();
        let b = generate_episode(0, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = WorldConfig::default();
        let a = generate_episode(0, &cfg).unwrap();
        let b = generate_episode(1, &cfg).unwrap();
        assert_ne!(a, b, "seed should change the scene");
    }

    #[test]
    fn episode_shape_contract() {
        let cfg = WorldConfig::default();
        let ep = generate_episode(7, &cfg).unwrap();
        assert_eq!(ep.frames.len(), cfg.frames + cfg.horizon);
        assert_eq!(ep.usable, cfg.frames);
        assert_eq!(ep.expert.len(), cfg.frames);
        assert!(ep.expert.iter().all(|w| w.len() == cfg.horizon));
        for f in &ep.frames {
            assert_eq!(f.views.len(), 3);
            assert_eq!(f.views[0].dim(), (3, 64, 64));
            assert_eq!(f.front_lo.dim(), (3, 32, 32));
            assert!(f.ego.speed >= 0.0);
        }
    }

    #[test]
    fn waypoints_stay_inside_drivable_polygon() {
        let cfg = WorldConfig::default();
        for seed in 0..10 {
            let ep = generate_episode(seed, &cfg).unwrap();
            let poly = ep.map.drivable_f64();
            for (t, wp) in ep.expert.iter().enumerate() {
                let pose = ep.frames[t].ego.pose;
                for w in wp {
                    let world = Vec2::new(pose[0] as f64, pose[1] as f64)
                        .add(Vec2::new(w[0] as f64, w[1] as f64).rot(pose[2] as f64));
                    assert!(
                        point_in_polygon(world, &poly),
                        "waypoint left the road (seed {seed}, frame {t})"
                    );
                }
            }
        }
    }

    #[test]
    fn waypoints_clear_agents_at_matching_future_frames() {
        let cfg = WorldConfig::default();
        for seed in 20..30 {
            let ep = generate_episode(seed, &cfg).unwrap();
            for (t, wp) in ep.expert.iter().enumerate() {
                let pose = ep.frames[t].ego.pose;
                for (i, w) in wp.iter().enumerate() {
                    let world = Vec2::new(pose[0] as f64, pose[1] as f64)
                        .add(Vec2::new(w[0] as f64, w[1] as f64).rot(pose[2] as f64));
                    for a in &ep.frames[t + 1 + i].agents {
                        let d = obb_sdf(world, &a.obb());
                        assert!(
                            d >= CENTER_CLEARANCE - 1e-6,
                            "clearance {d:.3} m at seed {seed}, frame {t}, step {i}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn expert_respects_kinematic_limits() {
        let cfg = WorldConfig::default();
        for seed in 40..46 {
            let ep = generate_episode(seed, &cfg).unwrap();
            for w in ep.frames.windows(2) {
                let dv = (w[1].ego.speed - w[0].ego.speed) as f64;
                assert!(dv.abs() <= cfg.max_accel * DT + 1e-6);
                assert!((w[1].ego.speed as f64) <= cfg.max_speed + 1e-6);
            }
        }
    }

    #[test]
    fn stop_scenarios_actually_stop() {
        let mut cfg = WorldConfig::default();
        cfg.stop_prob = 1.0;
        let ep = generate_episode(3, &cfg).unwrap();
        assert_eq!(ep.command, Command::Stop);
        let final_speed = ep.frames.last().unwrap().ego.speed;
        assert!(
            final_speed < 1.0,
            "blocked ego should be (nearly) stopped, got {final_speed}"
        );
    }

    #[test]
    fn drivable_polygon_is_simple() {
        for name in ["straight", "curve_left", "curve_right"] {
            let road = Road::new(
                match name {
                    "curve_left" => Template::CurveLeft,
                    "curve_right" => Template::CurveRight,
                    _ => Template::Straight,
                },
                3.5,
            );
            let map = road.lane_map();
            let poly = map.drivable_f64();
            assert!(crate::geometry::polygon_is_simple(&poly), "{name}");
        }
    }
}
