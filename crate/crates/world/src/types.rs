//! Scene and episode data types shared across generation, rendering,
//! training, and evaluation. Numeric payloads are `f32` end to end so the
//! on-disk form and the in-memory form round-trip exactly.

use crate::geometry::{Obb, Vec2};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// High-level navigation instruction conditioning the planner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    Left,
    Right,
    Straight,
    Stop,
}

impl Command {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            Command::Left => 0,
            Command::Right => 1,
            Command::Straight => 2,
            Command::Stop => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Command> {
        match i {
            0 => Some(Command::Left),
            1 => Some(Command::Right),
            2 => Some(Command::Straight),
            3 => Some(Command::Stop),
            _ => None,
        }
    }
}

/// One dynamic agent as a BEV footprint with instantaneous velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentBox {
    pub center: [f32; 2],
    /// (length, width) in meters; both positive.
    pub size: [f32; 2],
    /// Radians in [−π, π).
    pub yaw: f32,
    pub velocity: [f32; 2],
    pub class_id: u8,
}

impl AgentBox {
    pub fn obb(&self) -> Obb {
        Obb::new(
            Vec2::new(self.center[0] as f64, self.center[1] as f64),
            self.size[0] as f64,
            self.size[1] as f64,
            self.yaw as f64,
        )
    }
}

/// Static road description: painted boundaries and the drivable region.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneMap {
    /// Polylines in world meters (left edge, centerline, right edge, …).
    pub lane_boundaries: Vec<Vec<[f32; 2]>>,
    /// Simple polygon in world meters, counterclockwise.
    pub drivable_polygon: Vec<[f32; 2]>,
}

impl LaneMap {
    pub fn drivable_f64(&self) -> Vec<Vec2> {
        self.drivable_polygon
            .iter()
            .map(|p| Vec2::new(p[0] as f64, p[1] as f64))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoState {
    /// (x, y, yaw) in world frame.
    pub pose: [f32; 3],
    /// Nonnegative speed in m/s.
    pub speed: f32,
    pub command: Command,
}

/// One simulation step: ego, agents, and the rendered sensor rasters.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Index on the 2 Hz grid.
    pub timestamp_index: u32,
    pub ego: EgoState,
    pub agents: Vec<AgentBox>,
    /// K views, each (channels, H, W) in [0,1]. Front, left, right.
    pub views: Vec<Array3<f32>>,
    /// Low-resolution front view, the target for discrete tokenization.
    pub front_lo: Array3<f32>,
}

/// A full clip: frames at 2 Hz, per-frame expert waypoints in the ego frame,
/// and the static map. Frames `0..usable` carry supervision targets; the
/// tail exists so the last supervised frame still has `m` future steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub command: Command,
    pub frames: Vec<Frame>,
    /// Number of frames with expert waypoints (= frames.len() − horizon).
    pub usable: usize,
    /// `expert[t][i]` = ego position at frame t+1+i, in frame t's ego frame.
    pub expert: Vec<Vec<[f32; 2]>>,
    pub map: LaneMap,
}

impl Episode {
    pub fn horizon(&self) -> usize {
        self.frames.len() - self.usable
    }
}

/// Camera-rig description: sector views on a square BEV region.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ViewSpec {
    /// Heading offsets (degrees) of each view relative to ego yaw.
    pub headings_deg: Vec<f64>,
    /// Output resolution (H = W) per view.
    pub resolution: usize,
    /// Forward extent of the square view window, meters.
    pub range_m: f64,
    /// Field-of-view of the sector mask, degrees.
    pub fov_deg: f64,
}

impl Default for ViewSpec {
    fn default() -> Self {
        ViewSpec {
            headings_deg: vec![0.0, 90.0, -90.0],
            resolution: 64,
            range_m: 32.0,
            fov_deg: 90.0,
        }
    }
}

/// Everything that determines a generated scene besides the seed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WorldConfig {
    /// Supervised frames per episode (the clip also simulates `horizon`
    /// extra frames so every supervised frame has full waypoint labels).
    pub frames: usize,
    /// Waypoint horizon m on the 2 Hz grid.
    pub horizon: usize,
    /// Future-frame prediction offset n (must be ≤ horizon).
    pub future_offset: usize,
    pub agents_min: usize,
    pub agents_max: usize,
    /// Road templates drawn uniformly: "straight", "curve_left", "curve_right".
    pub templates: Vec<String>,
    pub view: ViewSpec,
    /// Resolution of the low-res front view used by the tokenizer.
    pub lo_resolution: usize,
    pub lane_width: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    pub max_yaw_rate: f64,
    /// Probability of a blocked-lane scenario forcing a stop.
    pub stop_prob: f64,
    /// Rejection-sampling retry budget per seed.
    pub retries: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            frames: 12,
            horizon: 6,
            future_offset: 2,
            agents_min: 2,
            agents_max: 4,
            templates: vec![
                "straight".to_string(),
                "curve_left".to_string(),
                "curve_right".to_string(),
            ],
            view: ViewSpec::default(),
            lo_resolution: 32,
            lane_width: 3.5,
            max_speed: 8.0,
            max_accel: 3.0,
            max_yaw_rate: 1.0,
            stop_prob: 0.25,
            retries: 20,
        }
    }
}

/// Seconds between frames on the 2 Hz grid.
pub const DT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("no feasible expert trajectory after {retries} scene draws (seed {seed})")]
    GenerationInfeasible { seed: u64, retries: usize },
    #[error("invalid view specification: {0}")]
    InvalidViewSpec(String),
}
