//! Bird's-eye sector rasterization. Each view is a square window in
//! view-local coordinates (forward × lateral), masked to a field-of-view
//! sector, with three channels: drivable area, lane lines, agent footprints.
//! The ego vehicle itself is never drawn.

use crate::geometry::{dist_point_segment, point_in_polygon, Vec2};
use crate::types::{AgentBox, LaneMap, ViewSpec, WorldError};
use ndarray::Array3;

/// Half-width, in meters, of a painted lane line in the raster.
const LINE_HALF_WIDTH: f64 = 0.35;

pub const CH_DRIVABLE: usize = 0;
pub const CH_LANES: usize = 1;
pub const CH_AGENTS: usize = 2;
pub const CHANNELS: usize = 3;

pub fn validate_view_spec(spec: &ViewSpec) -> Result<(), WorldError> {
    if spec.headings_deg.is_empty() {
        return Err(WorldError::InvalidViewSpec("no view headings".into()));
    }
    if spec.resolution == 0 {
        return Err(WorldError::InvalidViewSpec("zero resolution".into()));
    }
    if spec.range_m <= 0.0 {
        return Err(WorldError::InvalidViewSpec(format!(
            "non-positive range {}",
            spec.range_m
        )));
    }
    if spec.fov_deg <= 0.0 || spec.fov_deg >= 180.0 {
        return Err(WorldError::InvalidViewSpec(format!(
            "field of view {}° has zero or degenerate sector area",
            spec.fov_deg
        )));
    }
    Ok(())
}

/// Rasterize all views of `spec` for an ego at `pose` = (x, y, yaw).
pub fn render_views(
    pose: [f32; 3],
    agents: &[AgentBox],
    map: &LaneMap,
    spec: &ViewSpec,
) -> Result<Vec<Array3<f32>>, WorldError> {
    validate_view_spec(spec)?;
    let mut out = Vec::with_capacity(spec.headings_deg.len());
    for heading in &spec.headings_deg {
        out.push(render_one(pose, agents, map, spec, heading.to_radians()));
    }
    Ok(out)
}

fn render_one(
    pose: [f32; 3],
    agents: &[AgentBox],
    map: &LaneMap,
    spec: &ViewSpec,
    heading: f64,
) -> Array3<f32> {
    let res = spec.resolution;
    let range = spec.range_m;
    let tan_half = (spec.fov_deg.to_radians() / 2.0).tan();
    let origin = Vec2::new(pose[0] as f64, pose[1] as f64);
    let view_yaw = pose[2] as f64 + heading;
    let drivable = map.drivable_f64();
    let lanes: Vec<Vec<Vec2>> = map
        .lane_boundaries
        .iter()
        .map(|line| {
            line.iter()
                .map(|p| Vec2::new(p[0] as f64, p[1] as f64))
                .collect()
        })
        .collect();
    let boxes: Vec<_> = agents.iter().map(|a| a.obb()).collect();

    let mut img = Array3::<f32>::zeros((CHANNELS, res, res));
    for i in 0..res {
        // Row 0 is the far edge of the window.
        let fwd = range * (1.0 - (i as f64 + 0.5) / res as f64);
        for j in 0..res {
            let lat = range * (0.5 - (j as f64 + 0.5) / res as f64);
            if lat.abs() > fwd * tan_half {
                continue; // outside the sector mask
            }
            let p = origin.add(Vec2::new(fwd, lat).rot(view_yaw));
            if !drivable.is_empty() && point_in_polygon(p, &drivable) {
                img[(CH_DRIVABLE, i, j)] = 1.0;
            }
            for line in &lanes {
                if near_polyline(p, line, LINE_HALF_WIDTH) {
                    img[(CH_LANES, i, j)] = 1.0;
                    break;
                }
            }
            for b in &boxes {
                if b.contains(p) {
                    img[(CH_AGENTS, i, j)] = 1.0;
                    break;
                }
            }
        }
    }
    img
}

/// Distance test against a polyline with a cheap bounding-box reject per
/// segment (rasters touch every pixel, so this is the hot path).
fn near_polyline(p: Vec2, line: &[Vec2], tol: f64) -> bool {
    for w in line.windows(2) {
        let (a, b) = (w[0], w[1]);
        if p.x < a.x.min(b.x) - tol
            || p.x > a.x.max(b.x) + tol
            || p.y < a.y.min(b.y) - tol
            || p.y > a.y.max(b.y) + tol
        {
            continue;
        }
        if dist_point_segment(p, a, b) <= tol {
            return true;
        }
    }
    false
}
