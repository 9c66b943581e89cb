//! On-disk dataset layout: a `manifest.json` describing the generator
//! configuration plus one tensor-container file per episode. Everything an
//! episode holds is f32/i32, so a save/load round trip is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use uwm_core::{read_tensors, write_tensors, ContainerError, TensorData};

use crate::types::{AgentBox, Command, EgoState, Episode, Frame, LaneMap, WorldConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("container error: {0}")]
    Container(#[from] ContainerError),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("unsupported dataset format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt episode tensor {name}: {message}")]
    Corrupt { name: String, message: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub seed: u64,
    pub path: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: WorldConfig,
    pub episodes: Vec<EpisodeEntry>,
}

fn corrupt(name: &str, message: impl Into<String>) -> DatasetError {
    DatasetError::Corrupt {
        name: name.to_string(),
        message: message.into(),
    }
}

fn episode_tensors(ep: &Episode) -> Vec<(String, TensorData)> {
    let t_total = ep.frames.len();
    let n_agents = ep.frames.first().map_or(0, |f| f.agents.len());
    let n_views = ep.frames.first().map_or(0, |f| f.views.len());

    let meta = TensorData::I32 {
        dims: vec![1, 4],
        data: vec![
            ep.usable as i32,
            ep.command.index() as i32,
            (ep.seed & 0xffff_ffff) as u32 as i32,
            (ep.seed >> 32) as u32 as i32,
        ],
    };

    let mut ego = Vec::with_capacity(t_total * 4);
    let mut agents = Vec::with_capacity(t_total * n_agents * 7);
    for f in &ep.frames {
        ego.extend_from_slice(&[f.ego.pose[0], f.ego.pose[1], f.ego.pose[2], f.ego.speed]);
        for a in &f.agents {
            agents.extend_from_slice(&[
                a.center[0],
                a.center[1],
                a.size[0],
                a.size[1],
                a.yaw,
                a.velocity[0],
                a.velocity[1],
            ]);
        }
    }
    let classes: Vec<i32> = ep.frames.first().map_or(Vec::new(), |f| {
        f.agents.iter().map(|a| a.class_id as i32).collect()
    });

    let horizon = ep.expert.first().map_or(0, |w| w.len());
    let mut waypoints = Vec::with_capacity(ep.usable * horizon * 2);
    for wp in &ep.expert {
        for w in wp {
            waypoints.extend_from_slice(w);
        }
    }

    let (res, lo_res) = (
        ep.frames.first().map_or(0, |f| f.views[0].dim().1),
        ep.frames.first().map_or(0, |f| f.front_lo.dim().1),
    );
    let mut views = Vec::with_capacity(t_total * n_views * 3 * res * res);
    let mut front_lo = Vec::with_capacity(t_total * 3 * lo_res * lo_res);
    for f in &ep.frames {
        for v in &f.views {
            views.extend_from_slice(v.as_slice().expect("contiguous view"));
        }
        front_lo.extend_from_slice(f.front_lo.as_slice().expect("contiguous view"));
    }

    let mut lane_pts = Vec::new();
    let mut lane_offsets = vec![0i32];
    for line in &ep.map.lane_boundaries {
        for p in line {
            lane_pts.extend_from_slice(p);
        }
        lane_offsets.push((lane_pts.len() / 2) as i32);
    }
    let drivable: Vec<f32> = ep.map.drivable_polygon.iter().flatten().copied().collect();

    vec![
        ("meta".into(), meta),
        (
            "ego".into(),
            TensorData::F32 {
                dims: vec![t_total, 4],
                data: ego,
            },
        ),
        (
            "agents".into(),
            TensorData::F32 {
                dims: vec![t_total, n_agents, 7],
                data: agents,
            },
        ),
        (
            "agent_class".into(),
            TensorData::I32 {
                dims: vec![1, n_agents],
                data: classes,
            },
        ),
        (
            "waypoints".into(),
            TensorData::F32 {
                dims: vec![ep.usable, horizon, 2],
                data: waypoints,
            },
        ),
        (
            "views".into(),
            TensorData::F32 {
                dims: vec![t_total, n_views, 3, res, res],
                data: views,
            },
        ),
        (
            "front_lo".into(),
            TensorData::F32 {
                dims: vec![t_total, 3, lo_res, lo_res],
                data: front_lo,
            },
        ),
        (
            "lane_pts".into(),
            TensorData::F32 {
                dims: vec![lane_pts.len() / 2, 2],
                data: lane_pts,
            },
        ),
        (
            "lane_offsets".into(),
            TensorData::I32 {
                dims: vec![1, lane_offsets.len()],
                data: lane_offsets,
            },
        ),
        (
            "drivable".into(),
            TensorData::F32 {
                dims: vec![drivable.len() / 2, 2],
                data: drivable,
            },
        ),
    ]
}

fn take<'a>(
    tensors: &'a [(String, TensorData)],
    name: &str,
) -> Result<&'a TensorData, DatasetError> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| corrupt(name, "missing tensor"))
}

fn episode_from_tensors(tensors: &[(String, TensorData)]) -> Result<Episode, DatasetError> {
    let meta = take(tensors, "meta")?
        .as_i32()
        .ok_or_else(|| corrupt("meta", "expected i32"))?;
    if meta.len() != 4 {
        return Err(corrupt("meta", format!("expected 4 entries, got {}", meta.len())));
    }
    let usable = meta[0] as usize;
    let command = Command::from_index(meta[1] as usize)
        .ok_or_else(|| corrupt("meta", format!("unknown command index {}", meta[1])))?;
    let seed = (meta[2] as u32 as u64) | ((meta[3] as u32 as u64) << 32);

    let ego_t = take(tensors, "ego")?;
    let (ego_dims, ego) = match ego_t {
        TensorData::F32 { dims, data } => (dims.clone(), data),
        _ => return Err(corrupt("ego", "expected f32")),
    };
    if ego_dims.len() != 2 || ego_dims[1] != 4 {
        return Err(corrupt("ego", format!("bad dims {ego_dims:?}")));
    }
    let t_total = ego_dims[0] as usize;

    let agents_t = take(tensors, "agents")?;
    let (ag_dims, ag) = match agents_t {
        TensorData::F32 { dims, data } => (dims.clone(), data),
        _ => return Err(corrupt("agents", "expected f32")),
    };
    if ag_dims.len() != 3 || ag_dims[0] as usize != t_total || ag_dims[2] != 7 {
        return Err(corrupt("agents", format!("bad dims {ag_dims:?}")));
    }
    let n_agents = ag_dims[1] as usize;
    let classes = take(tensors, "agent_class")?
        .as_i32()
        .ok_or_else(|| corrupt("agent_class", "expected i32"))?;
    if classes.len() != n_agents {
        return Err(corrupt("agent_class", "agent count mismatch"));
    }

    let wp_t = take(tensors, "waypoints")?;
    let (wp_dims, wp) = match wp_t {
        TensorData::F32 { dims, data } => (dims.clone(), data),
        _ => return Err(corrupt("waypoints", "expected f32")),
    };
    if wp_dims.len() != 3 || wp_dims[0] as usize != usable || wp_dims[2] != 2 {
        return Err(corrupt("waypoints", format!("bad dims {wp_dims:?}")));
    }
    let horizon = wp_dims[1] as usize;

    let views_t = take(tensors, "views")?;
    let (v_dims, views) = match views_t {
        TensorData::F32 { dims, data } => (dims.clone(), data),
        _ => return Err(corrupt("views", "expected f32")),
    };
    if v_dims.len() != 5 || v_dims[0] as usize != t_total || v_dims[2] != 3 {
        return Err(corrupt("views", format!("bad dims {v_dims:?}")));
    }
    let (n_views, res) = (v_dims[1] as usize, v_dims[3] as usize);
    if v_dims[4] as usize != res {
        return Err(corrupt("views", "non-square view"));
    }

    let lo_t = take(tensors, "front_lo")?;
    let (lo_dims, lo) = match lo_t {
        TensorData::F32 { dims, data } => (dims.clone(), data),
        _ => return Err(corrupt("front_lo", "expected f32")),
    };
    if lo_dims.len() != 4 || lo_dims[0] as usize != t_total || lo_dims[1] != 3 {
        return Err(corrupt("front_lo", format!("bad dims {lo_dims:?}")));
    }
    let lo_res = lo_dims[2] as usize;

    let view_stride = 3 * res * res;
    let lo_stride = 3 * lo_res * lo_res;
    let mut frames = Vec::with_capacity(t_total);
    for k in 0..t_total {
        let mut frame_views = Vec::with_capacity(n_views);
        for v in 0..n_views {
            let start = (k * n_views + v) * view_stride;
            let arr = Array3::from_shape_vec(
                (3, res, res),
                views[start..start + view_stride].to_vec(),
            )
            .map_err(|e| corrupt("views", e.to_string()))?;
            frame_views.push(arr);
        }
        let start = k * lo_stride;
        let front_lo = Array3::from_shape_vec(
            (3, lo_res, lo_res),
            lo[start..start + lo_stride].to_vec(),
        )
        .map_err(|e| corrupt("front_lo", e.to_string()))?;

        let e = &ego[k * 4..k * 4 + 4];
        let agents = (0..n_agents)
            .map(|i| {
                let a = &ag[(k * n_agents + i) * 7..(k * n_agents + i) * 7 + 7];
                AgentBox {
                    center: [a[0], a[1]],
                    size: [a[2], a[3]],
                    yaw: a[4],
                    velocity: [a[5], a[6]],
                    class_id: classes[i] as u8,
                }
            })
            .collect();
        frames.push(Frame {
            timestamp_index: k as u32,
            ego: EgoState {
                pose: [e[0], e[1], e[2]],
                speed: e[3],
                command,
            },
            agents,
            views: frame_views,
            front_lo,
        });
    }

    let expert = (0..usable)
        .map(|t| {
            (0..horizon)
                .map(|i| {
                    let s = (t * horizon + i) * 2;
                    [wp[s], wp[s + 1]]
                })
                .collect()
        })
        .collect();

    let lane_pts = take(tensors, "lane_pts")?
        .as_f32()
        .ok_or_else(|| corrupt("lane_pts", "expected f32"))?;
    let offsets = take(tensors, "lane_offsets")?
        .as_i32()
        .ok_or_else(|| corrupt("lane_offsets", "expected i32"))?;
    let mut lane_boundaries = Vec::new();
    for w in offsets.windows(2) {
        let (a, b) = (w[0] as usize, w[1] as usize);
        if b < a || b * 2 > lane_pts.len() {
            return Err(corrupt("lane_offsets", "offsets out of range"));
        }
        lane_boundaries.push((a..b).map(|i| [lane_pts[i * 2], lane_pts[i * 2 + 1]]).collect());
    }
    let drivable = take(tensors, "drivable")?
        .as_f32()
        .ok_or_else(|| corrupt("drivable", "expected f32"))?;
    let drivable_polygon = drivable.chunks_exact(2).map(|p| [p[0], p[1]]).collect();

    Ok(Episode {
        seed,
        command,
        frames,
        usable,
        expert,
        map: LaneMap {
            lane_boundaries,
            drivable_polygon,
        },
    })
}

pub fn write_episode(path: &Path, ep: &Episode) -> Result<(), DatasetError> {
    Ok(write_tensors(path, &episode_tensors(ep))?)
}

pub fn read_episode(path: &Path) -> Result<Episode, DatasetError> {
    episode_from_tensors(&read_tensors(path)?)
}

/// Write `manifest.json` plus one container file per episode.
pub fn save_dataset(
    dir: &Path,
    config: &WorldConfig,
    episodes: &[Episode],
) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let name = format!("ep_{i:05}.uwm");
        write_episode(&dir.join(&name), ep)?;
        entries.push(EpisodeEntry {
            seed: ep.seed,
            path: name,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        episodes: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DatasetError::Manifest(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let raw = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&raw).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatasetError::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

pub fn episode_paths(dir: &Path, manifest: &DatasetManifest) -> Vec<PathBuf> {
    manifest.episodes.iter().map(|e| dir.join(&e.path)).collect()
}

/// Load every episode listed in the manifest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Episode>), DatasetError> {
    let manifest = load_manifest(dir)?;
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for entry in &manifest.episodes {
        let ep = read_episode(&dir.join(&entry.path))?;
        if ep.seed != entry.seed {
            return Err(corrupt(
                &entry.path,
                format!("manifest seed {} != stored seed {}", entry.seed, ep.seed),
            ));
        }
        episodes.push(ep);
    }
    Ok((manifest, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::generate_episode;

    fn tiny_config() -> WorldConfig {
        let mut cfg = WorldConfig::default();
        cfg.frames = 3;
        cfg.horizon = 2;
        cfg.future_offset = 1;
        cfg.view.resolution = 16;
        cfg.lo_resolution = 8;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny_config();
        let eps: Vec<Episode> = (0..2)
            .map(|s| generate_episode(s, &cfg).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &cfg, &eps).unwrap();
        let (manifest, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.episodes.len(), 2);
        assert_eq!(eps, loaded);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &cfg, &[]).unwrap();
        let raw = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let bumped = raw.replacen("\"format_version\": 1", "\"format_version\": 99", 1);
        fs::write(dir.path().join("manifest.json"), bumped).unwrap();
        match load_manifest(dir.path()) {
            Err(DatasetError::Version { found: 99, expected: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_is_reported_by_name() {
        let cfg = tiny_config();
        let ep = generate_episode(0, &cfg).unwrap();
        let mut tensors = episode_tensors(&ep);
        tensors.retain(|(n, _)| n != "waypoints");
        match episode_from_tensors(&tensors) {
            Err(DatasetError::Corrupt { name, .. }) => assert_eq!(name, "waypoints"),
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }
}
