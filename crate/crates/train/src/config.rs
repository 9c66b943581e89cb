//! One JSON configuration shared by every subcommand. Sections map onto the
//! module configs; scripted overrides (`--set section.key=value`) edit the
//! JSON tree before deserialization, so an unknown key fails loudly with its
//! name. The canonical hash ties checkpoints to the exact configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use uwm_model::gen_fm::{FmConfig, FmInit};
use uwm_model::layout::{HeadOrder, LayoutSpec, Mode};
use uwm_model::planner::PlannerConfig;
use uwm_model::qt::QtConfig;
use uwm_model::reasoner::ReasonerConfig;
use uwm_model::vocab::Vocab;
use uwm_model::vq::VqConfig;
use uwm_world::WorldConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config key: {0}")]
    Key(String),
    #[error("override {0:?} is not KEY=VALUE")]
    Override(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Episodes generated/loaded for training.
    pub episodes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { episodes: 8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub f: usize,
    pub hidden: usize,
    pub d_code: usize,
    pub n_codes: usize,
    pub beta: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Steps of joint embedding/decoder pretraining for the continuous head.
    pub semantic_steps: usize,
    pub semantic_lr: f64,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection {
            f: 4,
            hidden: 64,
            d_code: 64,
            n_codes: 256,
            beta: 0.25,
            steps: 1200,
            batch: 8,
            lr: 3e-3,
            semantic_steps: 1500,
            semantic_lr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub d_z: usize,
    pub c_q: usize,
    pub n_scene: usize,
    pub n_perception: usize,
    pub n_history: usize,
    pub bank_frames: usize,
    pub qt_hidden: usize,
    pub qt_heads: usize,
    pub n_classes: usize,
    pub plan_hidden: usize,
    pub plan_d_h: usize,
    pub collision_margin: f64,
    pub boundary_margin: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 256,
            n_layers: 4,
            n_heads: 8,
            d_ff: 512,
            max_len: 160,
            d_z: 32,
            c_q: 64,
            n_scene: 32,
            n_perception: 24,
            n_history: 8,
            bank_frames: 8,
            qt_hidden: 128,
            qt_heads: 4,
            n_classes: 2,
            plan_hidden: 64,
            plan_d_h: 64,
            collision_margin: 0.5,
            boundary_margin: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FmSection {
    pub n_q: usize,
    pub d_time: usize,
    pub v_hidden: usize,
    pub e_hidden: usize,
    pub e_mixed: usize,
    pub p_hidden: usize,
    pub f: usize,
    pub n_steps: usize,
    pub init: FmInit,
    pub clip_full_path: bool,
}

impl Default for FmSection {
    fn default() -> Self {
        let d = FmConfig::default();
        FmSection {
            n_q: d.n_q,
            d_time: d.d_time,
            v_hidden: d.v_hidden,
            e_hidden: d.e_hidden,
            e_mixed: d.e_mixed,
            p_hidden: d.p_hidden,
            f: d.f,
            n_steps: d.n_steps,
            init: d.init,
            clip_full_path: d.clip_full_path,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: Mode,
    pub order: HeadOrder,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Fraction of stage-2 examples drawn from the command-prediction task.
    pub text_ratio: f64,
    pub perception_steps: usize,
    pub perception_lr: f64,
    pub stop_plan_gradient: bool,
    pub use_detection: bool,
    pub use_planning: bool,
    pub use_generation: bool,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: Mode::Ar,
            order: HeadOrder::PlanFirst,
            steps: 5000,
            batch_size: 4,
            lr: 3e-4,
            warmup: 100,
            weight_decay: 0.01,
            grad_clip: 1.0,
            text_ratio: 0.25,
            perception_steps: 800,
            perception_lr: 1e-3,
            stop_plan_gradient: false,
            use_detection: true,
            use_planning: true,
            use_generation: true,
            log_every: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Ego collision footprint, meters.
    pub ego_length: f64,
    pub ego_width: f64,
    pub iou_thresh: f64,
    pub fid_shrinkage: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ego_length: 4.0,
            ego_width: 1.8,
            iou_thresh: 0.5,
            fid_shrinkage: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub data: DataSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub fm: FmSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// A configuration small enough to train in minutes on one core; the
    /// smoke tests and the ablation harness start from it.
    pub fn smoke() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.d_model = 128;
        c.model.n_layers = 3;
        c.model.n_heads = 4;
        c.model.d_ff = 256;
        c.model.d_z = 16;
        c.model.c_q = 32;
        c.model.n_scene = 16;
        c.model.n_perception = 12;
        c.model.n_history = 4;
        c.model.bank_frames = 4;
        c.model.qt_hidden = 64;
        c.model.qt_heads = 2;
        c.model.plan_hidden = 48;
        c.model.plan_d_h = 48;
        c.model.max_len = 128;
        c.fm.n_q = 8;
        c.fm.v_hidden = 128;
        c.fm.p_hidden = 192;
        c.tokenizer.hidden = 48;
        c.tokenizer.d_code = 32;
        c.train.batch_size = 4;
        c
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        RunConfig::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<RunConfig, ConfigError> {
        serde_json::from_value(value).map_err(|e| ConfigError::Key(e.to_string()))
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex-encoded.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn vq_config(&self) -> VqConfig {
        VqConfig {
            channels: 3,
            f: self.tokenizer.f,
            hidden: self.tokenizer.hidden,
            d_code: self.tokenizer.d_code,
            n_codes: self.tokenizer.n_codes,
            beta: self.tokenizer.beta,
        }
    }

    pub fn qt_config(&self) -> QtConfig {
        QtConfig {
            c_q: self.model.c_q,
            n_scene: self.model.n_scene,
            n_perception: self.model.n_perception,
            n_history: self.model.n_history,
            bank_frames: self.model.bank_frames,
            views: self.world.view.headings_deg.len(),
            view_res: self.world.view.resolution,
            patch: 8,
            d_model: self.model.d_model,
            n_classes: self.model.n_classes,
            hidden: self.model.qt_hidden,
            heads: self.model.qt_heads,
        }
    }

    pub fn reasoner_config(&self) -> ReasonerConfig {
        ReasonerConfig {
            vocab: Vocab::new(16, self.tokenizer.n_codes),
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            max_len: self.model.max_len,
            d_z: self.model.d_z,
            stop_plan_gradient: self.train.stop_plan_gradient,
            ..ReasonerConfig::default()
        }
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            d_z: self.model.d_z,
            d_h: self.model.plan_d_h,
            m: self.world.horizon,
            hidden: self.model.plan_hidden,
            d_model: self.model.d_model,
            collision_margin: self.model.collision_margin,
            boundary_margin: self.model.boundary_margin,
            ..PlannerConfig::default()
        }
    }

    pub fn fm_config(&self) -> FmConfig {
        FmConfig {
            d_model: self.model.d_model,
            n_q: self.fm.n_q,
            d_time: self.fm.d_time,
            v_hidden: self.fm.v_hidden,
            e_hidden: self.fm.e_hidden,
            e_mixed: self.fm.e_mixed,
            p_hidden: self.fm.p_hidden,
            channels: 3,
            frame_h: self.world.view.resolution,
            frame_w: self.world.view.resolution,
            f: self.fm.f,
            n_steps: self.fm.n_steps,
            init: self.fm.init,
            clip_full_path: self.fm.clip_full_path,
        }
    }

    pub fn layout_spec(&self) -> LayoutSpec {
        let grid = self.world.lo_resolution / self.tokenizer.f;
        LayoutSpec {
            n_scene: self.model.n_scene,
            n_history: self.model.n_history,
            image_len: grid * grid,
            n_latent_query: self.fm.n_q,
        }
    }
}

/// Apply `section.key=value` overrides onto a JSON tree. Values parse as
/// JSON when possible (numbers, booleans, arrays) and fall back to strings.
pub fn apply_overrides(
    value: &mut serde_json::Value,
    sets: &[String],
) -> Result<(), ConfigError> {
    for set in sets {
        let Some((path, raw)) = set.split_once('=') else {
            return Err(ConfigError::Override(set.clone()));
        };
        let parsed = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let parts: Vec<&str> = path.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::Override(set.clone()));
        }
        let (last, dirs) = parts.split_last().expect("non-empty parts");
        let mut node = &mut *value;
        for (i, part) in dirs.iter().enumerate() {
            node = node
                .as_object_mut()
                .ok_or_else(|| ConfigError::Key(format!("{} is not a section", parts[..i].join("."))))?
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        node.as_object_mut()
            .ok_or_else(|| ConfigError::Key(format!("{} is not a section", dirs.join("."))))?
            .insert(last.to_string(), parsed);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let c = RunConfig::default();
        let v = c.to_value();
        let back = RunConfig::from_value(v).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.train.lr = 1e-3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn overrides_rewrite_nested_keys() {
        let mut v = RunConfig::default().to_value();
        apply_overrides(
            &mut v,
            &[
                "train.lr=0.001".to_string(),
                "train.mode=\"fm\"".to_string(),
                "world.frames=6".to_string(),
            ],
        )
        .unwrap();
        let c = RunConfig::from_value(v).unwrap();
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.mode, Mode::Fm);
        assert_eq!(c.world.frames, 6);
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let mut v = RunConfig::default().to_value();
        apply_overrides(&mut v, &["train.learning_rate=0.1".to_string()]).unwrap();
        match RunConfig::from_value(v) {
            Err(ConfigError::Key(msg)) => assert!(msg.contains("learning_rate"), "{msg}"),
            other => panic!("expected key error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_override_is_rejected() {
        let mut v = RunConfig::default().to_value();
        assert!(matches!(
            apply_overrides(&mut v, &["train.lr".to_string()]),
            Err(ConfigError::Override(_))
        ));
    }

    #[test]
    fn smoke_config_is_self_consistent() {
        let c = RunConfig::smoke();
        assert_eq!(c.layout_spec().image_len, 64);
        assert_eq!(c.model.d_model % c.model.n_heads, 0);
        assert_eq!(c.qt_config().patches_per_view() * c.qt_config().views, 192);
    }
}
