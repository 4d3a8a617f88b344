//! Declarative run configuration with dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::digest_hex;
use crate::conditioning::FaceFeatureConfig;
use crate::data::ClipParams;
use crate::distill::{DistillConfig, TeacherConfig};
use crate::error::{Error, Result};
use crate::metrics::EvalSettings;
use crate::model::DenoiserConfig;
use crate::schedule::{ScheduleKind, DEFAULT_TIMESTEPS};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// JSON Schema describing [`RunConfig`].
pub const SCHEMA: &str = include_str!("../configs/run.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub timesteps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearBeta,
            timesteps: DEFAULT_TIMESTEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_clips: usize,
    pub eval_clips: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub clip: ClipParams,
    /// Feed the reference face feature to the model.
    pub use_face: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_clips: 64,
            eval_clips: 16,
            train_seed: 0,
            eval_seed: 1_000_000,
            clip: ClipParams::default(),
            use_face: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Consistency sampling steps.
    pub steps: usize,
    pub noise_seed: u64,
    /// DDIM steps of the teacher baseline.
    pub teacher_steps: usize,
    pub teacher_guidance: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            noise_seed: 0,
            teacher_steps: 4,
            teacher_guidance: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed: model initialization and the training streams derive from it.
    pub seed: u64,
    pub output_dir: String,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub model: DenoiserConfig,
    pub face: FaceFeatureConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalSettings,
    /// Steps between checkpoint writes (0 writes only the final one).
    pub checkpoint_every: u64,
    /// Distillation steps between evaluations logged to the metrics file (0 disables).
    pub eval_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            output_dir: "runs/default".into(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            model: DenoiserConfig::default(),
            face: FaceFeatureConfig::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            sampling: SamplingConfig::default(),
            eval: EvalSettings::default(),
            checkpoint_every: 500,
            eval_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.schedule.timesteps < self.distill.segments {
            return Err(Error::Config(format!(
                "{} timesteps cannot be split into {} segments",
                self.schedule.timesteps, self.distill.segments
            )));
        }
        self.data.clip.validate()?;
        if self.data.train_clips == 0 {
            return Err(Error::Config("data.train_clips must be at least 1".into()));
        }
        self.model.validate()?;
        if self.model.latent_channels != crate::data::CHANNELS || self.model.pose_channels != 1 {
            return Err(Error::Config(
                "video runs need model.latent_channels = 3 and model.pose_channels = 1".into(),
            ));
        }
        if self.model.face_dim != self.face.dim() {
            return Err(Error::Config(format!(
                "model.face_dim = {} but the face feature has {} entries",
                self.model.face_dim,
                self.face.dim()
            )));
        }
        self.teacher.validate()?;
        self.distill.validate()?;
        if self.sampling.steps == 0 || self.sampling.teacher_steps == 0 {
            return Err(Error::Config("sampling step counts must be at least 1".into()));
        }
        if !(self.sampling.teacher_guidance >= 0.0) {
            return Err(Error::Config("sampling.teacher_guidance must be >= 0".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Keys are dotted paths (`distill.lambda1`,
    /// `seed`) or a leaf name that is unique in the tree (`lambda1`). Values are parsed
    /// as JSON, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{item}` is not key=value")))?;
            let path = resolve_key(&tree, key.trim())?;
            let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            set_path(&mut tree, &path, value);
        }
        serde_json::from_value(tree).map_err(|e| Error::Usage(format!("override: {e}")))
    }

    /// Digest of everything that shapes the teacher.
    pub fn teacher_digest(&self) -> String {
        let id = serde_json::json!({
            "seed": self.seed,
            "schedule": self.schedule,
            "data": self.data,
            "model": self.model,
            "face": self.face,
            "teacher": self.teacher,
        });
        digest_hex(id.to_string().as_bytes())
    }

    /// Digest of everything that shapes the distilled student.
    pub fn distill_digest(&self) -> String {
        let id = serde_json::json!({
            "teacher": self.teacher_digest(),
            "distill": self.distill,
        });
        digest_hex(id.to_string().as_bytes())
    }

    pub fn model_seed(&self) -> u64 {
        self.seed
    }

    pub fn teacher_stream_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ self.teacher.seed.wrapping_add(1)
    }

    pub fn distill_stream_seed(&self) -> u64 {
        self.seed.wrapping_mul(0xc2b2_ae3d_27d4_eb4f) ^ self.distill.seed.wrapping_add(2)
    }
}

fn leaf_paths(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                prefix.push(k.clone());
                out.push(prefix.clone());
                leaf_paths(child, prefix, out);
                prefix.pop();
            }
        }
        _ => {}
    }
}

fn resolve_key(tree: &Value, key: &str) -> Result<Vec<String>> {
    if key.is_empty() {
        return Err(Error::Usage("empty override key".into()));
    }
    let mut all = Vec::new();
    leaf_paths(tree, &mut Vec::new(), &mut all);
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if all.contains(&path) {
        return Ok(path);
    }
    if key.contains('.') {
        return Err(Error::Usage(format!("unknown config key `{key}`")));
    }
    let hits: Vec<&Vec<String>> = all.iter().filter(|p| p.last().map(String::as_str) == Some(key)).collect();
    match hits.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Error::Usage(format!("unknown config key `{key}`"))),
        many => Err(Error::Usage(format!(
            "config key `{key}` is ambiguous: {}",
            many.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn set_path(tree: &mut Value, path: &[String], value: Value) {
    let mut cur = tree;
    for seg in &path[..path.len() - 1] {
        cur = cur.get_mut(seg).expect("resolved path exists");
    }
    cur[path.last().expect("non-empty path").as_str()] = value;
}
