//! Binary checkpoints: magic, length-prefixed JSON header, raw little-endian f64 arrays.
//!
//! Every array is a named section with its own SHA-256, so corruption is
//! reported against the section it hit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{TeacherState, TrainState};
use crate::error::{Error, Result};
use crate::model::{DenoiserConfig, ModelParams};
use crate::optim::{Adam, RngState};
use crate::schedule::ScheduleKind;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SEGCDCK1";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Teacher,
    Distill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub kind: CheckpointKind,
    pub step: u64,
    pub config_digest: String,
    pub schedule_kind: ScheduleKind,
    pub num_timesteps: usize,
    /// Segment boundaries the student was trained with.
    pub boundaries: Option<Vec<usize>>,
    pub model: DenoiserConfig,
    pub adam_updates: u64,
    pub rng: RngState,
    pub sections: Vec<SectionInfo>,
}

/// Run identity recorded alongside the arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config_digest: String,
    pub schedule_kind: ScheduleKind,
    pub num_timesteps: usize,
    pub boundaries: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Teacher(TeacherState),
    Distill(TrainState),
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        match self {
            Checkpoint::Teacher(s) => s.step,
            Checkpoint::Distill(s) => s.step,
        }
    }

    /// The parameters used for sampling: the teacher, or the EMA student.
    pub fn sampling_params(&self) -> &ModelParams {
        match self {
            Checkpoint::Teacher(s) => &s.params,
            Checkpoint::Distill(s) => &s.ema,
        }
    }

    fn groups(&self) -> Vec<(&'static str, &ModelParams)> {
        match self {
            Checkpoint::Teacher(s) => vec![
                ("params", &s.params),
                ("adam.first", &s.adam.first),
                ("adam.second", &s.adam.second),
            ],
            Checkpoint::Distill(s) => vec![
                ("student", &s.student),
                ("ema", &s.ema),
                ("teacher", &s.teacher),
                ("adam.first", &s.adam.first),
                ("adam.second", &s.adam.second),
            ],
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha_of(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// SHA-256 of arbitrary bytes as lowercase hex.
pub fn digest_hex(bytes: &[u8]) -> String {
    sha_of(bytes)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, meta: &CheckpointMeta) -> Result<()> {
    let mut payload = Vec::new();
    let mut sections = Vec::new();
    for (group, params) in ckpt.groups() {
        for (name, t) in params.iter() {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            sections.push(SectionInfo {
                name: format!("{group}/{name}"),
                shape: t.shape().to_vec(),
                sha256: sha_of(&bytes),
            });
            payload.extend(bytes);
        }
    }
    let (model, adam_updates, rng) = match ckpt {
        Checkpoint::Teacher(s) => (s.params.config().clone(), s.adam.updates, s.rng_state()),
        Checkpoint::Distill(s) => (s.student.config().clone(), s.adam.updates, s.rng_state()),
    };
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: match ckpt {
            Checkpoint::Teacher(_) => CheckpointKind::Teacher,
            Checkpoint::Distill(_) => CheckpointKind::Distill,
        },
        step: ckpt.step(),
        config_digest: meta.config_digest.clone(),
        schedule_kind: meta.schedule_kind,
        num_timesteps: meta.num_timesteps,
        boundaries: meta.boundaries.clone(),
        model,
        adam_updates,
        rng,
        sections,
    };
    let head = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(MAGIC.len() + 8 + head.len() + payload.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(head.len() as u64).to_le_bytes());
    buf.extend(head);
    buf.extend(payload);

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn integrity(section: &str, message: impl Into<String>) -> Error {
    Error::Integrity {
        section: section.to_string(),
        message: message.into(),
    }
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(&bytes)?.0)
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(integrity("magic", "not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| integrity("header", format!("declared length {len} exceeds file")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| integrity("header", e.to_string()))?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(integrity(
            "header",
            format!("unsupported schema version {}", header.schema_version),
        ));
    }
    Ok((header, end))
}

/// Loads a checkpoint. With `expected_digest` set, a different recorded digest
/// is refused unless `force` is true.
pub fn load_checkpoint(path: &Path, expected_digest: Option<&str>, force: bool) -> Result<(Checkpoint, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut pos) = parse_header(&bytes)?;
    if let Some(want) = expected_digest {
        if want != header.config_digest && !force {
            return Err(Error::Config(format!(
                "checkpoint {} was written for config digest {} but the current config has {want}; pass --force to load anyway",
                path.display(),
                header.config_digest
            )));
        }
    }
    header.model.validate().map_err(|e| integrity("header", e.to_string()))?;
    let mut arrays: Vec<(String, Tensor)> = Vec::with_capacity(header.sections.len());
    for s in &header.sections {
        let n: usize = s.shape.iter().product();
        let end = pos
            .checked_add(n * 8)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| integrity(&s.name, "truncated"))?;
        let raw = &bytes[pos..end];
        if sha_of(raw) != s.sha256 {
            return Err(integrity(&s.name, "checksum mismatch"));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((s.name.clone(), Tensor::from_vec(&s.shape, data)?));
        pos = end;
    }
    if pos != bytes.len() {
        return Err(integrity("payload", format!("{} trailing bytes", bytes.len() - pos)));
    }

    let mut take = |group: &str| -> Result<ModelParams> {
        let prefix = format!("{group}/");
        let mut picked = Vec::new();
        let mut rest = Vec::new();
        for (name, t) in arrays.drain(..) {
            match name.strip_prefix(&prefix) {
                Some(short) => picked.push((short.to_string(), t)),
                None => rest.push((name, t)),
            }
        }
        arrays = rest;
        ModelParams::from_named(header.model.clone(), picked).map_err(|e| integrity(group, e.to_string()))
    };
    let rng = header.rng.restore().map_err(|e| integrity("header", e.to_string()))?;
    let ckpt = match header.kind {
        CheckpointKind::Teacher => {
            let params = take("params")?;
            let first = take("adam.first")?;
            let second = take("adam.second")?;
            Checkpoint::Teacher(TeacherState {
                params,
                adam: Adam {
                    first,
                    second,
                    updates: header.adam_updates,
                },
                step: header.step,
                rng,
            })
        }
        CheckpointKind::Distill => {
            let student = take("student")?;
            let ema = take("ema")?;
            let teacher = take("teacher")?;
            let first = take("adam.first")?;
            let second = take("adam.second")?;
            Checkpoint::Distill(TrainState {
                student,
                ema,
                teacher,
                adam: Adam {
                    first,
                    second,
                    updates: header.adam_updates,
                },
                step: header.step,
                rng,
            })
        }
    };
    if let Some((name, _)) = arrays.first() {
        return Err(integrity(name, "unexpected section"));
    }
    Ok((ckpt, header))
}
