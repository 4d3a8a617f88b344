//! End-to-end runs: datasets, training with logs and checkpoints, sampling,
//! evaluation, images and the ablation driver.
//!
//! Run directory layout:
//!
//! ```text
//! <run>/config.json            resolved configuration
//! <run>/logs/teacher.jsonl     one line per teacher step
//! <run>/logs/distill.jsonl     one line per distillation step (losses and drawn pairs)
//! <run>/logs/eval.jsonl        periodic evaluation during distillation
//! <run>/checkpoints/*.ckpt
//! <run>/samples/*.png          contact sheets and frames
//! <run>/reports/*.json         evaluation reports
//! ```

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta, Checkpoint};
use crate::config::RunConfig;
use crate::data::{decode_latent, generate_dataset, ToyAutoencoder, VideoClip};
use crate::distill::{prepare_dataset, train_distillation, train_teacher, TeacherState, TrainState, TrainingExample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_clips, EvalReport};
use crate::model::{init_model, ModelParams};
use crate::sampling::{multistep_sample, plan_steps, teacher_ddim_sample};
use crate::schedule::{build_schedule, make_segments, GuidanceScale, NoiseSchedule, TrajectorySegmentation};
use crate::tensor::Tensor;

pub const ABLATION_SCHEMA_VERSION: u32 = 1;

/// A run directory with its standard subdirectories.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = RunDir { root: root.into() };
        for sub in [dir.logs(), dir.checkpoints(), dir.samples(), dir.reports()] {
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("teacher.ckpt")
    }

    pub fn distill_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("distill.ckpt")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let path = self.root.join("config.json");
        std::fs::write(&path, cfg.to_json_pretty()).map_err(|e| Error::io(&path, e))
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Line-per-record JSON log. Truncated when a run starts from step 0,
/// appended to on resume.
struct JsonLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLog {
    fn open(path: PathBuf, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(JsonLog {
            path,
            out: BufWriter::new(file),
        })
    }

    fn line<T: Serialize>(&mut self, v: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, v)?;
        writeln!(self.out).map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Serialize)]
struct TeacherLogLine {
    step: u64,
    loss: f64,
}

#[derive(Serialize)]
struct EvalLogLine<'a> {
    step: u64,
    steps: usize,
    report: &'a EvalReport,
}

/// Evaluation data used during or after training.
pub struct EvalSet {
    pub clips: Vec<VideoClip>,
    pub examples: Vec<TrainingExample>,
}

/// Everything derived from one [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Workspace {
    pub cfg: RunConfig,
    pub sched: NoiseSchedule,
    pub ae: ToyAutoencoder,
    pub seg: TrajectorySegmentation,
}

impl Workspace {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let sched = build_schedule(cfg.schedule.kind, cfg.schedule.timesteps)?;
        let ae = ToyAutoencoder::new(cfg.data.clip.downsample)?;
        cfg.face.validate(&ae)?;
        let seg = make_segments(cfg.distill.segments, cfg.schedule.timesteps)?;
        Ok(Workspace { cfg, sched, ae, seg })
    }

    pub fn train_clips(&self) -> Result<Vec<VideoClip>> {
        generate_dataset(self.cfg.data.train_seed, self.cfg.data.train_clips, &self.cfg.data.clip)
    }

    pub fn eval_clips(&self) -> Result<Vec<VideoClip>> {
        generate_dataset(self.cfg.data.eval_seed, self.cfg.data.eval_clips, &self.cfg.data.clip)
    }

    pub fn prepare(&self, clips: &[VideoClip]) -> Result<Vec<TrainingExample>> {
        let face = self.cfg.data.use_face.then_some(&self.cfg.face);
        prepare_dataset(clips, &self.ae, &self.cfg.model, self.cfg.distill.delta, face)
    }

    pub fn eval_set(&self) -> Result<EvalSet> {
        let clips = self.eval_clips()?;
        let examples = self.prepare(&clips)?;
        Ok(EvalSet { clips, examples })
    }

    pub fn teacher_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config_digest: self.cfg.teacher_digest(),
            schedule_kind: self.sched.kind(),
            num_timesteps: self.sched.num_timesteps(),
            boundaries: None,
        }
    }

    pub fn distill_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config_digest: self.cfg.distill_digest(),
            schedule_kind: self.sched.kind(),
            num_timesteps: self.sched.num_timesteps(),
            boundaries: Some(self.seg.boundaries().to_vec()),
        }
    }

    pub fn init_teacher(&self) -> Result<TeacherState> {
        let params = init_model(&self.cfg.model, self.cfg.model_seed())?;
        Ok(TeacherState::new(params, self.cfg.teacher_stream_seed()))
    }

    pub fn init_distill(&self, teacher: &ModelParams) -> TrainState {
        TrainState::from_teacher(teacher.clone(), self.cfg.distill_stream_seed())
    }

    fn chunk(&self, done: u64, total: u64) -> u64 {
        let every = self.cfg.checkpoint_every;
        let left = total - done;
        if every == 0 {
            left
        } else {
            (every - done % every).min(left)
        }
    }

    /// Trains the teacher until `teacher.total_steps`, starting from `state.step`.
    pub fn train_teacher(&self, state: &mut TeacherState, data: &[TrainingExample], run: Option<&RunDir>) -> Result<()> {
        let total = self.cfg.teacher.total_steps;
        let mut log = match run {
            Some(r) => Some(JsonLog::open(r.logs().join("teacher.jsonl"), state.step > 0)?),
            None => None,
        };
        while state.step < total {
            let n = self.chunk(state.step, total);
            train_teacher(state, data, &self.cfg.teacher, &self.sched, n, &mut |step, loss| match log.as_mut() {
                Some(l) => l.line(&TeacherLogLine { step, loss }),
                None => Ok(()),
            })?;
            if let Some(r) = run {
                log.as_mut().map(JsonLog::flush).transpose()?;
                save_checkpoint(&r.teacher_checkpoint(), &Checkpoint::Teacher(state.clone()), &self.teacher_meta())?;
            }
        }
        Ok(())
    }

    /// Distills until `distill.total_steps`, starting from `state.step`.
    pub fn distill(
        &self,
        state: &mut TrainState,
        data: &[TrainingExample],
        run: Option<&RunDir>,
        eval: Option<&EvalSet>,
    ) -> Result<()> {
        let total = self.cfg.distill.total_steps;
        let (mut log, mut eval_log) = match run {
            Some(r) => (
                Some(JsonLog::open(r.logs().join("distill.jsonl"), state.step > 0)?),
                Some(JsonLog::open(r.logs().join("eval.jsonl"), state.step > 0)?),
            ),
            None => (None, None),
        };
        let every = self.cfg.eval_every;
        while state.step < total {
            let mut n = self.chunk(state.step, total);
            if every > 0 && eval.is_some() {
                n = n.min(every - state.step % every);
            }
            train_distillation(state, data, &self.seg, &self.cfg.distill, &self.sched, n, &mut |b, _| {
                match log.as_mut() {
                    Some(l) => l.line(b),
                    None => Ok(()),
                }
            })?;
            if let (Some(set), true) = (eval, every > 0 && state.step % every == 0) {
                let report = self.evaluate_params(&state.ema, set, self.cfg.sampling.steps)?;
                if let Some(l) = eval_log.as_mut() {
                    l.line(&EvalLogLine {
                        step: state.step,
                        steps: self.cfg.sampling.steps,
                        report: &report,
                    })?;
                    l.flush()?;
                }
            }
            let at_checkpoint = self.cfg.checkpoint_every == 0 || state.step % self.cfg.checkpoint_every == 0;
            if let (Some(r), true) = (run, at_checkpoint || state.step == total) {
                log.as_mut().map(JsonLog::flush).transpose()?;
                save_checkpoint(&r.distill_checkpoint(), &Checkpoint::Distill(state.clone()), &self.distill_meta())?;
            }
        }
        Ok(())
    }

    fn noise_seed(&self, i: usize) -> u64 {
        self.cfg.sampling.noise_seed.wrapping_add(i as u64)
    }

    /// `steps`-step consistency samples, one per example, with per-example noise seeds.
    pub fn sample_distilled(&self, params: &ModelParams, examples: &[TrainingExample], steps: usize) -> Result<Vec<Tensor>> {
        let plan = plan_steps(steps, &self.seg)?;
        examples
            .iter()
            .enumerate()
            .map(|(i, ex)| multistep_sample(params, &ex.cond, &plan.clone().with_seed(self.noise_seed(i)), &self.sched, &self.seg))
            .collect()
    }

    /// Teacher DDIM samples with the same noise seeds as [`Self::sample_distilled`].
    pub fn sample_teacher(
        &self,
        params: &ModelParams,
        examples: &[TrainingExample],
        steps: usize,
        guidance: f64,
    ) -> Result<Vec<Tensor>> {
        let w = GuidanceScale::new(guidance)?;
        examples
            .iter()
            .enumerate()
            .map(|(i, ex)| teacher_ddim_sample(params, &ex.cond, steps, w, &self.sched, self.noise_seed(i)))
            .collect()
    }

    /// Decodes latents to pixel clips clamped to `[0, 1]`, keeping each reference clip's conditioning.
    pub fn decode(&self, latents: &[Tensor], like: &[VideoClip]) -> Result<Vec<VideoClip>> {
        latents
            .iter()
            .zip(like)
            .map(|(z, c)| c.with_pixels(decode_latent(z, &self.ae)?.map(|v| v.clamp(0.0, 1.0))))
            .collect()
    }

    pub fn evaluate(&self, pred: &[VideoClip], truth: &[VideoClip], digest: &str) -> Result<EvalReport> {
        evaluate_clips(pred, truth, &self.ae, &self.cfg.eval, digest)
    }

    pub fn evaluate_params(&self, params: &ModelParams, set: &EvalSet, steps: usize) -> Result<EvalReport> {
        let z = self.sample_distilled(params, &set.examples, steps)?;
        let pred = self.decode(&z, &set.clips)?;
        self.evaluate(&pred, &set.clips, &self.cfg.distill_digest())
    }

    pub fn evaluate_teacher(&self, params: &ModelParams, set: &EvalSet, steps: usize, guidance: f64) -> Result<EvalReport> {
        let z = self.sample_teacher(params, &set.examples, steps, guidance)?;
        let pred = self.decode(&z, &set.clips)?;
        self.evaluate(&pred, &set.clips, &self.cfg.teacher_digest())
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes every frame of a `[F, 3, H, W]` clip as `<prefix>_<f>.png`.
pub fn write_frames(pixels: &Tensor, dir: &Path, prefix: &str) -> Result<()> {
    check_video(pixels)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = pixels.shape();
    for f in 0..s[0] {
        let mut img = image::RgbImage::new(s[3] as u32, s[2] as u32);
        blit(&mut img, pixels, f, 0, 0);
        img.save(dir.join(format!("{prefix}_{f:03}.png")))?;
    }
    Ok(())
}

fn check_video(t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Argument(format!("expected [F, 3, H, W] pixels, got {s:?}")));
    }
    Ok(())
}

fn blit(img: &mut image::RgbImage, pixels: &Tensor, f: usize, x0: u32, y0: u32) {
    let s = pixels.shape();
    let (h, w) = (s[2], s[3]);
    let d = pixels.data();
    let plane = h * w;
    let base = f * 3 * plane;
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| to_byte(d[base + c * plane + y * w + x]);
            img.put_pixel(x0 + x as u32, y0 + y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
}

/// One row per clip, one column per frame, separated by a one-pixel gutter.
pub fn contact_sheet(rows: &[&Tensor]) -> Result<image::RgbImage> {
    let first = rows.first().ok_or_else(|| Error::Argument("contact sheet needs at least one clip".into()))?;
    check_video(first)?;
    let s = first.shape().to_vec();
    for r in rows {
        check_video(r)?;
        if r.shape() != s.as_slice() {
            return Err(Error::Argument(format!("contact sheet rows differ in shape: {:?} vs {s:?}", r.shape())));
        }
    }
    let (frames, h, w) = (s[0] as u32, s[2] as u32, s[3] as u32);
    let mut img = image::RgbImage::from_pixel(frames * (w + 1) - 1, rows.len() as u32 * (h + 1) - 1, image::Rgb([255, 255, 255]));
    for (r, t) in rows.iter().enumerate() {
        for f in 0..frames {
            blit(&mut img, t, f as usize, f * (w + 1), r as u32 * (h + 1));
        }
    }
    Ok(img)
}

/// Interleaves predicted and reference clips (prediction first) into a contact sheet.
pub fn save_comparison_sheet(path: &Path, pred: &[VideoClip], truth: &[VideoClip], max_clips: usize) -> Result<()> {
    let rows: Vec<&Tensor> = pred
        .iter()
        .zip(truth)
        .take(max_clips.max(1))
        .flat_map(|(p, t)| [&p.pixels, &t.pixels])
        .collect();
    contact_sheet(&rows)?.save(path)?;
    Ok(())
}

/// The five ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Number of trajectory segments.
    Segments,
    /// Inference steps.
    Steps,
    /// Motion-weighted distance on or off.
    Motion,
    /// Auxiliary clean-latent supervision on or off.
    Gt,
    /// Face feature conditioning on or off.
    Face,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "segments" => AblationAxis::Segments,
            "steps" => AblationAxis::Steps,
            "motion" => AblationAxis::Motion,
            "gt" => AblationAxis::Gt,
            "face" => AblationAxis::Face,
            other => {
                return Err(Error::Usage(format!(
                    "unknown ablation axis `{other}` (expected segments, steps, motion, gt or face)"
                )))
            }
        })
    }
}

impl AblationAxis {
    pub fn default_values(self) -> &'static str {
        match self {
            AblationAxis::Segments => "1,2,4",
            AblationAxis::Steps => "1,2,4,8",
            _ => "on,off",
        }
    }
}

fn parse_switch(v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Usage(format!("ablation value `{other}` is not on/off"))),
    }
}

/// One configuration of an ablation.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub label: String,
    pub config: RunConfig,
}

/// Expands an axis and comma-separated values into cells derived from `base`.
pub fn ablation_cells(base: &RunConfig, axis: AblationAxis, values: &str) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let mut cfg = base.clone();
        let label = match axis {
            AblationAxis::Segments | AblationAxis::Steps => {
                let n: usize = v
                    .parse()
                    .map_err(|_| Error::Usage(format!("ablation value `{v}` is not a positive integer")))?;
                if axis == AblationAxis::Segments {
                    cfg.distill.segments = n;
                    format!("K={n}")
                } else {
                    cfg.sampling.steps = n;
                    format!("N={n}")
                }
            }
            AblationAxis::Motion => {
                let on = parse_switch(v)?;
                cfg.distill.lambda1 = if on { base.distill.lambda1 } else { 0.0 };
                format!("motion {}", if on { "on" } else { "off" })
            }
            AblationAxis::Gt => {
                let on = parse_switch(v)?;
                cfg.distill.lambda2 = if on { base.distill.lambda2 } else { 0.0 };
                format!("gt {}", if on { "on" } else { "off" })
            }
            AblationAxis::Face => {
                let on = parse_switch(v)?;
                cfg.data.use_face = on;
                format!("face {}", if on { "on" } else { "off" })
            }
        };
        cfg.validate()?;
        cells.push(AblationCell { label, config: cfg });
    }
    if cells.is_empty() {
        return Err(Error::Usage("ablation needs at least one value".into()));
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub segments: usize,
    pub steps: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub use_face: bool,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let rows: Vec<(String, EvalReport)> = self.rows.iter().map(|r| (r.label.clone(), r.report.clone())).collect();
        crate::metrics::format_table(&rows)
    }
}

/// Trained models shared between cells: teachers keyed by teacher digest,
/// students keyed by distillation digest.
#[derive(Default)]
pub struct ModelCache {
    teachers: BTreeMap<String, ModelParams>,
    students: BTreeMap<String, ModelParams>,
}

impl ModelCache {
    pub fn teacher(&mut self, ws: &Workspace, data: &[TrainingExample], run: Option<&RunDir>) -> Result<ModelParams> {
        let key = ws.cfg.teacher_digest();
        if let Some(p) = self.teachers.get(&key) {
            return Ok(p.clone());
        }
        let mut st = ws.init_teacher()?;
        ws.train_teacher(&mut st, data, run)?;
        self.teachers.insert(key, st.params.clone());
        Ok(st.params)
    }

    pub fn student(&mut self, ws: &Workspace, data: &[TrainingExample], run: Option<&RunDir>) -> Result<ModelParams> {
        let key = ws.cfg.distill_digest();
        if let Some(p) = self.students.get(&key) {
            return Ok(p.clone());
        }
        let teacher = self.teacher(ws, data, run)?;
        let mut st = ws.init_distill(&teacher);
        ws.distill(&mut st, data, run, None)?;
        self.students.insert(key, st.ema.clone());
        Ok(st.ema)
    }
}

/// Runs every cell, reusing teachers and students that several cells share.
/// With `jobs > 1` distinct students are trained on that many threads.
pub fn run_ablation(
    cells: &[AblationCell],
    axis: AblationAxis,
    run: Option<&RunDir>,
    jobs: usize,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationReport> {
    let mut cache = ModelCache::default();
    let workspaces: Vec<Workspace> = cells.iter().map(|c| Workspace::new(c.config.clone())).collect::<Result<_>>()?;

    // Training data only depends on the data and model config, so prepare once per distinct input.
    let mut datasets: BTreeMap<String, Vec<TrainingExample>> = BTreeMap::new();
    let data_key = |ws: &Workspace| serde_json::json!([ws.cfg.data, ws.cfg.model, ws.cfg.face, ws.cfg.distill.delta]).to_string();
    for ws in &workspaces {
        let key = data_key(ws);
        if !datasets.contains_key(&key) {
            let clips = ws.train_clips()?;
            datasets.insert(key, ws.prepare(&clips)?);
        }
    }

    for (cell, ws) in cells.iter().zip(&workspaces) {
        progress(&format!("teacher for {}", cell.label));
        cache.teacher(ws, &datasets[&data_key(ws)], None)?;
    }

    let mut pending: Vec<&Workspace> = Vec::new();
    for ws in &workspaces {
        let key = ws.cfg.distill_digest();
        if !cache.students.contains_key(&key) && !pending.iter().any(|p| p.cfg.distill_digest() == key) {
            pending.push(ws);
        }
    }
    for batch in pending.chunks(jobs.max(1)) {
        let trained: Vec<Result<(String, ModelParams)>> = std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|ws| {
                    let data = &datasets[&data_key(ws)];
                    let teacher = &cache.teachers[&ws.cfg.teacher_digest()];
                    s.spawn(move || {
                        let mut st = ws.init_distill(teacher);
                        ws.distill(&mut st, data, None, None)?;
                        Ok((ws.cfg.distill_digest(), st.ema))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("distillation thread panicked")).collect()
        });
        for t in trained {
            let (k, p) = t?;
            cache.students.insert(k, p);
        }
        progress(&format!("distilled {} of {}", cache.students.len(), pending.len()));
    }

    let mut rows = Vec::with_capacity(cells.len());
    for (cell, ws) in cells.iter().zip(&workspaces) {
        let student = cache.student(ws, &datasets[&data_key(ws)], None)?;
        let set = ws.eval_set()?;
        let z = ws.sample_distilled(&student, &set.examples, ws.cfg.sampling.steps)?;
        let pred = ws.decode(&z, &set.clips)?;
        let report = ws.evaluate(&pred, &set.clips, &ws.cfg.distill_digest())?;
        if let Some(r) = run {
            let name = cell.label.replace([' ', '='], "_");
            save_comparison_sheet(&r.samples().join(format!("{axis:?}_{name}.png").to_lowercase()), &pred, &set.clips, 4)?;
        }
        rows.push(AblationRow {
            label: cell.label.clone(),
            segments: ws.cfg.distill.segments,
            steps: ws.cfg.sampling.steps,
            lambda1: ws.cfg.distill.lambda1,
            lambda2: ws.cfg.distill.lambda2,
            use_face: ws.cfg.data.use_face,
            report,
        });
        progress(&format!("evaluated {}", cell.label));
    }
    Ok(AblationReport {
        schema_version: ABLATION_SCHEMA_VERSION,
        axis,
        rows,
    })
}
