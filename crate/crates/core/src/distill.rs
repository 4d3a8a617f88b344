//! Teacher training and segmented consistency distillation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    compute_motion_mask, face_feature_from_frame, motion_weighted_distance_grad, project_mask_to_latent,
    BaseDistance, BoolGrid, FaceFeatureConfig, DEFAULT_DELTA, DEFAULT_LAMBDA1,
};
use crate::data::{encode_latent, ToyAutoencoder, VideoClip};
use crate::error::{Error, Result};
use crate::model::{
    apply_consistency, aux_head_predict, backward, consistency_coefficients, consistency_function,
    ema_update_in_place, forward, predicted_x0, ConditionBundle, ModelParams,
};
use crate::optim::{Adam, AdamConfig, RngState};
use crate::schedule::{
    cfg_combine_in_place, ddim_step, forward_diffuse_in_place, sample_timestep_pair, GuidanceRange, GuidanceScale,
    NoiseSchedule, TrajectorySegmentation,
};
use crate::tensor::Tensor;

pub const DEFAULT_SEGMENTS: usize = 2;
pub const DEFAULT_LAMBDA2: f64 = 0.1;
pub const DEFAULT_EMA_RATE: f64 = 0.95;
pub const DEFAULT_LEARNING_RATE: f64 = 2e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Probability of training a sample on the null condition.
    pub uncond_drop: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            total_steps: 2000,
            uncond_drop: 0.1,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.learning_rate, self.batch_size, self.uncond_drop)?;
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Number of trajectory segments `K`.
    pub segments: usize,
    /// Motion mask threshold.
    pub delta: f64,
    /// Weight of the masked term in the consistency distance.
    pub lambda1: f64,
    /// Weight of the auxiliary clean-latent loss.
    pub lambda2: f64,
    pub ema_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub guidance: GuidanceRange,
    /// Probability of giving the student the null condition for a sample.
    pub uncond_drop: f64,
    pub seed: u64,
    pub base_distance: BaseDistance,
    pub adam: AdamConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            segments: DEFAULT_SEGMENTS,
            delta: DEFAULT_DELTA,
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            ema_rate: DEFAULT_EMA_RATE,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 4,
            total_steps: 2000,
            guidance: GuidanceRange::default(),
            uncond_drop: 0.0,
            seed: 0,
            base_distance: BaseDistance::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.learning_rate, self.batch_size, self.uncond_drop)?;
        if self.segments == 0 {
            return Err(Error::Config("segment count must be at least 1".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Config(format!("motion threshold must be >= 0, got {}", self.delta)));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(Error::Config(format!("EMA rate must lie in [0, 1), got {}", self.ema_rate)));
        }
        if let BaseDistance::PseudoHuber { c } = self.base_distance {
            if !(c > 0.0) {
                return Err(Error::Config(format!("pseudo-Huber constant must be > 0, got {c}")));
            }
        }
        self.guidance.validate()?;
        self.adam.validate()
    }
}

fn check_common(lr: f64, batch: usize, drop: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&drop) {
        return Err(Error::Config(format!("drop probability must lie in [0, 1], got {drop}")));
    }
    Ok(())
}

/// One clip ready for training: clean latent, conditioning, latent motion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub latent: Tensor,
    pub cond: ConditionBundle,
    pub mask: BoolGrid,
}

/// Encodes a clip and its conditioning. Without a face config the face slot is zero.
pub fn prepare_example(
    clip: &VideoClip,
    ae: &ToyAutoencoder,
    model: &crate::model::DenoiserConfig,
    delta: f64,
    face: Option<&FaceFeatureConfig>,
) -> Result<TrainingExample> {
    let latent = encode_latent(clip, ae)?;
    let pose = ae.encode(&clip.pose_map)?;
    let reference = ae.encode(&clip.reference_frame)?;
    let face = match face {
        Some(fc) => {
            let v = face_feature_from_frame(&clip.reference_frame, clip.face_box, ae, fc)?.vector;
            if v.len() != model.face_dim {
                return Err(Error::Config(format!(
                    "face feature has {} entries but the model expects {}",
                    v.len(),
                    model.face_dim
                )));
            }
            v
        }
        None => vec![0.0; model.face_dim],
    };
    let mask = project_mask_to_latent(&compute_motion_mask(clip, delta)?, ae.factor)?;
    let cond = ConditionBundle {
        reference,
        pose,
        face,
        guidance: GuidanceScale::ONE,
        boundary: 0,
        null: false,
    };
    cond.check(model, latent.shape())?;
    Ok(TrainingExample { latent, cond, mask })
}

pub fn prepare_dataset(
    clips: &[VideoClip],
    ae: &ToyAutoencoder,
    model: &crate::model::DenoiserConfig,
    delta: f64,
    face: Option<&FaceFeatureConfig>,
) -> Result<Vec<TrainingExample>> {
    clips.iter().map(|c| prepare_example(c, ae, model, delta, face)).collect()
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, data).expect("shape matches length")
}

fn sample_batch<'a>(data: &'a [TrainingExample], size: usize, rng: &mut ChaCha8Rng) -> Vec<&'a TrainingExample> {
    (0..size).map(|_| &data[rng.random_range(0..data.len())]).collect()
}

/// Frozen-teacher pretraining state.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ModelParams,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TeacherState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        Self {
            adam: Adam::new(&params),
            params,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }
}

/// Epsilon-regression step on one batch; returns the mean loss.
pub fn teacher_train_step(
    state: &mut TeacherState,
    batch: &[&TrainingExample],
    cfg: &TeacherConfig,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut grads = state.params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let t = state.rng.random_range(1..=sched.num_timesteps());
        let eps = gaussian(ex.latent.shape(), &mut state.rng);
        let drop = cfg.uncond_drop > 0.0 && state.rng.random::<f64>() < cfg.uncond_drop;
        let mut x = ex.latent.clone();
        forward_diffuse_in_place(x.data_mut(), eps.data(), t, sched);
        let mut cond = ex.cond.with_guidance(GuidanceScale::ONE);
        cond.null = drop;
        let (pred, cache) = forward(&state.params, &x, t, 0, &cond)?;
        let target = match state.params.config().prediction {
            crate::model::PredictionTarget::Epsilon => &eps,
            crate::model::PredictionTarget::X0 => &ex.latent,
        };
        let n = pred.len() as f64;
        let mut loss = 0.0;
        let dpred: Vec<f64> = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, e)| {
                let d = p - e;
                loss += d * d;
                2.0 * d * scale / n
            })
            .collect();
        total += loss / n * scale;
        backward(&state.params, &cache, &dpred, None, &mut grads);
    }
    if !total.is_finite() {
        return Err(Error::Training {
            step: state.step,
            message: format!("teacher loss is {total}"),
        });
    }
    state.adam.step(&mut state.params, &grads, cfg.learning_rate, &cfg.adam);
    state.step += 1;
    Ok(total)
}

/// Trains the teacher for `steps` more steps, calling `log(step, loss)` after each.
pub fn train_teacher(
    state: &mut TeacherState,
    data: &[TrainingExample],
    cfg: &TeacherConfig,
    sched: &NoiseSchedule,
    steps: u64,
    log: &mut dyn FnMut(u64, f64) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for _ in 0..steps {
        let batch = sample_batch(data, cfg.batch_size, &mut state.rng);
        let loss = teacher_train_step(state, &batch, cfg, sched)?;
        log(state.step, loss)?;
    }
    Ok(())
}

/// Student, EMA target, frozen teacher and the optimizer/RNG state that drive them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelParams,
    pub ema: ModelParams,
    pub teacher: ModelParams,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Student and EMA start as copies of the teacher.
    pub fn from_teacher(teacher: ModelParams, seed: u64) -> Self {
        Self {
            student: teacher.clone(),
            ema: teacher.clone(),
            adam: Adam::new(&teacher),
            teacher,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }
}

/// Random quantities of one distillation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillDraw {
    pub o: usize,
    pub t_m: usize,
    pub t_n: usize,
    pub w: GuidanceScale,
    pub eps: Tensor,
    pub drop_cond: bool,
}

impl DistillDraw {
    pub fn sample(
        ex: &TrainingExample,
        seg: &TrajectorySegmentation,
        cfg: &DistillConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let o = rng.random_range(0..seg.num_segments());
        let (t_m, t_n) = sample_timestep_pair(seg, o, rng)?;
        let eps = gaussian(ex.latent.shape(), rng);
        let w = cfg.guidance.sample(rng);
        let drop_cond = cfg.uncond_drop > 0.0 && rng.random::<f64>() < cfg.uncond_drop;
        Ok(Self {
            o,
            t_m,
            t_n,
            w,
            eps,
            drop_cond,
        })
    }
}

/// `(o, t_m, t_n, w)` as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub o: usize,
    pub t_m: usize,
    pub t_n: usize,
    pub w: f64,
}

/// Losses of one step averaged over the batch, with every drawn pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub cd_loss: f64,
    pub aux_loss: f64,
    pub total: f64,
    pub pairs: Vec<PairRecord>,
}

/// One teacher DDIM step `t_m -> t_n` with classifier-free guidance.
pub fn solver_target(
    teacher: &ModelParams,
    x_tm: &Tensor,
    t_m: usize,
    t_n: usize,
    cond: &ConditionBundle,
    w: GuidanceScale,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let tcond = ConditionBundle {
        guidance: GuidanceScale::ONE,
        boundary: 0,
        ..cond.clone()
    };
    let (pc, _) = forward(teacher, x_tm, t_m, 0, &tcond)?;
    let (mut guided, _) = forward(teacher, x_tm, t_m, 0, &tcond.nulled())?;
    cfg_combine_in_place(guided.data_mut(), pc.data(), w);
    let x0 = predicted_x0(x_tm, &guided, t_m, teacher.config().prediction, sched);
    ddim_step(x_tm, &x0, t_m, t_n, sched)
}

/// Consistency and auxiliary losses of one sample. When `grads` is given the
/// gradient of `scale * (cd + lambda2 * aux)` with respect to the student is
/// accumulated into it.
#[allow(clippy::too_many_arguments)]
pub fn distillation_objective(
    student: &ModelParams,
    ema: &ModelParams,
    teacher: &ModelParams,
    ex: &TrainingExample,
    draw: &DistillDraw,
    seg: &TrajectorySegmentation,
    cfg: &DistillConfig,
    sched: &NoiseSchedule,
    grads: Option<(&mut ModelParams, f64)>,
) -> Result<(f64, f64)> {
    let s_o = seg.start(draw.o);
    let mut x_tm = ex.latent.clone();
    forward_diffuse_in_place(x_tm.data_mut(), draw.eps.data(), draw.t_m, sched);

    let x_tn = solver_target(teacher, &x_tm, draw.t_m, draw.t_n, &ex.cond, draw.w, sched)?;

    let mut cond = ConditionBundle {
        guidance: draw.w,
        boundary: s_o,
        ..ex.cond.clone()
    };
    cond.null = cond.null || draw.drop_cond;
    let (pred, cache) = forward(student, &x_tm, draw.t_m, s_o, &cond)?;
    let target = student.config().prediction;
    let f_student = apply_consistency(&x_tm, &pred, draw.t_m, s_o, target, sched);
    let f_target = consistency_function(ema, &x_tn, draw.t_n, s_o, &cond, sched)?;

    let want_grad = grads.is_some();
    let mut dcd = if want_grad { vec![0.0; pred.len()] } else { Vec::new() };
    let cd = motion_weighted_distance_grad(
        &f_student,
        &f_target,
        &ex.mask,
        cfg.lambda1,
        cfg.base_distance,
        want_grad.then_some(dcd.as_mut_slice()),
    )?;

    let aux_pred = aux_head_predict(student, &cache.features)?;
    let aux = cfg.base_distance.mean(aux_pred.data(), ex.latent.data());

    if let Some((g, scale)) = grads {
        let (_, on_pred) = consistency_coefficients(draw.t_m, s_o, target, sched);
        let dpred: Vec<f64> = dcd.iter().map(|v| v * on_pred * scale).collect();
        let daux = (cfg.lambda2 != 0.0).then(|| {
            let n = aux_pred.len() as f64;
            let k = cfg.lambda2 * scale / n;
            aux_pred
                .data()
                .iter()
                .zip(ex.latent.data())
                .map(|(p, x)| k * cfg.base_distance.derivative(p - x))
                .collect::<Vec<f64>>()
        });
        backward(student, &cache, &dpred, daux.as_deref(), g);
    }
    Ok((cd, aux))
}

/// One optimizer step of segmented consistency distillation on a batch.
pub fn distill_step(
    state: &mut TrainState,
    batch: &[&TrainingExample],
    seg: &TrajectorySegmentation,
    cfg: &DistillConfig,
    sched: &NoiseSchedule,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if seg.num_timesteps() != sched.num_timesteps() {
        return Err(Error::Config(format!(
            "segmentation covers {} timesteps but the schedule has {}",
            seg.num_timesteps(),
            sched.num_timesteps()
        )));
    }
    let mut grads = state.student.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let (mut cd, mut aux) = (0.0, 0.0);
    let mut pairs = Vec::with_capacity(batch.len());
    for ex in batch {
        let draw = DistillDraw::sample(ex, seg, cfg, &mut state.rng)?;
        let (c, a) = distillation_objective(
            &state.student,
            &state.ema,
            &state.teacher,
            ex,
            &draw,
            seg,
            cfg,
            sched,
            Some((&mut grads, scale)),
        )?;
        cd += c * scale;
        aux += a * scale;
        pairs.push(PairRecord {
            o: draw.o,
            t_m: draw.t_m,
            t_n: draw.t_n,
            w: draw.w.value(),
        });
    }
    let total = cd + cfg.lambda2 * aux;
    if !total.is_finite() {
        return Err(Error::Training {
            step: state.step,
            message: format!("non-finite loss (cd={cd}, aux={aux}) at pairs {pairs:?}"),
        });
    }
    state.adam.step(&mut state.student, &grads, cfg.learning_rate, &cfg.adam);
    ema_update_in_place(&mut state.ema, &state.student, cfg.ema_rate)?;
    state.step += 1;
    Ok(LossBreakdown {
        step: state.step,
        cd_loss: cd,
        aux_loss: aux,
        total,
        pairs,
    })
}

/// Runs `steps` more distillation steps, calling `log` with every breakdown.
pub fn train_distillation(
    state: &mut TrainState,
    data: &[TrainingExample],
    seg: &TrajectorySegmentation,
    cfg: &DistillConfig,
    sched: &NoiseSchedule,
    steps: u64,
    log: &mut dyn FnMut(&LossBreakdown, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if seg.num_segments() != cfg.segments {
        return Err(Error::Config(format!(
            "segmentation has {} segments but the config asks for {}",
            seg.num_segments(),
            cfg.segments
        )));
    }
    for _ in 0..steps {
        let batch = sample_batch(data, cfg.batch_size, &mut state.rng);
        let report = distill_step(state, &batch, seg, cfg, sched)?;
        log(&report, state)?;
    }
    Ok(())
}
