//! Desk-scale spatiotemporal denoiser with conditioning, the segment-anchored
//! consistency parameterization, an auxiliary clean-latent head, and EMA.

mod net;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{ddim_coefficients, GuidanceScale, NoiseSchedule};
use crate::tensor::Tensor;

pub(crate) use net::{backward, forward};
pub use params::{init_model, parameter_count, ModelParams};

/// Data scale of the consistency boundary coefficients.
pub const SIGMA_DATA: f64 = 0.5;
/// Timestep scaling of the boundary coefficients, multiplied by `1 / T`.
pub const BOUNDARY_TIME_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    #[default]
    Epsilon,
    X0,
}

/// Where the auxiliary head taps the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AuxTap {
    #[default]
    Penultimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub pose_channels: usize,
    pub hidden_channels: usize,
    pub num_blocks: usize,
    /// Width of the depthwise temporal mixing kernel; odd.
    pub temporal_kernel: usize,
    /// Width of the sinusoidal time embedding and the time MLP.
    pub time_embed_dim: usize,
    /// Length of the face feature vector (0 disables the face pathway).
    pub face_dim: usize,
    pub prediction: PredictionTarget,
    pub aux_tap: AuxTap,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            pose_channels: 1,
            hidden_channels: 12,
            num_blocks: 2,
            temporal_kernel: 3,
            time_embed_dim: 16,
            face_dim: 12,
            prediction: PredictionTarget::Epsilon,
            aux_tap: AuxTap::Penultimate,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("hidden_channels", self.hidden_channels),
            ("num_blocks", self.num_blocks),
            ("temporal_kernel", self.temporal_kernel),
            ("time_embed_dim", self.time_embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal_kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    /// Length of the concatenated (face, pooled reference) conditioning vector.
    pub fn cond_dim(&self) -> usize {
        self.face_dim + self.latent_channels
    }

    pub fn input_channels(&self) -> usize {
        self.latent_channels + self.pose_channels
    }
}

/// Conditioning of one clip.
///
/// `guidance` and `boundary` enter through the time embedding; the remaining
/// fields are content. With `null` set every content field reads as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    /// Reference latent `[C_lat, h, w]`.
    pub reference: Tensor,
    /// Pose latents `[F, C_pose, h, w]`.
    pub pose: Tensor,
    pub face: Vec<f64>,
    pub guidance: GuidanceScale,
    /// Segment boundary `s_o`.
    pub boundary: usize,
    pub null: bool,
}

impl ConditionBundle {
    /// Content-free bundle for a latent of shape `[F, C, h, w]`.
    pub fn empty(cfg: &DenoiserConfig, frames: usize, height: usize, width: usize) -> Self {
        Self {
            reference: Tensor::zeros(&[cfg.latent_channels, height, width]),
            pose: Tensor::zeros(&[frames, cfg.pose_channels, height, width]),
            face: vec![0.0; cfg.face_dim],
            guidance: GuidanceScale::ONE,
            boundary: 0,
            null: true,
        }
    }

    /// The unconditional twin used for guidance.
    pub fn nulled(&self) -> Self {
        Self {
            null: true,
            ..self.clone()
        }
    }

    /// Content fields explicitly zeroed, flag cleared.
    pub fn zeroed_content(&self) -> Self {
        Self {
            reference: Tensor::zeros(self.reference.shape()),
            pose: Tensor::zeros(self.pose.shape()),
            face: vec![0.0; self.face.len()],
            null: false,
            ..self.clone()
        }
    }

    pub fn with_guidance(&self, w: GuidanceScale) -> Self {
        Self {
            guidance: w,
            ..self.clone()
        }
    }

    pub(crate) fn check(&self, cfg: &DenoiserConfig, x_shape: &[usize]) -> Result<()> {
        let (f, h, w) = (x_shape[0], x_shape[2], x_shape[3]);
        if self.reference.shape() != [cfg.latent_channels, h, w] {
            return Err(Error::Argument(format!(
                "reference latent shape {:?} does not match [{}, {h}, {w}]",
                self.reference.shape(),
                cfg.latent_channels
            )));
        }
        if self.pose.shape() != [f, cfg.pose_channels, h, w] {
            return Err(Error::Argument(format!(
                "pose latent shape {:?} does not match [{f}, {}, {h}, {w}]",
                self.pose.shape(),
                cfg.pose_channels
            )));
        }
        if self.face.len() != cfg.face_dim {
            return Err(Error::Argument(format!(
                "face feature has {} entries, config expects {}",
                self.face.len(),
                cfg.face_dim
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_latent(cfg: &DenoiserConfig, x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != cfg.latent_channels {
        return Err(Error::Argument(format!(
            "latent must be [F, {}, h, w], got {s:?}",
            cfg.latent_channels
        )));
    }
    Ok(())
}

/// Network prediction and penultimate features for one clip.
pub fn raw_forward(
    params: &ModelParams,
    x_t: &Tensor,
    t: usize,
    cond: &ConditionBundle,
    sched: &NoiseSchedule,
) -> Result<(Tensor, Tensor)> {
    if t > sched.num_timesteps() {
        return Err(Error::Argument(format!("timestep {t} outside schedule")));
    }
    let (pred, cache) = forward(params, x_t, t, cond.boundary, cond)?;
    Ok((pred, cache.features))
}

/// `(c_skip(u), c_out(u))` for a distance `u = t - s_o` from the segment boundary.
pub fn boundary_coefficients(u: usize, num_timesteps: usize) -> (f64, f64) {
    let scaled = u as f64 * BOUNDARY_TIME_SCALE / num_timesteps as f64;
    let s2 = SIGMA_DATA * SIGMA_DATA;
    let denom = scaled * scaled + s2;
    (s2 / denom, scaled / denom.sqrt())
}

/// Scalars `(on_x, on_pred)` with `f(x_t, t, s_o) = on_x * x_t + on_pred * prediction` for `t > s_o`.
pub(crate) fn consistency_coefficients(
    t: usize,
    boundary: usize,
    target: PredictionTarget,
    sched: &NoiseSchedule,
) -> (f64, f64) {
    let (c_skip, c_out) = boundary_coefficients(t - boundary, sched.num_timesteps());
    let (a_t, s_t) = sched.coefficients(t);
    // Clean estimate x0 = p * x_t + q * prediction.
    let (p, q) = match target {
        PredictionTarget::Epsilon => (1.0 / a_t, -s_t / a_t),
        PredictionTarget::X0 => (0.0, 1.0),
    };
    let (comb_x, comb_pred) = (c_skip + c_out * p, c_out * q);
    if boundary == 0 {
        return (comb_x, comb_pred);
    }
    let (dx, d0) = ddim_coefficients(t, boundary, sched);
    (dx + d0 * comb_x, d0 * comb_pred)
}

fn check_boundary(t: usize, boundary: usize, sched: &NoiseSchedule) -> Result<()> {
    if t > sched.num_timesteps() {
        return Err(Error::Argument(format!("timestep {t} outside schedule")));
    }
    if boundary > t {
        return Err(Error::Argument(format!(
            "segment boundary {boundary} exceeds timestep {t}"
        )));
    }
    Ok(())
}

/// Segment consistency function `f(x_t, t, s_o)`, landing on timestep `s_o`.
///
/// The network's clean estimate is blended with `x_t` by `c_skip`/`c_out` of
/// `t - s_o` and carried to `s_o` by one DDIM step. At `t = s_o` the input is
/// returned unchanged.
pub fn consistency_function(
    params: &ModelParams,
    x_t: &Tensor,
    t: usize,
    s_o: usize,
    cond: &ConditionBundle,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_boundary(t, s_o, sched)?;
    check_latent(params.config(), x_t)?;
    if t == s_o {
        return Ok(x_t.clone());
    }
    let (pred, _) = forward(params, x_t, t, s_o, cond)?;
    Ok(apply_consistency(x_t, &pred, t, s_o, params.config().prediction, sched))
}

pub(crate) fn apply_consistency(
    x_t: &Tensor,
    pred: &Tensor,
    t: usize,
    s_o: usize,
    target: PredictionTarget,
    sched: &NoiseSchedule,
) -> Tensor {
    let (on_x, on_pred) = consistency_coefficients(t, s_o, target, sched);
    let mut out = x_t.clone();
    for (o, p) in out.data_mut().iter_mut().zip(pred.data()) {
        *o = on_x * *o + on_pred * p;
    }
    out
}

/// Clean-estimate conversion of a raw prediction.
pub fn predicted_x0(
    x_t: &Tensor,
    pred: &Tensor,
    t: usize,
    target: PredictionTarget,
    sched: &NoiseSchedule,
) -> Tensor {
    match target {
        PredictionTarget::X0 => pred.clone(),
        PredictionTarget::Epsilon => {
            let (a, s) = sched.coefficients(t);
            let mut out = x_t.clone();
            for (o, e) in out.data_mut().iter_mut().zip(pred.data()) {
                *o = (*o - s * e) / a;
            }
            out
        }
    }
}

/// Linear projection of penultimate features onto the latent shape.
pub fn aux_head_predict(params: &ModelParams, features: &Tensor) -> Result<Tensor> {
    net::aux_head(params, features)
}

/// `mu * theta_minus + (1 - mu) * theta`, name by name.
pub fn ema_update(theta_minus: &ModelParams, theta: &ModelParams, mu: f64) -> Result<ModelParams> {
    let mut out = theta_minus.clone();
    ema_update_in_place(&mut out, theta, mu)?;
    Ok(out)
}

pub fn ema_update_in_place(theta_minus: &mut ModelParams, theta: &ModelParams, mu: f64) -> Result<()> {
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::Argument(format!("EMA rate must lie in [0, 1), got {mu}")));
    }
    theta_minus.check_compatible(theta)?;
    for (dst, src) in theta_minus.tensors_mut().zip(theta.tensors()) {
        for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
            *a = mu * *a + (1.0 - mu) * b;
        }
    }
    Ok(())
}
