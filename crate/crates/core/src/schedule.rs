//! Noise schedules, forward diffusion, deterministic DDIM stepping, guidance
//! combination, and trajectory segmentation.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default number of diffusion timesteps.
pub const DEFAULT_TIMESTEPS: usize = 1000;

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 2e-2;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    LinearBeta,
    Cosine,
}

/// Cumulative signal fractions `alpha_bar[0..=T]` with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn num_timesteps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(sqrt(alpha_bar[t]), sqrt(1 - alpha_bar[t]))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha_bar[t];
        (a.sqrt(), (1.0 - a).sqrt())
    }

    fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.num_timesteps() {
            return Err(Error::Argument(format!(
                "timestep {t} outside [0, {}]",
                self.num_timesteps()
            )));
        }
        Ok(())
    }
}

pub fn build_schedule(kind: ScheduleKind, num_timesteps: usize) -> Result<NoiseSchedule> {
    if num_timesteps < 2 {
        return Err(Error::Config(format!(
            "schedule needs at least 2 timesteps, got {num_timesteps}"
        )));
    }
    let n = num_timesteps;
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => (0..n)
            .map(|i| {
                LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (n - 1) as f64
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let u = (t / n as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=n)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, MAX_BETA))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(n + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { kind, alpha_bar })
}

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x0.check_same_shape(eps, "forward_diffuse")?;
    sched.check_timestep(t)?;
    let mut out = x0.clone();
    forward_diffuse_in_place(out.data_mut(), eps.data(), t, sched);
    Ok(out)
}

pub(crate) fn forward_diffuse_in_place(x0: &mut [f64], eps: &[f64], t: usize, sched: &NoiseSchedule) {
    let (a, s) = sched.coefficients(t);
    for (x, e) in x0.iter_mut().zip(eps) {
        *x = a * *x + s * e;
    }
}

/// One deterministic (eta = 0) DDIM step from `t` to `t_prev` given a clean
/// estimate `x0_hat`.
pub fn ddim_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    x_t.check_same_shape(x0_hat, "ddim_step")?;
    check_ddim_pair(t, t_prev, sched)?;
    let mut out = Tensor::zeros(x_t.shape());
    ddim_step_into(out.data_mut(), x_t.data(), x0_hat.data(), t, t_prev, sched);
    Ok(out)
}

pub(crate) fn check_ddim_pair(t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<()> {
    sched.check_timestep(t)?;
    if t == 0 {
        return Err(Error::Argument("ddim_step from t = 0 has no noise to remove".into()));
    }
    if t_prev >= t {
        return Err(Error::Argument(format!(
            "ddim_step needs t_prev < t, got t_prev = {t_prev}, t = {t}"
        )));
    }
    Ok(())
}

/// Scalar coefficients `(on_x_t, on_x0_hat)` of the DDIM step `t -> t_prev`.
pub(crate) fn ddim_coefficients(t: usize, t_prev: usize, sched: &NoiseSchedule) -> (f64, f64) {
    let (a_t, s_t) = sched.coefficients(t);
    let (a_p, s_p) = sched.coefficients(t_prev);
    let on_x = s_p / s_t;
    (on_x, a_p - on_x * a_t)
}

pub(crate) fn ddim_step_into(
    out: &mut [f64],
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) {
    let (a_t, s_t) = sched.coefficients(t);
    let (a_p, s_p) = sched.coefficients(t_prev);
    for ((o, &x), &x0) in out.iter_mut().zip(x_t).zip(x0_hat) {
        let eps = (x - a_t * x0) / s_t;
        *o = a_p * x0 + s_p * eps;
    }
}

/// Classifier-free guidance scale `w`; `w = 1` is the pure conditional prediction.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GuidanceScale(f64);

impl GuidanceScale {
    pub const ONE: GuidanceScale = GuidanceScale(1.0);

    pub fn new(w: f64) -> Result<Self> {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::Config(format!("guidance scale must be >= 0, got {w}")));
        }
        Ok(Self(w))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Training-time guidance range `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceRange {
    pub min: f64,
    pub max: f64,
}

impl GuidanceRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.min >= 0.0 && self.min <= self.max && self.max.is_finite()) {
            return Err(Error::Config(format!(
                "guidance range must satisfy 0 <= min <= max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> GuidanceScale {
        if self.max == self.min {
            return GuidanceScale(self.min);
        }
        GuidanceScale(rng.random_range(self.min..=self.max))
    }
}

impl Default for GuidanceRange {
    fn default() -> Self {
        Self { min: 1.0, max: 4.0 }
    }
}

thread_local! {
    static CFG_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `cfg_combine` evaluations performed on the current thread.
pub fn cfg_combine_calls() -> u64 {
    CFG_CALLS.with(|c| c.get())
}

/// `uncond + w * (cond - uncond)`.
pub fn cfg_combine(pred_cond: &Tensor, pred_uncond: &Tensor, w: GuidanceScale) -> Result<Tensor> {
    pred_cond.check_same_shape(pred_uncond, "cfg_combine")?;
    let mut out = pred_uncond.clone();
    cfg_combine_in_place(out.data_mut(), pred_cond.data(), w);
    Ok(out)
}

/// Overwrites `uncond` with the guided prediction. Written as
/// `w * cond + (1 - w) * uncond` so that `w = 1` yields `cond` exactly.
pub(crate) fn cfg_combine_in_place(uncond: &mut [f64], cond: &[f64], w: GuidanceScale) {
    CFG_CALLS.with(|c| c.set(c.get() + 1));
    let w = w.0;
    for (u, &c) in uncond.iter_mut().zip(cond) {
        *u = w * c + (1.0 - w) * *u;
    }
}

/// Boundaries `s[0] = 0 < s[1] < ... < s[K] = T` of `K` equal trajectory segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySegmentation {
    boundaries: Vec<usize>,
}

impl TrajectorySegmentation {
    pub fn num_segments(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn num_timesteps(&self) -> usize {
        *self.boundaries.last().expect("non-empty boundaries")
    }

    /// Lower boundary `s[o]`.
    pub fn start(&self, o: usize) -> usize {
        self.boundaries[o]
    }

    /// Upper boundary `s[o + 1]`.
    pub fn end(&self, o: usize) -> usize {
        self.boundaries[o + 1]
    }

    /// Segment whose consistency function denoises from `t`, i.e. the `o`
    /// with `s[o] < t <= s[o + 1]`. Training pairs always satisfy
    /// `t_m > s[o]`, so this is the segment a noisy input was trained in.
    pub fn denoising_segment(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.num_timesteps() {
            return Err(Error::Argument(format!(
                "denoising timestep {t} outside [1, {}]",
                self.num_timesteps()
            )));
        }
        Ok(self.boundaries[1..].partition_point(|&b| b < t))
    }
}

pub fn make_segments(k: usize, num_timesteps: usize) -> Result<TrajectorySegmentation> {
    if k == 0 || k > num_timesteps {
        return Err(Error::Config(format!(
            "segment count must lie in [1, {num_timesteps}], got {k}"
        )));
    }
    let boundaries = (0..=k)
        .map(|o| (o as f64 * num_timesteps as f64 / k as f64).round() as usize)
        .collect();
    Ok(TrajectorySegmentation { boundaries })
}

/// Half-open segment lookup: `s[o] <= t < s[o + 1]`, with `t = T` in the last segment.
pub fn segment_of(t: usize, seg: &TrajectorySegmentation) -> Result<usize> {
    let total = seg.num_timesteps();
    if t > total {
        return Err(Error::Argument(format!("timestep {t} outside [0, {total}]")));
    }
    if t == total {
        return Ok(seg.num_segments() - 1);
    }
    Ok(seg.boundaries.partition_point(|&b| b <= t) - 1)
}

/// Draws `t_m` uniformly from `(s[o], s[o+1]]`, then `t_n` uniformly from `[s[o], t_m)`.
pub fn sample_timestep_pair(
    seg: &TrajectorySegmentation,
    o: usize,
    rng: &mut impl Rng,
) -> Result<(usize, usize)> {
    if o >= seg.num_segments() {
        return Err(Error::Argument(format!(
            "segment index {o} out of range for {} segments",
            seg.num_segments()
        )));
    }
    let (lo, hi) = (seg.start(o), seg.end(o));
    if hi - lo < 1 {
        return Err(Error::Config(format!("segment [{lo}, {hi}] is degenerate")));
    }
    let t_m = rng.random_range(lo + 1..=hi);
    let t_n = rng.random_range(lo..t_m);
    Ok((t_m, t_n))
}
