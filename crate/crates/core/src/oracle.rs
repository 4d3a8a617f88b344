//! Closed-form diffusion ground truth on diagonal Gaussian-mixture priors, and
//! a vector task that runs the shipped training and sampling code on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::BoolGrid;
use crate::distill::{
    solver_target, train_distillation, train_teacher, DistillConfig, TeacherConfig, TeacherState, TrainState,
    TrainingExample,
};
use crate::error::{Error, Result};
use crate::model::{consistency_function, init_model, ConditionBundle, DenoiserConfig, ModelParams};
use crate::sampling::{ddim_chain, ddim_timesteps, multistep_sample, SamplePlan};
use crate::schedule::{make_segments, GuidanceScale, NoiseSchedule, TrajectorySegmentation};
use crate::tensor::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Prior draws standing in for the prior's exact quantiles.
const REFERENCE_SAMPLES: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixturePrior {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl GaussianMixturePrior {
    pub fn new(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let p = Self {
            means,
            variances,
            weights,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::Config("mixture needs matching non-empty means, variances, weights".into()));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().chain(&self.variances).any(|v| v.len() != d) {
            return Err(Error::Config("mixture components must share a positive dimension".into()));
        }
        if self.variances.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("mixture variances must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights must form a simplex (sum {total})")));
        }
        Ok(())
    }

    pub fn standard_gaussian(dim: usize) -> Self {
        Self {
            means: vec![vec![0.0; dim]],
            variances: vec![vec![1.0; dim]],
            weights: vec![1.0],
        }
    }

    /// Two well separated narrow modes at `-1` and `+1` in every coordinate.
    pub fn two_modes(dim: usize) -> Self {
        Self {
            means: vec![vec![-1.0; dim], vec![1.0; dim]],
            variances: vec![vec![0.04; dim], vec![0.04; dim]],
            weights: vec![0.5, 0.5],
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        (0..self.dim())
            .map(|j| self.means[k][j] + self.variances[k][j].sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn component_log_densities(&self, x: &[f64], ab: f64) -> Vec<f64> {
        let a = ab.sqrt();
        (0..self.weights.len())
            .map(|k| {
                let mut lp = self.weights[k].ln();
                for j in 0..x.len() {
                    let var = ab * self.variances[k][j] + 1.0 - ab;
                    let d = x[j] - a * self.means[k][j];
                    lp -= 0.5 * (d * d / var + (2.0 * std::f64::consts::PI * var).ln());
                }
                lp
            })
            .collect()
    }

    /// Log density of the noisy marginal at `ᾱ = ab`.
    pub fn log_marginal(&self, x: &[f64], ab: f64) -> f64 {
        log_sum_exp(&self.component_log_densities(x, ab))
    }

    /// `E[x0 | x_t]` at `ᾱ = ab`.
    pub fn posterior_mean(&self, x: &[f64], ab: f64) -> Vec<f64> {
        let a = ab.sqrt();
        let logs = self.component_log_densities(x, ab);
        let norm = log_sum_exp(&logs);
        let mut out = vec![0.0; x.len()];
        for (k, lp) in logs.iter().enumerate() {
            let r = (lp - norm).exp();
            if r == 0.0 {
                continue;
            }
            for j in 0..x.len() {
                let s2 = self.variances[k][j];
                let m = self.means[k][j];
                let gain = a * s2 / (ab * s2 + 1.0 - ab);
                out[j] += r * (m + gain * (x[j] - a * m));
            }
        }
        out
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Closed-form `E[x0 | x_t]` under the prior.
pub fn ideal_denoiser(x_t: &[f64], t: usize, prior: &GaussianMixturePrior, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t > sched.num_timesteps() {
        return Err(Error::Argument(format!("timestep {t} outside schedule")));
    }
    if x_t.len() != prior.dim() {
        return Err(Error::Argument(format!(
            "point has {} coordinates, prior has {}",
            x_t.len(),
            prior.dim()
        )));
    }
    Ok(prior.posterior_mean(x_t, sched.alpha_bar(t)))
}

/// Exact PF-ODE position at `t` of the trajectory through `x_from` at `from`,
/// for a single diagonal Gaussian (the flow is the affine map between marginals).
pub fn gaussian_flow(x_from: &[f64], from: usize, to: usize, prior: &GaussianMixturePrior, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if prior.weights.len() != 1 {
        return Err(Error::Argument("closed-form flow needs a single Gaussian".into()));
    }
    let (a0, a1) = (sched.alpha_bar(from), sched.alpha_bar(to));
    Ok(x_from
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let (m, s2) = (prior.means[0][j], prior.variances[0][j]);
            let z = (x - a0.sqrt() * m) / (a0 * s2 + 1.0 - a0).sqrt();
            a1.sqrt() * m + (a1 * s2 + 1.0 - a1).sqrt() * z
        })
        .collect())
}

/// Empirical 1-Wasserstein distance, exact for any sample sizes.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("Wasserstein distance of an empty sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    if sa.len() == sb.len() {
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64);
    }
    // Integrate |F_a - F_b| over the merged support.
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = sa[0].min(sb[0]);
    let mut total = 0.0;
    while i < sa.len() || j < sb.len() {
        let next = match (sa.get(i), sb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < sa.len() && sa[i] == next {
            i += 1;
        }
        while j < sb.len() && sb[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

fn noise_starts(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// DDIM chain on the ideal denoiser, recording the state at every grid point.
pub fn ideal_ddim_path(
    x_start: &[f64],
    timesteps: &[usize],
    prior: &GaussianMixturePrior,
    sched: &NoiseSchedule,
) -> Result<Vec<Vec<f64>>> {
    let mut path = vec![x_start.to_vec()];
    let mut x = Tensor::from_vec(&[x_start.len()], x_start.to_vec())?;
    for pair in timesteps.windows(2) {
        x = ddim_chain(x, pair, sched, |x, t| {
            Tensor::from_vec(&[prior.dim()], ideal_denoiser(x.data(), t, prior, sched)?)
        })?;
        path.push(x.data().to_vec());
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCoordinate {
    pub start: usize,
    pub dim: usize,
    pub timestep: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub schema_version: u32,
    pub steps: usize,
    pub starts: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Endpoint W1 to prior samples, per dimension.
    pub endpoint_w1: Vec<f64>,
    /// Boundary timesteps compared against the refined chain.
    pub boundaries: Vec<usize>,
    /// Mean absolute deviation from the refined chain at each boundary.
    pub boundary_mean_error: Vec<f64>,
    pub worst: Option<WorstCoordinate>,
    pub passed: bool,
}

/// Runs ideal-denoiser DDIM chains from seeded noise and checks the endpoint
/// law against the prior and the boundary states against a 10x finer chain.
pub fn solver_consistency_check(
    prior: &GaussianMixturePrior,
    sched: &NoiseSchedule,
    steps: usize,
    tolerance: f64,
    starts: usize,
    seg: &TrajectorySegmentation,
    seed: u64,
) -> Result<SolverReport> {
    prior.validate()?;
    if starts == 0 {
        return Err(Error::Argument("solver check needs at least one start".into()));
    }
    let total = sched.num_timesteps();
    let coarse = ddim_timesteps(steps, total)?;
    let fine = ddim_timesteps((steps * 10).min(total), total)?;
    let boundaries: Vec<usize> = seg.boundaries().iter().rev().copied().filter(|&b| b < total).collect();
    let d = prior.dim();
    let mut ends = vec![Vec::with_capacity(starts); d];
    let mut errors = vec![0.0; boundaries.len()];
    let mut worst: Option<WorstCoordinate> = None;
    for (i, x0) in noise_starts(starts, d, seed).iter().enumerate() {
        let pc = ideal_ddim_path(x0, &coarse, prior, sched)?;
        let pf = ideal_ddim_path(x0, &fine, prior, sched)?;
        for (j, e) in ends.iter_mut().enumerate() {
            e.push(pc.last().unwrap()[j]);
        }
        for (bi, &b) in boundaries.iter().enumerate() {
            let (Some(ic), Some(jf)) = (coarse.iter().position(|&t| t == b), fine.iter().position(|&t| t == b)) else {
                continue;
            };
            for j in 0..d {
                let err = (pc[ic][j] - pf[jf][j]).abs();
                errors[bi] += err / starts as f64;
                if worst.as_ref().is_none_or(|w| err > w.error) {
                    worst = Some(WorstCoordinate {
                        start: i,
                        dim: j,
                        timestep: b,
                        error: err,
                    });
                }
            }
        }
    }
    for e in &mut errors {
        *e /= d as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let reference: Vec<Vec<f64>> = (0..starts.max(REFERENCE_SAMPLES)).map(|_| prior.sample(&mut rng)).collect();
    let endpoint_w1 = (0..d)
        .map(|j| {
            let r: Vec<f64> = reference.iter().map(|v| v[j]).collect();
            wasserstein_1d(&ends[j], &r)
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = endpoint_w1.iter().chain(&errors).all(|&e| e < tolerance);
    Ok(SolverReport {
        schema_version: REPORT_SCHEMA_VERSION,
        steps,
        starts,
        seed,
        tolerance,
        endpoint_w1,
        boundaries,
        boundary_mean_error: errors,
        worst,
        passed,
    })
}

/// Largest relative deviation `|x_ddim - x_exact| / max(|x_exact|, 1)` between an
/// ideal-denoiser DDIM chain and the closed-form flow, over seeded starts.
pub fn gaussian_trajectory_error(
    prior: &GaussianMixturePrior,
    sched: &NoiseSchedule,
    steps: usize,
    starts: usize,
    seed: u64,
) -> Result<f64> {
    let total = sched.num_timesteps();
    let grid = ddim_timesteps(steps, total)?;
    let mut worst: f64 = 0.0;
    for x in noise_starts(starts, prior.dim(), seed) {
        let path = ideal_ddim_path(&x, &grid, prior, sched)?;
        for (p, &t) in path.iter().zip(&grid) {
            let exact = gaussian_flow(&x, total, t, prior, sched)?;
            for (a, b) in p.iter().zip(&exact) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    Ok(worst)
}

/// Denoiser configuration for vectors laid out as `[1, d, 1, 1]` latents.
pub fn vector_model_config(dim: usize) -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: dim,
        pose_channels: 0,
        face_dim: 0,
        hidden_channels: 32,
        num_blocks: 2,
        time_embed_dim: 16,
        ..DenoiserConfig::default()
    }
}

pub fn vector_condition(cfg: &DenoiserConfig) -> ConditionBundle {
    ConditionBundle {
        null: false,
        ..ConditionBundle::empty(cfg, 1, 1, 1)
    }
}

pub fn vector_latent(x: &[f64]) -> Tensor {
    Tensor::from_vec(&[1, x.len(), 1, 1], x.to_vec()).expect("vector latent")
}

pub fn vector_example(x: &[f64], cfg: &DenoiserConfig) -> TrainingExample {
    TrainingExample {
        latent: vector_latent(x),
        cond: vector_condition(cfg),
        mask: BoolGrid::new(1, 1, 1),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VectorTaskConfig {
    pub samples: usize,
    pub hidden_channels: usize,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub seed: u64,
}

impl Default for VectorTaskConfig {
    fn default() -> Self {
        Self {
            samples: 1024,
            hidden_channels: 32,
            teacher: TeacherConfig {
                learning_rate: 3e-3,
                batch_size: 32,
                total_steps: 1500,
                uncond_drop: 0.0,
                ..TeacherConfig::default()
            },
            distill: DistillConfig {
                lambda1: 0.0,
                lambda2: 0.0,
                batch_size: 32,
                total_steps: 800,
                learning_rate: 1e-3,
                guidance: crate::schedule::GuidanceRange { min: 1.0, max: 1.0 },
                ..DistillConfig::default()
            },
            seed: 0,
        }
    }
}

pub struct VectorTaskOutcome {
    pub teacher: ModelParams,
    pub state: TrainState,
    pub seg: TrajectorySegmentation,
    pub config: DenoiserConfig,
}

/// Trains a teacher on prior samples and distills it, all through the shipped loops.
pub fn run_vector_task(prior: &GaussianMixturePrior, cfg: &VectorTaskConfig, sched: &NoiseSchedule) -> Result<VectorTaskOutcome> {
    prior.validate()?;
    let model = DenoiserConfig {
        hidden_channels: cfg.hidden_channels,
        ..vector_model_config(prior.dim())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data: Vec<TrainingExample> = (0..cfg.samples)
        .map(|_| vector_example(&prior.sample(&mut rng), &model))
        .collect();
    let mut ts = TeacherState::new(init_model(&model, cfg.seed)?, cfg.seed.wrapping_add(1));
    train_teacher(&mut ts, &data, &cfg.teacher, sched, cfg.teacher.total_steps, &mut |_, _| Ok(()))?;
    let seg = make_segments(cfg.distill.segments, sched.num_timesteps())?;
    let mut state = TrainState::from_teacher(ts.params.clone(), cfg.seed.wrapping_add(2));
    train_distillation(&mut state, &data, &seg, &cfg.distill, sched, cfg.distill.total_steps, &mut |_, _| Ok(()))?;
    Ok(VectorTaskOutcome {
        teacher: ts.params,
        state,
        seg,
        config: model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistencyReport {
    pub schema_version: u32,
    pub pairs: usize,
    pub mean_discrepancy: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Mean squared gap between `f(x_{t_m}, t_m, s_o)` and `f(x̂_{t_n}, t_n, s_o)` over
/// random in-segment pairs, with `x_{t_m}` a noised prior sample and `x̂_{t_n}`
/// the teacher's solver step.
#[allow(clippy::too_many_arguments)]
pub fn distilled_self_consistency_check(
    model: &ModelParams,
    teacher: &ModelParams,
    prior: &GaussianMixturePrior,
    seg: &TrajectorySegmentation,
    sched: &NoiseSchedule,
    pairs: usize,
    tolerance: f64,
    seed: u64,
) -> Result<SelfConsistencyReport> {
    if pairs == 0 {
        return Err(Error::Argument("self-consistency check needs at least one pair".into()));
    }
    let cond = vector_condition(model.config());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..pairs {
        let o = rng.random_range(0..seg.num_segments());
        let (t_m, t_n) = crate::schedule::sample_timestep_pair(seg, o, &mut rng)?;
        let s_o = seg.start(o);
        let x0 = prior.sample(&mut rng);
        let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x_tm = crate::schedule::forward_diffuse(&vector_latent(&x0), t_m, &vector_latent(&eps), sched)?;
        let x_tn = solver_target(teacher, &x_tm, t_m, t_n, &cond, GuidanceScale::ONE, sched)?;
        let c = ConditionBundle {
            boundary: s_o,
            ..cond.clone()
        };
        let a = consistency_function(model, &x_tm, t_m, s_o, &c, sched)?;
        let b = consistency_function(model, &x_tn, t_n, s_o, &c, sched)?;
        total += a.data().iter().zip(b.data()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / a.len() as f64;
    }
    let mean = total / pairs as f64;
    Ok(SelfConsistencyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        pairs,
        mean_discrepancy: mean,
        tolerance,
        passed: mean < tolerance,
    })
}

/// Per-dimension W1 between multistep samples of a vector model and prior samples.
pub fn vector_sample_error(
    model: &ModelParams,
    prior: &GaussianMixturePrior,
    plan: &SamplePlan,
    seg: &TrajectorySegmentation,
    sched: &NoiseSchedule,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let cond = vector_condition(model.config());
    let d = prior.dim();
    let mut samples = vec![Vec::with_capacity(count); d];
    for i in 0..count {
        let p = plan.clone().with_seed(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let x = multistep_sample(model, &cond, &p, sched, seg)?;
        for (j, s) in samples.iter_mut().enumerate() {
            s.push(x.data()[j]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let reference: Vec<Vec<f64>> = (0..count).map(|_| prior.sample(&mut rng)).collect();
    let mut total = 0.0;
    for (j, s) in samples.iter().enumerate() {
        let r: Vec<f64> = reference.iter().map(|v| v[j]).collect();
        total += wasserstein_1d(s, &r)?;
    }
    Ok(total / d as f64)
}
