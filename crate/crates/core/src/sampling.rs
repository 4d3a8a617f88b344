//! Few-step segmented consistency sampling and the teacher's DDIM baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{consistency_function, forward, predicted_x0, ConditionBundle, ModelParams};
use crate::schedule::{
    cfg_combine_in_place, ddim_step, GuidanceScale, NoiseSchedule, TrajectorySegmentation,
};
use crate::tensor::Tensor;

/// Timesteps visited by the sampler and the boundary each visit lands on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePlan {
    pub steps: usize,
    /// Strictly decreasing, starting at `T`.
    pub visits: Vec<usize>,
    /// Boundary `s` used for the visit with the same index; the last one is 0.
    pub anchors: Vec<usize>,
    pub noise_seed: u64,
}

impl SamplePlan {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.noise_seed = seed;
        self
    }

    /// Checks the plan against a segmentation.
    pub fn validate(&self, seg: &TrajectorySegmentation) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("sample plan: {m}")));
        let total = seg.num_timesteps();
        if self.visits.is_empty() || self.visits.len() != self.steps || self.anchors.len() != self.steps {
            return bad(format!(
                "{} steps but {} visits and {} anchors",
                self.steps,
                self.visits.len(),
                self.anchors.len()
            ));
        }
        if self.visits[0] != total {
            return bad(format!("first visit {} is not T = {total}", self.visits[0]));
        }
        if *self.anchors.last().unwrap() != 0 {
            return bad("last anchor is not 0".into());
        }
        for (i, (&t, &s)) in self.visits.iter().zip(&self.anchors).enumerate() {
            if !seg.boundaries().contains(&s) {
                return bad(format!("anchor {s} is not a segment boundary"));
            }
            if s >= t {
                return bad(format!("anchor {s} not below visit {t}"));
            }
            if let Some(&next) = self.visits.get(i + 1) {
                if next >= t || next < s {
                    return bad(format!("visit {next} does not follow {t} with anchor {s}"));
                }
            }
        }
        Ok(())
    }
}

/// Spreads `n` steps over the segments (extra steps go to later segments).
///
/// A segment with `m` steps is visited at `m` equally spaced timesteps starting
/// from its upper end. With fewer steps than segments the plan jumps between
/// a subset of the boundaries.
pub fn plan_steps(n: usize, seg: &TrajectorySegmentation) -> Result<SamplePlan> {
    if n == 0 {
        return Err(Error::Argument("sample plan needs at least one step".into()));
    }
    let k = seg.num_segments();
    let b = seg.boundaries();
    let mut visits = Vec::with_capacity(n);
    let mut anchors = Vec::with_capacity(n);
    if n < k {
        let stops: Vec<usize> = (0..=n).rev().map(|j| b[(j as f64 * k as f64 / n as f64).round() as usize]).collect();
        for pair in stops.windows(2) {
            visits.push(pair[0]);
            anchors.push(pair[1]);
        }
    } else {
        let (base, extra) = (n / k, n % k);
        for o in (0..k).rev() {
            let m = base + usize::from(o >= k - extra);
            let (lo, hi) = (b[o], b[o + 1]);
            for j in 0..m {
                visits.push(hi - (j as f64 * (hi - lo) as f64 / m as f64).round() as usize);
                anchors.push(lo);
            }
        }
    }
    let plan = SamplePlan {
        steps: n,
        visits,
        anchors,
        noise_seed: 0,
    };
    plan.validate(seg)?;
    Ok(plan)
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, data).expect("shape matches length")
}

/// Latent shape implied by a condition bundle.
pub fn latent_shape(params: &ModelParams, cond: &ConditionBundle) -> Vec<usize> {
    let r = cond.reference.shape();
    vec![cond.pose.shape()[0], params.config().latent_channels, r[1], r[2]]
}

/// Samples `x_t` from `q(x_t | x_s)` for `s < t` given `x_s`.
pub fn renoise(x_s: &Tensor, s: usize, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x_s.check_same_shape(eps, "renoise")?;
    if s > t || t > sched.num_timesteps() {
        return Err(Error::Argument(format!("cannot re-noise from {s} to {t}")));
    }
    let ratio = sched.alpha_bar(t) / sched.alpha_bar(s);
    let (a, b) = (ratio.sqrt(), (1.0 - ratio).max(0.0).sqrt());
    let mut out = x_s.clone();
    for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = a * *o + b * e;
    }
    Ok(out)
}

/// Multistep consistency sampling; guidance enters only through the embedding.
pub fn multistep_sample(
    params: &ModelParams,
    cond: &ConditionBundle,
    plan: &SamplePlan,
    sched: &NoiseSchedule,
    seg: &TrajectorySegmentation,
) -> Result<Tensor> {
    if seg.num_timesteps() != sched.num_timesteps() {
        return Err(Error::Config(format!(
            "segmentation covers {} timesteps but the schedule has {}",
            seg.num_timesteps(),
            sched.num_timesteps()
        )));
    }
    plan.validate(seg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.noise_seed);
    let shape = latent_shape(params, cond);
    let mut x = gaussian(&shape, &mut rng);
    for (i, (&t, &s)) in plan.visits.iter().zip(&plan.anchors).enumerate() {
        let c = ConditionBundle {
            boundary: s,
            ..cond.clone()
        };
        let y = consistency_function(params, &x, t, s, &c, sched)?;
        x = match plan.visits.get(i + 1) {
            Some(&next) if next > s => renoise(&y, s, next, &gaussian(&shape, &mut rng), sched)?,
            _ => y,
        };
    }
    Ok(x)
}

/// `n + 1` DDIM timesteps from `T` down to 0.
pub fn ddim_timesteps(n: usize, num_timesteps: usize) -> Result<Vec<usize>> {
    if n == 0 || n > num_timesteps {
        return Err(Error::Argument(format!("DDIM step count {n} outside [1, {num_timesteps}]")));
    }
    Ok((0..=n)
        .map(|i| num_timesteps - (i as f64 * num_timesteps as f64 / n as f64).round() as usize)
        .collect())
}

/// Deterministic DDIM chain from `x_T` with a clean-estimate oracle `x0_of(x_t, t)`.
pub fn ddim_chain(
    x_start: Tensor,
    timesteps: &[usize],
    sched: &NoiseSchedule,
    mut x0_of: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut x = x_start;
    for pair in timesteps.windows(2) {
        let x0 = x0_of(&x, pair[0])?;
        x = ddim_step(&x, &x0, pair[0], pair[1], sched)?;
    }
    Ok(x)
}

/// N-step teacher DDIM with classifier-free guidance at scale `w`.
pub fn teacher_ddim_sample(
    teacher: &ModelParams,
    cond: &ConditionBundle,
    n: usize,
    w: GuidanceScale,
    sched: &NoiseSchedule,
    noise_seed: u64,
) -> Result<Tensor> {
    let steps = ddim_timesteps(n, sched.num_timesteps())?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let x_t = gaussian(&latent_shape(teacher, cond), &mut rng);
    let tcond = ConditionBundle {
        guidance: GuidanceScale::ONE,
        boundary: 0,
        ..cond.clone()
    };
    let uncond = tcond.nulled();
    ddim_chain(x_t, &steps, sched, |x, t| {
        let (pc, _) = forward(teacher, x, t, 0, &tcond)?;
        let (mut pred, _) = forward(teacher, x, t, 0, &uncond)?;
        cfg_combine_in_place(pred.data_mut(), pc.data(), w);
        Ok(predicted_x0(x, &pred, t, teacher.config().prediction, sched))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, DenoiserConfig};
    use crate::schedule::{build_schedule, cfg_combine_calls, make_segments, ScheduleKind};

    fn sched() -> NoiseSchedule {
        build_schedule(ScheduleKind::LinearBeta, 1000).unwrap()
    }

    #[test]
    fn plan_examples() {
        let seg = make_segments(2, 1000).unwrap();
        let p = plan_steps(2, &seg).unwrap();
        assert_eq!((p.visits, p.anchors), (vec![1000, 500], vec![500, 0]));
        let p = plan_steps(4, &seg).unwrap();
        assert_eq!((p.visits, p.anchors), (vec![1000, 750, 500, 250], vec![500, 500, 0, 0]));
        let p = plan_steps(1, &seg).unwrap();
        assert_eq!((p.visits, p.anchors), (vec![1000], vec![0]));
        let p = plan_steps(3, &seg).unwrap();
        assert_eq!((p.visits, p.anchors), (vec![1000, 750, 500], vec![500, 500, 0]));
        let seg4 = make_segments(4, 1000).unwrap();
        let p = plan_steps(2, &seg4).unwrap();
        assert_eq!((p.visits, p.anchors), (vec![1000, 500], vec![500, 0]));
        assert!(plan_steps(0, &seg).is_err());
    }

    #[test]
    fn plan_rejects_foreign_segmentation() {
        let p = plan_steps(4, &make_segments(2, 1000).unwrap()).unwrap();
        assert!(p.validate(&make_segments(3, 1000).unwrap()).is_err());
        assert!(p.validate(&make_segments(2, 500).unwrap()).is_err());
    }

    #[test]
    fn ddim_grid() {
        assert_eq!(ddim_timesteps(4, 1000).unwrap(), vec![1000, 750, 500, 250, 0]);
        assert_eq!(ddim_timesteps(3, 10).unwrap(), vec![10, 7, 3, 0]);
        assert!(ddim_timesteps(0, 10).is_err());
    }

    #[test]
    fn renoise_matches_marginal_coefficients() {
        let s = sched();
        let x = Tensor::full(&[3], 2.0);
        let e = Tensor::full(&[3], 0.0);
        let y = renoise(&x, 0, 400, &e, &s).unwrap();
        assert!((y.data()[0] - 2.0 * s.alpha_bar(400).sqrt()).abs() < 1e-14);
        assert_eq!(renoise(&x, 300, 300, &e, &s).unwrap(), x);
    }

    fn model_and_cond() -> (ModelParams, ConditionBundle) {
        let cfg = DenoiserConfig {
            hidden_channels: 4,
            time_embed_dim: 8,
            ..DenoiserConfig::default()
        };
        let p = init_model(&cfg, 0).unwrap();
        let mut cond = ConditionBundle::empty(&cfg, 3, 4, 4);
        cond.null = false;
        cond.face = vec![0.3; cfg.face_dim];
        (p, cond)
    }

    #[test]
    fn multistep_is_deterministic_and_guidance_free() {
        let (p, cond) = model_and_cond();
        let s = sched();
        let seg = make_segments(2, 1000).unwrap();
        for n in [1, 2, 4, 8] {
            let plan = plan_steps(n, &seg).unwrap().with_seed(5);
            let before = cfg_combine_calls();
            let a = multistep_sample(&p, &cond, &plan, &s, &seg).unwrap();
            assert_eq!(cfg_combine_calls(), before);
            assert_eq!(a.shape(), &[3, 3, 4, 4]);
            assert!(a.is_finite());
            assert_eq!(a, multistep_sample(&p, &cond, &plan, &s, &seg).unwrap());
            let b = multistep_sample(&p, &cond, &plan.clone().with_seed(6), &s, &seg).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn teacher_unit_guidance_is_conditional_sampling() {
        let (p, cond) = model_and_cond();
        let s = sched();
        let a = teacher_ddim_sample(&p, &cond, 5, GuidanceScale::ONE, &s, 9).unwrap();
        assert_eq!(a, teacher_ddim_sample(&p, &cond, 5, GuidanceScale::ONE, &s, 9).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = gaussian(&[3, 3, 4, 4], &mut rng);
        let b = ddim_chain(x, &ddim_timesteps(5, 1000).unwrap(), &s, |x, t| {
            let (e, _) = forward(&p, x, t, 0, &cond).unwrap();
            Ok(predicted_x0(x, &e, t, p.config().prediction, &s))
        })
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn point_mass_chain_lands_on_the_mass() {
        // An exact denoiser for a point mass makes every DDIM chain exact.
        let s = sched();
        let m = Tensor::full(&[4], 0.7);
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let out = ddim_chain(x, &ddim_timesteps(3, 1000).unwrap(), &s, |_, _| Ok(m.clone())).unwrap();
        assert_eq!(out, m);
    }
}
