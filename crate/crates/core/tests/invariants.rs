//! Cross-module properties checked on random inputs.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use segcd::conditioning::{motion_weighted_distance, BaseDistance, BoolGrid};
use segcd::model::{consistency_function, ema_update, init_model, ConditionBundle, DenoiserConfig};
use segcd::sampling::{multistep_sample, plan_steps, SamplePlan};
use segcd::schedule::{build_schedule, cfg_combine_calls, make_segments, sample_timestep_pair, GuidanceScale, ScheduleKind};
use segcd::Tensor;

fn mini() -> DenoiserConfig {
    DenoiserConfig {
        hidden_channels: 4,
        face_dim: 3,
        ..DenoiserConfig::default()
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn random_cond(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> ConditionBundle {
    ConditionBundle {
        reference: random_tensor(&[3, 4, 4], rng),
        pose: random_tensor(&[2, 1, 4, 4], rng),
        face: (0..cfg.face_dim).map(|_| rng.random::<f64>()).collect(),
        guidance: GuidanceScale::new(1.0 + 3.0 * rng.random::<f64>()).unwrap(),
        boundary: 0,
        null: rng.random::<bool>(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn consistency_is_identity_at_its_boundary(seed in 0u64..10_000, s_o in 0usize..=1000, scale in 1e-3f64..1e3) {
        let cfg = mini();
        let params = init_model(&cfg, seed % 7).unwrap();
        let sched = build_schedule(ScheduleKind::LinearBeta, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[2, 3, 4, 4], &mut rng).map(|v| v * scale);
        let mut cond = random_cond(&cfg, &mut rng);
        cond.boundary = s_o;
        let y = consistency_function(&params, &x, s_o, s_o, &cond, &sched).unwrap();
        prop_assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn drawn_pairs_stay_inside_their_segment(k in 1usize..9, seed in 0u64..1000) {
        let seg = make_segments(k, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for o in 0..k {
            let (t_m, t_n) = sample_timestep_pair(&seg, o, &mut rng).unwrap();
            prop_assert!(seg.start(o) <= t_n && t_n < t_m && t_m <= seg.end(o));
        }
    }

    #[test]
    fn plans_descend_and_anchor_on_boundaries(k in 1usize..9, n in 1usize..17) {
        let seg = make_segments(k, 1000).unwrap();
        let plan: SamplePlan = plan_steps(n, &seg).unwrap();
        prop_assert_eq!(plan.visits.len(), n);
        prop_assert_eq!(plan.visits[0], 1000);
        prop_assert!(plan.visits.windows(2).all(|w| w[0] > w[1]));
        prop_assert_eq!(*plan.anchors.last().unwrap(), 0);
        for (&t, &s) in plan.visits.iter().zip(&plan.anchors) {
            prop_assert!(s < t);
            prop_assert!(seg.boundaries().contains(&s));
        }
        for w in plan.visits.windows(2).zip(&plan.anchors) {
            // The next visit never lies below the anchor just reached.
            prop_assert!(w.0[1] >= *w.1);
        }
    }

    #[test]
    fn ema_is_per_name_linear(seed in 0u64..1000, mu in 0.0f64..0.999) {
        let cfg = mini();
        let a = init_model(&cfg, seed).unwrap();
        let b = init_model(&cfg, seed + 1).unwrap();
        let m = ema_update(&a, &b, mu).unwrap();
        for ((name, x), ((_, y), (_, z))) in m.iter().zip(a.iter().zip(b.iter())) {
            for ((v, p), q) in x.data().iter().zip(y.data()).zip(z.data()) {
                prop_assert!((v - (mu * p + (1.0 - mu) * q)).abs() <= 1e-12 * (1.0 + p.abs() + q.abs()), "{}", name);
            }
        }
    }

    #[test]
    fn full_mask_scales_the_base_distance(seed in 0u64..1000, lambda1 in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&[2, 3, 4, 4], &mut rng);
        let b = random_tensor(&[2, 3, 4, 4], &mut rng);
        let base = BaseDistance::MeanSquared.mean(a.data(), b.data());
        let full = motion_weighted_distance(&a, &b, &BoolGrid::filled(2, 4, 4, true), lambda1).unwrap();
        let none = motion_weighted_distance(&a, &b, &BoolGrid::filled(2, 4, 4, false), lambda1).unwrap();
        prop_assert!((full - (1.0 + lambda1) * base).abs() <= 1e-12 * base.max(1.0));
        prop_assert!((none - base).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn consistency_sampling_never_combines_guidance(seed in 0u64..1000, k in 1usize..5, n in 1usize..9) {
        let cfg = mini();
        let params = init_model(&cfg, seed).unwrap();
        let sched = build_schedule(ScheduleKind::LinearBeta, 1000).unwrap();
        let seg = make_segments(k, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cond = random_cond(&cfg, &mut rng);
        let before = cfg_combine_calls();
        let z = multistep_sample(&params, &cond, &plan_steps(n, &seg).unwrap().with_seed(seed), &sched, &seg).unwrap();
        prop_assert_eq!(cfg_combine_calls(), before);
        prop_assert_eq!(z.shape(), &[2, 3, 4, 4]);
    }
}
