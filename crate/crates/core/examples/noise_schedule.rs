//! Noise schedule, forward diffusion, a DDIM step and trajectory segments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segcd::schedule::{build_schedule, ddim_step, forward_diffuse, make_segments, sample_timestep_pair, ScheduleKind};
use segcd::Tensor;

fn main() -> segcd::Result<()> {
    let sched = build_schedule(ScheduleKind::LinearBeta, 1000)?;
    for t in [0, 1, 250, 500, 750, 1000] {
        println!("alpha_bar[{t:4}] = {:.6}", sched.alpha_bar(t));
    }

    let x0 = Tensor::from_vec(&[4], vec![0.3, -0.7, 1.2, 0.0])?;
    let eps = Tensor::from_vec(&[4], vec![1.0, 0.5, -0.25, 2.0])?;
    let x_600 = forward_diffuse(&x0, 600, &eps, &sched)?;
    // With the true clean latent the solver step lands exactly on the forward marginal.
    let stepped = ddim_step(&x_600, &x0, 600, 200, &sched)?;
    let direct = forward_diffuse(&x0, 200, &eps, &sched)?;
    let gap = stepped.data().iter().zip(direct.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("exact-denoiser DDIM 600 -> 200 max gap {gap:.2e}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in [1, 2, 4] {
        let seg = make_segments(k, 1000)?;
        let pairs: Vec<_> = (0..k).map(|o| sample_timestep_pair(&seg, o, &mut rng)).collect::<segcd::Result<_>>()?;
        println!("K={k} boundaries {:?} sample pairs {pairs:?}", seg.boundaries());
    }
    Ok(())
}
