//! DDIM with the closed-form denoiser of a Gaussian-mixture prior.

use segcd::oracle::{gaussian_trajectory_error, solver_consistency_check, GaussianMixturePrior};
use segcd::schedule::{build_schedule, make_segments, ScheduleKind};

fn main() -> segcd::Result<()> {
    let sched = build_schedule(ScheduleKind::LinearBeta, 1000)?;
    let gauss = GaussianMixturePrior::standard_gaussian(1);
    for steps in [10, 50, 100, 500, 1000] {
        let e = gaussian_trajectory_error(&gauss, &sched, steps, 200, 0)?;
        println!("{steps:>4} steps: max relative error to the exact flow {e:.2e}");
    }
    let seg = make_segments(2, 1000)?;
    for (name, prior) in [("gaussian", gauss), ("two modes", GaussianMixturePrior::two_modes(1))] {
        let r = solver_consistency_check(&prior, &sched, 100, 0.05, 2000, &seg, 0)?;
        println!("{name}: endpoint W1 {:.6?}, passed {}", r.endpoint_w1, r.passed);
    }
    Ok(())
}
