//! Distills on the vector task and compares self-consistency against an
//! untrained student.

use segcd::model::init_model;
use segcd::oracle::{distilled_self_consistency_check, run_vector_task, vector_sample_error, GaussianMixturePrior, VectorTaskConfig};
use segcd::sampling::plan_steps;
use segcd::schedule::{build_schedule, ScheduleKind};

fn main() -> segcd::Result<()> {
    let sched = build_schedule(ScheduleKind::LinearBeta, 1000)?;
    let prior = GaussianMixturePrior::two_modes(2);
    let out = run_vector_task(&prior, &VectorTaskConfig::default(), &sched)?;
    let fresh = init_model(&out.config, 99)?;
    let check = |m| distilled_self_consistency_check(m, &out.teacher, &prior, &out.seg, &sched, 512, f64::INFINITY, 5);
    let base = check(&fresh)?.mean_discrepancy;
    let dist = check(&out.state.ema)?.mean_discrepancy;
    println!("self-consistency gap: untrained {base:.4}, distilled {dist:.4} ({:.1}%)", 100.0 * dist / base);
    for n in [1, 2, 4] {
        let plan = plan_steps(n, &out.seg)?;
        println!("N={n}: W1 to the prior {:.4}", vector_sample_error(&out.state.ema, &prior, &plan, &out.seg, &sched, 2000, 3)?);
    }
    Ok(())
}
