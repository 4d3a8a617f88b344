//! Sampling plans for several step counts, and a check that consistency
//! sampling never combines guided predictions.

use segcd::config::RunConfig;
use segcd::experiment::Workspace;
use segcd::model::init_model;
use segcd::sampling::plan_steps;
use segcd::schedule::{cfg_combine_calls, make_segments};

fn main() -> segcd::Result<()> {
    for k in [1, 2, 4] {
        let seg = make_segments(k, 1000)?;
        for n in [1, 2, 4, 8] {
            let p = plan_steps(n, &seg)?;
            println!("K={k} N={n}: visit {:?} anchored at {:?}", p.visits, p.anchors);
        }
    }
    let ws = Workspace::new(RunConfig::default().with_overrides(&["data.eval_clips=2"])?)?;
    let params = init_model(&ws.cfg.model, 0)?;
    let set = ws.eval_set()?;
    let before = cfg_combine_calls();
    let z = ws.sample_distilled(&params, &set.examples, 4)?;
    println!("{} samples of shape {:?}; guidance combinations used: {}", z.len(), z[0].shape(), cfg_combine_calls() - before);
    Ok(())
}
