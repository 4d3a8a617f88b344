//! A small segment-count ablation through the shared driver.
//!
//! cargo run --release --example ablation_grid -- segments 1,2

use segcd::config::RunConfig;
use segcd::experiment::{ablation_cells, run_ablation, AblationAxis};

fn main() -> segcd::Result<()> {
    let mut args = std::env::args().skip(1);
    let axis: AblationAxis = args.next().unwrap_or_else(|| "segments".into()).parse()?;
    let values = args.next().unwrap_or_else(|| "1,2".into());
    let base = RunConfig::default().with_overrides(&[
        "data.train_clips=16",
        "teacher.total_steps=300",
        "distill.total_steps=100",
        "distill.learning_rate=1e-4",
    ])?;
    let cells = ablation_cells(&base, axis, &values)?;
    let report = run_ablation(&cells, axis, None, 1, &mut |m| eprintln!("{m}"))?;
    print!("{}", report.table());
    Ok(())
}
