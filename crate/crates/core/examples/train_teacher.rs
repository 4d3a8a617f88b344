//! Trains a small teacher and compares its DDIM samples at several step counts.
//!
//! cargo run --release --example train_teacher -- 600

use segcd::config::RunConfig;
use segcd::experiment::Workspace;

fn main() -> segcd::Result<()> {
    let steps = std::env::args().nth(1).unwrap_or_else(|| "600".into());
    let cfg = RunConfig::default().with_overrides(&[
        "data.train_clips=16".to_string(),
        format!("teacher.total_steps={steps}"),
    ])?;
    let ws = Workspace::new(cfg)?;
    let data = ws.prepare(&ws.train_clips()?)?;
    let mut st = ws.init_teacher()?;
    ws.train_teacher(&mut st, &data, None)?;
    println!("teacher trained for {} steps", st.step);
    let set = ws.eval_set()?;
    for n in [2, 4, 8, 25] {
        let r = ws.evaluate_teacher(&st.params, &set, n, 1.0)?;
        println!("DDIM {n:>2} steps: L1 {:.4}  PSNR {:.2}  FD {:.5}", r.l1, r.psnr, r.frechet);
    }
    Ok(())
}
