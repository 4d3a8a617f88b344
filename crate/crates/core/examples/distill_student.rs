//! Distills a briefly trained teacher and prints the logged loss breakdown.
//!
//! cargo run --release --example distill_student

use segcd::config::RunConfig;
use segcd::distill::train_distillation;
use segcd::experiment::Workspace;

fn main() -> segcd::Result<()> {
    let cfg = RunConfig::default().with_overrides(&[
        "data.train_clips=16",
        "teacher.total_steps=300",
        "distill.learning_rate=1e-4",
    ])?;
    let ws = Workspace::new(cfg)?;
    let data = ws.prepare(&ws.train_clips()?)?;
    let mut teacher = ws.init_teacher()?;
    ws.train_teacher(&mut teacher, &data, None)?;

    let mut st = ws.init_distill(&teacher.params);
    train_distillation(&mut st, &data, &ws.seg, &ws.cfg.distill, &ws.sched, 100, &mut |b, _| {
        if b.step % 20 == 0 {
            let p = b.pairs[0];
            println!(
                "step {:>3}  cd {:>9.4}  aux {:.4}  total {:>9.4}  first pair o={} t_m={} t_n={} w={:.2}",
                b.step, b.cd_loss, b.aux_loss, b.total, p.o, p.t_m, p.t_n, p.w
            );
        }
        Ok(())
    })?;
    Ok(())
}
