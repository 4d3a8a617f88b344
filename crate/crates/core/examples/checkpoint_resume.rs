//! Saves a distillation checkpoint, reloads it and resumes with identical losses.

use segcd::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use segcd::config::RunConfig;
use segcd::distill::train_distillation;
use segcd::experiment::Workspace;

fn main() -> segcd::Result<()> {
    let cfg = RunConfig::default().with_overrides(&["data.train_clips=8", "teacher.total_steps=50"])?;
    let ws = Workspace::new(cfg)?;
    let data = ws.prepare(&ws.train_clips()?)?;
    let mut teacher = ws.init_teacher()?;
    ws.train_teacher(&mut teacher, &data, None)?;

    let mut a = ws.init_distill(&teacher.params);
    let run = |st: &mut _, n| {
        let mut losses = Vec::new();
        train_distillation(st, &data, &ws.seg, &ws.cfg.distill, &ws.sched, n, &mut |b, _| {
            losses.push(b.total);
            Ok(())
        })
        .map(|_| losses)
    };
    run(&mut a, 5)?;
    let path = std::env::temp_dir().join("segcd_example.ckpt");
    save_checkpoint(&path, &Checkpoint::Distill(a.clone()), &ws.distill_meta())?;
    let uninterrupted = run(&mut a, 5)?;

    let (Checkpoint::Distill(mut b), header) = load_checkpoint(&path, Some(&ws.cfg.distill_digest()), false)? else {
        unreachable!("a distillation checkpoint was written")
    };
    println!("reloaded step {} with {} sections", header.step, header.sections.len());
    let resumed = run(&mut b, 5)?;
    println!("losses identical after resume: {}", resumed == uninterrupted);
    let other = ws.cfg.with_overrides(&["lambda1=0"])?;
    match load_checkpoint(&path, Some(&other.distill_digest()), false) {
        Err(e) => println!("mismatched config refused: {e}"),
        Ok(_) => println!("unexpectedly accepted"),
    }
    Ok(())
}
