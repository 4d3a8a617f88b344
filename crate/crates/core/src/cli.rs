//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, read_header, Checkpoint, CheckpointKind};
use crate::conditioning::{compute_motion_mask, export_mask_frames, project_mask_to_latent};
use crate::config::RunConfig;
use crate::data::save_clip;
use crate::error::{Error, Result};
use crate::experiment::{ablation_cells, run_ablation, save_comparison_sheet, write_frames, AblationAxis, RunDir, Workspace};
use crate::metrics::{format_table, EvalReport};
use crate::oracle::{solver_consistency_check, GaussianMixturePrior};
use crate::schedule::make_segments;

#[derive(Parser, Debug)]
#[command(name = "segcd", version, about = "Segmented consistency distillation on a toy talking-head video task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set distill.lambda1=0` or `--set lambda1=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train and eval clips.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the teacher diffusion model.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Continue from the run's teacher checkpoint.
        #[arg(long)]
        resume: bool,
        /// Accept a checkpoint whose config digest differs.
        #[arg(long)]
        force: bool,
    },
    /// Distill the teacher into a few-step student.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint; defaults to the run's `checkpoints/teacher.ckpt`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        /// Accept a checkpoint whose config digest differs.
        #[arg(long)]
        force: bool,
    },
    /// Draw samples for the eval conditions and write contact sheets.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Teacher or distillation checkpoint; defaults to the run's distillation checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sampling steps; defaults to the config's steps for the checkpoint kind.
        #[arg(long)]
        steps: Option<usize>,
        /// Number of eval conditions to sample.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Also write every frame as PNG.
        #[arg(long)]
        frames: bool,
        /// Accept a checkpoint whose config digest differs.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the eval clips.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Also evaluate the teacher checkpoint of the run with DDIM.
        #[arg(long)]
        teacher_baseline: bool,
        /// Accept a checkpoint whose config digest differs.
        #[arg(long)]
        force: bool,
    },
    /// Check the DDIM solver against the closed-form Gaussian-mixture oracle.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// `gaussian` (standard normal) or `mixture` (two modes).
        #[arg(long, default_value = "gaussian")]
        prior: String,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
        #[arg(long, default_value_t = 2000)]
        starts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one ablation axis and report one row per value.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// segments, steps, motion, gt or face.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; integers for segments/steps, on/off otherwise.
        #[arg(long)]
        values: Option<String>,
        /// Distillation runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Exit status for a failed check (as opposed to an error).
pub const EXIT_CHECK_FAILED: i32 = 1;

/// Exit status for an error of the given kind.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 2,
        Error::Config(_) => 3,
        Error::Integrity { .. } => 4,
        _ => 5,
    }
}

/// Parses `argv` (including the program name), runs the command and returns the exit status.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(passed) => {
            if passed {
                0
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) if !p.exists() => return Err(Error::Config(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.set)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_run(common: &Common) -> Result<(Workspace, RunDir)> {
    let cfg = resolve(common)?;
    let run = RunDir::create(&cfg.output_dir)?;
    run.write_config(&cfg)?;
    Ok((Workspace::new(cfg)?, run))
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found at {}; {hint}", path.display())))
    }
}

fn load_for(ws: &Workspace, path: &Path, force: bool) -> Result<Checkpoint> {
    let header = read_header(path)?;
    let expected = match header.kind {
        CheckpointKind::Teacher => ws.cfg.teacher_digest(),
        CheckpointKind::Distill => ws.cfg.distill_digest(),
    };
    let (ck, _) = load_checkpoint(path, Some(&expected), force)?;
    Ok(ck)
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenData { common } => gen_data(&common),
        Command::TrainTeacher { common, resume, force } => train_teacher(&common, resume, force),
        Command::Distill {
            common,
            teacher,
            resume,
            force,
        } => distill(&common, teacher, resume, force),
        Command::Sample {
            common,
            checkpoint,
            steps,
            count,
            frames,
            force,
        } => sample(&common, checkpoint, steps, count, frames, force),
        Command::Eval {
            common,
            checkpoint,
            steps,
            teacher_baseline,
            force,
        } => eval(&common, checkpoint, steps, teacher_baseline, force),
        Command::OracleCheck {
            common,
            prior,
            dim,
            steps,
            tolerance,
            starts,
            seed,
        } => oracle_check(&common, &prior, dim, steps, tolerance, starts, seed),
        Command::Ablate {
            common,
            axis,
            values,
            jobs,
        } => ablate(&common, &axis, values, jobs),
    }
}

fn gen_data(common: &Common) -> Result<bool> {
    let (ws, run) = open_run(common)?;
    let data_dir = run.root().join("data");
    for (split, clips) in [("train", ws.train_clips()?), ("eval", ws.eval_clips()?)] {
        for (i, clip) in clips.iter().enumerate() {
            let dir = data_dir.join(split).join(format!("clip_{i:04}"));
            save_clip(clip, &dir)?;
            let mask = compute_motion_mask(clip, ws.cfg.distill.delta)?;
            export_mask_frames(&project_mask_to_latent(&mask, ws.ae.factor)?, &dir.join("mask"), "latent_mask")?;
        }
        let sheet = run.samples().join(format!("{split}_clips.png"));
        let rows: Vec<_> = clips.iter().take(8).map(|c| &c.pixels).collect();
        crate::experiment::contact_sheet(&rows)?.save(&sheet)?;
        println!("{split}: {} clips under {}", clips.len(), data_dir.join(split).display());
    }
    Ok(true)
}

fn train_teacher(common: &Common, resume: bool, force: bool) -> Result<bool> {
    let (ws, run) = open_run(common)?;
    let path = run.teacher_checkpoint();
    let mut state = if resume && path.exists() {
        match load_for(&ws, &path, force)? {
            Checkpoint::Teacher(s) => s,
            Checkpoint::Distill(_) => return Err(Error::Config(format!("{} is not a teacher checkpoint", path.display()))),
        }
    } else {
        ws.init_teacher()?
    };
    let data = ws.prepare(&ws.train_clips()?)?;
    let start = state.step;
    ws.train_teacher(&mut state, &data, Some(&run))?;
    println!(
        "teacher trained from step {start} to {}; checkpoint {}",
        state.step,
        path.display()
    );
    Ok(true)
}

fn distill(common: &Common, teacher: Option<PathBuf>, resume: bool, force: bool) -> Result<bool> {
    let (ws, run) = open_run(common)?;
    let own = run.distill_checkpoint();
    let mut state = if resume && own.exists() {
        match load_for(&ws, &own, force)? {
            Checkpoint::Distill(s) => s,
            Checkpoint::Teacher(_) => return Err(Error::Config(format!("{} is not a distillation checkpoint", own.display()))),
        }
    } else {
        let path = teacher.unwrap_or_else(|| run.teacher_checkpoint());
        require(&path, "teacher checkpoint", "run train-teacher first or pass --teacher")?;
        match load_for(&ws, &path, force)? {
            Checkpoint::Teacher(t) => ws.init_distill(&t.params),
            Checkpoint::Distill(_) => return Err(Error::Config(format!("{} is not a teacher checkpoint", path.display()))),
        }
    };
    let data = ws.prepare(&ws.train_clips()?)?;
    let eval = (ws.cfg.eval_every > 0).then(|| ws.eval_set()).transpose()?;
    let start = state.step;
    ws.distill(&mut state, &data, Some(&run), eval.as_ref())?;
    println!("distilled from step {start} to {}; checkpoint {}", state.step, own.display());
    Ok(true)
}

fn sample(
    common: &Common,
    checkpoint: Option<PathBuf>,
    steps: Option<usize>,
    count: usize,
    frames: bool,
    force: bool,
) -> Result<bool> {
    let (ws, run) = open_run(common)?;
    let path = checkpoint.unwrap_or_else(|| run.distill_checkpoint());
    require(&path, "checkpoint", "train first or pass --checkpoint")?;
    let ck = load_for(&ws, &path, force)?;
    let mut set = ws.eval_set()?;
    set.clips.truncate(count.max(1));
    set.examples.truncate(count.max(1));
    let (latents, n, tag) = match &ck {
        Checkpoint::Distill(s) => {
            let n = steps.unwrap_or(ws.cfg.sampling.steps);
            (ws.sample_distilled(&s.ema, &set.examples, n)?, n, "distilled")
        }
        Checkpoint::Teacher(s) => {
            let n = steps.unwrap_or(ws.cfg.sampling.teacher_steps);
            (ws.sample_teacher(&s.params, &set.examples, n, ws.cfg.sampling.teacher_guidance)?, n, "teacher")
        }
    };
    let pred = ws.decode(&latents, &set.clips)?;
    let sheet = run.samples().join(format!("{tag}_n{n}.png"));
    save_comparison_sheet(&sheet, &pred, &set.clips, count)?;
    if frames {
        for (i, c) in pred.iter().enumerate() {
            write_frames(&c.pixels, &run.samples().join(format!("{tag}_n{n}_frames")), &format!("clip{i:03}"))?;
        }
    }
    println!("{} samples, contact sheet {}", pred.len(), sheet.display());
    Ok(true)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    label: &'a str,
    checkpoint: String,
    steps: usize,
    report: &'a EvalReport,
}

fn eval(common: &Common, checkpoint: Option<PathBuf>, steps: Option<usize>, teacher_baseline: bool, force: bool) -> Result<bool> {
    let (ws, run) = open_run(common)?;
    let path = checkpoint.unwrap_or_else(|| run.distill_checkpoint());
    require(&path, "checkpoint", "train first or pass --checkpoint")?;
    let set = ws.eval_set()?;
    let mut rows: Vec<(String, EvalReport, PathBuf, usize)> = Vec::new();
    match load_for(&ws, &path, force)? {
        Checkpoint::Distill(s) => {
            let n = steps.unwrap_or(ws.cfg.sampling.steps);
            rows.push((format!("distilled N={n}"), ws.evaluate_params(&s.ema, &set, n)?, path.clone(), n));
        }
        Checkpoint::Teacher(s) => {
            let n = steps.unwrap_or(ws.cfg.sampling.teacher_steps);
            let r = ws.evaluate_teacher(&s.params, &set, n, ws.cfg.sampling.teacher_guidance)?;
            rows.push((format!("teacher DDIM N={n}"), r, path.clone(), n));
        }
    }
    if teacher_baseline {
        let tpath = run.teacher_checkpoint();
        require(&tpath, "teacher checkpoint", "run train-teacher first")?;
        if let Checkpoint::Teacher(s) = load_for(&ws, &tpath, force)? {
            let n = ws.cfg.sampling.teacher_steps;
            let r = ws.evaluate_teacher(&s.params, &set, n, ws.cfg.sampling.teacher_guidance)?;
            rows.push((format!("teacher DDIM N={n}"), r, tpath, n));
        }
    }
    for (label, report, ck, n) in &rows {
        let name = label.replace([' ', '='], "_").to_lowercase();
        run.write_json(
            &run.reports().join(format!("eval_{name}.json")),
            &EvalOutput {
                label,
                checkpoint: ck.display().to_string(),
                steps: *n,
                report,
            },
        )?;
    }
    let table: Vec<(String, EvalReport)> = rows.into_iter().map(|(l, r, _, _)| (l, r)).collect();
    print!("{}", format_table(&table));
    Ok(true)
}

fn oracle_check(common: &Common, prior: &str, dim: usize, steps: usize, tolerance: f64, starts: usize, seed: u64) -> Result<bool> {
    let cfg = resolve(common)?;
    let ws = Workspace::new(cfg)?;
    if dim == 0 {
        return Err(Error::Usage("--dim must be at least 1".into()));
    }
    let prior = match prior {
        "gaussian" => GaussianMixturePrior::standard_gaussian(dim),
        "mixture" => GaussianMixturePrior::two_modes(dim),
        other => return Err(Error::Usage(format!("unknown prior `{other}` (expected gaussian or mixture)"))),
    };
    let seg = make_segments(ws.cfg.distill.segments, ws.cfg.schedule.timesteps)?;
    let report = solver_consistency_check(&prior, &ws.sched, steps, tolerance, starts, &seg, seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &common.out {
        let run = RunDir::create(out)?;
        run.write_config(&ws.cfg)?;
        run.write_json(&run.reports().join("oracle_check.json"), &report)?;
    }
    Ok(report.passed)
}

fn ablate(common: &Common, axis: &str, values: Option<String>, jobs: usize) -> Result<bool> {
    let axis: AblationAxis = axis.parse()?;
    let (ws, run) = open_run(common)?;
    let values = values.unwrap_or_else(|| axis.default_values().to_string());
    let cells = ablation_cells(&ws.cfg, axis, &values)?;
    let report = run_ablation(&cells, axis, Some(&run), jobs, &mut |m| eprintln!("{m}"))?;
    let name = serde_json::to_value(axis)?.as_str().unwrap_or("axis").to_string();
    run.write_json(&run.reports().join(format!("ablation_{name}.json")), &report)?;
    print!("{}", report.table());
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_and_key_are_usage_errors() {
        assert_eq!(run_command(["segcd", "distill", "--bogus"]), 2);
        assert_eq!(run_command(["segcd", "frobnicate"]), 2);
        let e = resolve(&Common {
            set: vec!["lamda1=0".into()],
            ..Common::default()
        })
        .unwrap_err();
        assert!(matches!(&e, Error::Usage(m) if m.contains("lamda1")));
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let out = out.to_str().unwrap();
        assert_eq!(run_command(["segcd", "distill", "--out", out]), 3);
        assert_eq!(run_command(["segcd", "sample", "--out", out]), 3);
        assert_eq!(run_command(["segcd", "eval", "--config", "/nonexistent/c.json"]), 3);
    }

    #[test]
    fn override_is_echoed_in_resolved_config() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg_path = tmp.path().join("c.json");
        std::fs::write(&cfg_path, r#"{"distill": {"segments": 1}}"#).unwrap();
        let common = Common {
            config: Some(cfg_path),
            set: vec!["lambda1=0".into()],
            out: Some(tmp.path().join("run")),
        };
        let (ws, run) = open_run(&common).unwrap();
        assert_eq!(ws.cfg.distill.segments, 1);
        let echoed = RunConfig::load(&run.root().join("config.json")).unwrap();
        assert_eq!(echoed.distill.lambda1, 0.0);
        assert_eq!(echoed.distill.segments, 1);
    }

    #[test]
    fn oracle_check_gaussian_passes() {
        assert_eq!(run_command(["segcd", "oracle-check", "--prior", "gaussian", "--steps", "100"]), 0);
        assert_eq!(run_command(["segcd", "oracle-check", "--prior", "cauchy"]), 2);
    }
}
