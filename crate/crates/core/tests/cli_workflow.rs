mod common;

use std::path::Path;

use segcd::cli::run_command;
use segcd::config::RunConfig;

fn run(args: &[&str], out: &Path, extra: &[&str]) -> i32 {
    let mut argv: Vec<String> = vec!["segcd".into()];
    argv.extend(args.iter().map(|s| s.to_string()));
    argv.push("--out".into());
    argv.push(out.to_string_lossy().into_owned());
    for s in common::tiny_overrides() {
        argv.push("--set".into());
        argv.push(s);
    }
    argv.extend(extra.iter().map(|s| s.to_string()));
    run_command(argv)
}

#[test]
fn full_pipeline_fills_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(run(&["gen-data"], &out, &[]), 0);
    assert!(out.join("data/train/clip_0000/pixels.npy").exists());
    assert!(out.join("data/eval/clip_0008/clip.json").exists());
    assert!(out.join("samples/train_clips.png").exists());

    assert_eq!(run(&["train-teacher"], &out, &[]), 0);
    assert_eq!(run(&["distill"], &out, &["--set", "lambda1=0"]), 0);
    let echoed = RunConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(echoed.distill.lambda1, 0.0);
    assert_eq!(echoed.data.clip.frames, 4);

    // The distillation checkpoint was written under lambda1=0; the default digest differs.
    assert_eq!(run(&["sample"], &out, &[]), 4 - 1);
    assert_eq!(run(&["sample", "--frames"], &out, &["--set", "lambda1=0"]), 0);
    assert_eq!(run(&["sample", "--force"], &out, &[]), 0);
    assert!(out.join("samples/distilled_n4.png").exists());
    assert!(out.join("samples/distilled_n4_frames/clip000_003.png").exists());

    assert_eq!(run(&["eval", "--teacher-baseline", "--steps", "2"], &out, &["--set", "lambda1=0"]), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("reports/eval_distilled_n_2.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 2);
    assert_eq!(report["report"]["schema_version"], 1);
    assert!(out.join("reports/eval_teacher_ddim_n_4.json").exists());

    for log in ["teacher.jsonl", "distill.jsonl"] {
        let text = std::fs::read_to_string(out.join("logs").join(log)).unwrap();
        assert_eq!(text.lines().count(), 4, "{log}");
    }
    assert!(out.join("checkpoints/teacher.ckpt").exists());
    assert!(out.join("checkpoints/distill.ckpt").exists());
}

#[test]
fn resume_extends_a_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(run(&["train-teacher"], &out, &[]), 0);
    assert_eq!(run(&["train-teacher", "--resume"], &out, &["--set", "teacher.total_steps=6"]), 3);
    assert_eq!(
        run(&["train-teacher", "--resume", "--force"], &out, &["--set", "teacher.total_steps=6"]),
        0
    );
    let text = std::fs::read_to_string(out.join("logs/teacher.jsonl")).unwrap();
    let steps: Vec<u64> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [1, 2, 3, 4, 5, 6]);
}

#[test]
fn ablation_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(run(&["ablate", "--axis", "segments", "--values", "1,2"], &out, &[]), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("reports/ablation_segments.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["segments"], 1);
    assert_eq!(rows[1]["segments"], 2);
    assert!(out.join("samples/segments_k_2.png").exists());
    assert_eq!(run(&["ablate", "--axis", "speed"], &out, &[]), 2);
    assert_eq!(run(&["ablate", "--axis", "face", "--values", "on,off", "--jobs", "2"], &out, &[]), 0);
}

#[test]
fn oracle_check_fails_loudly_on_tight_tolerance() {
    let code = run_command(["segcd", "oracle-check", "--prior", "mixture", "--steps", "10", "--tolerance", "1e-6"]);
    assert_eq!(code, 1);
}
