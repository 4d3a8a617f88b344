#![allow(dead_code)]

use segcd::config::RunConfig;

/// A configuration small enough for end-to-end tests to run in seconds.
pub fn tiny_overrides() -> Vec<String> {
    [
        "data.train_clips=3",
        "data.eval_clips=9",
        "data.clip.frames=4",
        "data.clip.height=16",
        "data.clip.width=16",
        "face.crop_size=8",
        "face.grid=1",
        "model.face_dim=3",
        "model.hidden_channels=4",
        "teacher.total_steps=4",
        "distill.total_steps=4",
        "teacher.batch_size=2",
        "distill.batch_size=2",
        "checkpoint_every=2",
        "eval.crop_size=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn tiny() -> RunConfig {
    RunConfig::default().with_overrides(&tiny_overrides()).unwrap()
}
