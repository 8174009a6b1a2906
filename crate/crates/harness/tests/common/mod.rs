#![allow(dead_code)]

use std::path::Path;

use slp_core::scenegen::{Dataset, SceneSpec};
use slp_harness::RunConfig;

pub const SIZE: usize = 16;

pub fn dataset(count: usize, seed: u64) -> Dataset {
    let spec = SceneSpec::preset("sprites-easy", SIZE, seed).unwrap();
    Dataset::generate(&spec, count).unwrap()
}

/// Writes train/eval files into `dir` and returns a small config using them.
pub fn tiny_config(dir: &Path, extra: &[&str]) -> RunConfig {
    let train = dir.join("train.slpd");
    let eval = dir.join("eval.slpd");
    if !train.exists() {
        dataset(12, 1).write(&train).unwrap();
        dataset(6, 2).write(&eval).unwrap();
    }
    let mut overrides: Vec<String> = vec![
        format!("data.train=\"{}\"", train.display()),
        format!("data.eval=\"{}\"", eval.display()),
        "model.num_slots=5".into(),
        "model.slot_dim=8".into(),
        "model.proj_dim=8".into(),
        "model.iterations=2".into(),
        "model.encoder_channels=4".into(),
        "model.encoder_downsample=true".into(),
        "model.decoder_channels=4".into(),
        "optimizer.warmup_steps=2".into(),
        "training.steps=4".into(),
        "training.batch_size=3".into(),
        "eval.batch_size=3".into(),
        format!("output.dir=\"{}\"", dir.join("run").display()),
    ];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, &overrides).unwrap()
}

/// The same settings as command-line arguments.
pub fn tiny_args(dir: &Path, extra: &[&str]) -> Vec<String> {
    let config = tiny_config(dir, extra);
    let path = dir.join("tiny.toml");
    std::fs::write(&path, config.to_toml()).unwrap();
    vec!["--config".into(), path.display().to_string()]
}
