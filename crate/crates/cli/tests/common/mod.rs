#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn msnerf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msnerf")).args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A 4-view 16x16 dataset with one held-out view.
pub fn small_dataset(dir: &Path) {
    let out = msnerf(&[
        "gen-synthetic", "--out", p(dir), "--views", "4", "--holdout-views", "1", "--width", "16", "--height", "16",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

/// Training flags for a model small enough to train in seconds.
pub const SMALL_MODEL: &[&str] = &[
    "--train-rays", "128", "--eval-rays", "128", "--hash-log2-size", "10", "--hash-levels", "4",
    "--hash-max-resolution", "64", "--hidden-dim", "16", "--proposal-samples", "16,8", "--final-samples", "8",
    "--log-every", "1",
];

pub fn train(manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--manifest", p(manifest), "--out", p(out)];
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(extra);
    msnerf(&args)
}
