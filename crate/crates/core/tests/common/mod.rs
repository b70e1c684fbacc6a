#![allow(dead_code)]

mod oracle;

#[allow(unused_imports)]
pub use oracle::*;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn kha() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kha"));
    c.env_remove("KHA_THREADS");
    c
}

pub fn run(args: &[&str]) -> Output {
    kha().args(args).output().expect("spawn kha")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn bundled_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus.txt")
}

/// A tiny model config; `extra` lines are appended verbatim.
pub fn tiny_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let text = format!(
        "model.layers = 1\nmodel.d = 16\nmodel.n_heads = 4\nmodel.kv_groups = 2\n\
         model.d_k = 4\nmodel.d_v = 4\ntrain.seq_len = 16\ntrain.batch_tokens = 32\n\
         data.corpus_path = {}\n{extra}\n",
        bundled_corpus().display()
    );
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

pub fn train(config: &Path, out: &Path) -> Output {
    run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

pub fn first_loss(csv: &str) -> f64 {
    csv.lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap()
}
