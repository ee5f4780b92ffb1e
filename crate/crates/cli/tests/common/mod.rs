#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY_RUN: &str = r#"{
  "model": {"D": 16, "heads": 2, "enc_blocks": 1, "dec_blocks": 1, "latent_dim": 4, "d_feat": 16},
  "train": {"epochs": 3, "batch": 4, "warmup_epochs": 1}
}"#;

pub const TINY_SYNTH: &str = r#"{"d_feat": 16, "n_bg": 30}"#;

pub fn octcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octcast")).args(args).output().expect("spawn octcast")
}

pub fn octcast_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_octcast"));
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("spawn octcast")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[track_caller]
pub fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "command failed: {}", stderr(&o));
    o
}

/// Scratch directory holding a small synthetic dataset and a tiny run config.
pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("synth.json"), TINY_SYNTH).unwrap();
        fs::write(dir.path().join("run.json"), TINY_RUN).unwrap();
        let f = Self { dir };
        ok(octcast(&["synth", "--n", &n.to_string(), "--seed", "1", "--config", &f.s("synth.json"), "--out", &f.s("data.jsonl")]));
        f
    }

    pub fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn s(&self, name: &str) -> String {
        self.p(name).to_string_lossy().into_owned()
    }

    pub fn write(&self, name: &str, text: &str) -> String {
        fs::write(self.p(name), text).unwrap();
        self.s(name)
    }

    pub fn read(&self, name: &str) -> Vec<u8> {
        read(&self.p(name))
    }

    /// Train the tiny model into `name`.
    pub fn train(&self, name: &str, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--data", "DATA", "--config", "CFG", "--out-weights", "OUT"];
        let (data, cfg, out) = (self.s("data.jsonl"), self.s("run.json"), self.s(name));
        for a in args.iter_mut() {
            *a = match *a {
                "DATA" => &data,
                "CFG" => &cfg,
                "OUT" => &out,
                other => other,
            };
        }
        args.extend_from_slice(extra);
        octcast(&args)
    }
}

pub fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}
