#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

/// lm-small + unet-small at resolution 16: 200 steps, snapshots every 100.
pub const SMOKE_TOML: &str = "\
[language]
preset = \"lm-small\"

[vision]
preset = \"unet-small\"

[train]
steps = 200
batch_size = 2
resolution = 16
snapshot_every = 100

[sample]
resolution = 16
num_inference_steps = 10
";

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the binary with any `TINYBRIDGE__*` variables of the test process
/// removed, plus `env`.
pub fn tinybridge(args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tinybridge"));
    for (k, _) in std::env::vars() {
        if k.starts_with("TINYBRIDGE__") {
            cmd.env_remove(k);
        }
    }
    cmd.args(args).envs(env.iter().copied());
    let Output { status, stdout, stderr } = cmd.output().expect("binary runs");
    Run {
        code: status.code().expect("exited normally"),
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
    }
}

pub fn ok(args: &[&str]) -> Run {
    let r = tinybridge(args, &[]);
    assert_eq!(r.code, 0, "{args:?} failed:\n{}", r.stderr);
    r
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Every file below `dir` as `(relative path, bytes)`, sorted.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// One uninterrupted smoke training run, shared by every test in a binary.
pub struct Smoke {
    _tmp: TempDir,
    pub config: PathBuf,
    pub run: PathBuf,
}

pub fn smoke() -> &'static Smoke {
    static CELL: OnceLock<Smoke> = OnceLock::new();
    CELL.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let config = write(tmp.path(), "smoke.toml", SMOKE_TOML);
        let run = tmp.path().join("run");
        ok(&["train", "--config", s(&config), "--out", s(&run)]);
        Smoke { _tmp: tmp, config, run }
    })
}

/// `key = value` lines of an eval report.
pub fn report_value<'a>(report: &'a str, key: &str) -> Option<&'a str> {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
}
