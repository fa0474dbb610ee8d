#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seqint_core::rng::StreamKey;
use seqint_core::simgen::{generate, Scenario};

pub fn seqint() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqint"))
}

pub fn run(args: &[&str]) -> Output {
    seqint().args(args).env_remove("SEQINT_SEED").env_remove("SEQINT_WORKERS").output().expect("binary runs")
}

/// Writes a simulated trial with columns `y,a,q,x01..` and returns its path.
pub fn write_trial(dir: &Path, scenario: &str, n: usize, p: usize, seed: u64) -> PathBuf {
    let s = Scenario::named(scenario, n, p).unwrap();
    let d = generate(&s, StreamKey::new(seed)).unwrap();
    let mut text = String::from("y,a,q");
    for name in d.names() {
        write!(text, ",{name}").unwrap();
    }
    text.push('\n');
    let q = d.q0().unwrap();
    for i in 0..d.n() {
        write!(text, "{},{},{}", d.y()[i], d.a()[i] as u8, q[i]).unwrap();
        for k in 0..d.p() {
            write!(text, ",{}", d.x()[(i, k)]).unwrap();
        }
        text.push('\n');
    }
    let path = dir.join(format!("{scenario}-{seed}.csv"));
    std::fs::write(&path, text).unwrap();
    path
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}
