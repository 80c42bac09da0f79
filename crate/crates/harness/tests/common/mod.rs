#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use polarity_harness::sweep::{plan_sweep, Run, Store, SweepConfig};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").canonicalize().unwrap()
}

pub fn data(rel: &str) -> PathBuf {
    data_dir().join(rel)
}

/// Writes `config.toml` into `dir`. `models` and `checkpoints` are TOML
/// array bodies; `extra` is appended verbatim. The toy table is available
/// as `ref:toy` and, for multi-model sweeps, as `ref:toy-a` .. `ref:toy-g`.
pub fn write_config(dir: &Path, models: &str, checkpoints: &str, stimuli: &[&str], extra: &str) -> PathBuf {
    let table = data("models/toy.json");
    let stimuli: Vec<String> = stimuli.iter().map(|s| format!("{:?}", data(s).display().to_string())).collect();
    let mut refs = format!("toy = {:?}\n", table.display().to_string());
    for c in 'a'..='g' {
        refs.push_str(&format!("toy-{c} = {:?}\n", table.display().to_string()));
    }
    let text = format!(
        "models = [{models}]\ncheckpoints = [{checkpoints}]\nstimuli = [{}]\ncache_dir = {:?}\n{extra}\n\n\
         [lexicons]\nnpi = {:?}\ndc = {:?}\n\n[reference_models]\n{refs}",
        stimuli.join(", "),
        dir.join("no-models").display().to_string(),
        data("lexicons/npi.json").display().to_string(),
        data("lexicons/dc.json").display().to_string(),
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

pub const TOY_STIMULI: [&str; 2] = ["stimuli/toy-npi.jsonl", "stimuli/toy-dc.jsonl"];

pub fn toy_config(dir: &Path) -> PathBuf {
    write_config(dir, "\"ref:toy\"", "\"final\", 1000", &TOY_STIMULI, "parallelism = 2")
}

pub fn plan(config: &Path, store: &Path) -> Run {
    let cfg = SweepConfig::load(config).unwrap();
    plan_sweep(&cfg, &Store::new(store)).unwrap()
}

pub fn polarity(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_polarity"));
    cmd.args(args).env_remove("POLARITY_STORE").env_remove("POLARITY_ABORT_AFTER_ITEMS");
    cmd
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed: {}\n{}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn run_id_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("run-id: ").map(str::to_string))
        .expect("run-id line")
}

/// Sorted relative paths and bytes of every file under `dir`.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
