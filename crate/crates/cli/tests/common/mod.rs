#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn vulaug<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_vulaug"))
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("LLM_API_KEY")
        .env_remove("LLM_ENDPOINT")
        .env_remove("EMBED_ENDPOINT")
        .output()
        .expect("run vulaug")
}

/// Runs and asserts success, returning stdout.
pub fn ok<I, S>(args: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = vulaug(args);
    assert!(
        out.status.success(),
        "vulaug failed with {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic corpus file; `id_prefix` renames ids so pools can be disjoint.
pub fn write_corpus(dir: &Path, name: &str, n_vul: usize, n_clean: usize, seed: u64, id_prefix: &str) -> PathBuf {
    let path = dir.join(name);
    let text: String = vulaug_testkit::corpus::synthetic_corpus(n_vul, n_clean, seed)
        .into_iter()
        .map(|mut v| {
            let id = format!("{id_prefix}{}", v["id"].as_str().unwrap());
            v["id"] = Value::String(id);
            format!("{v}\n")
        })
        .collect();
    std::fs::write(&path, text).unwrap();
    path
}

pub fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn json_stdout(stdout: &str) -> Value {
    serde_json::from_str(stdout).unwrap()
}
