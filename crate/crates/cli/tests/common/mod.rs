#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/whoops_mini")
}

pub fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden")
}

pub fn replay_args() -> Vec<String> {
    let f = fixture();
    vec![
        "--manifest".into(),
        f.join("manifest.jsonl").display().to_string(),
        "--replay-facts".into(),
        f.join("replay_facts.jsonl").display().to_string(),
        "--replay-nli".into(),
        f.join("replay_nli.jsonl").display().to_string(),
    ]
}

/// Runs the binary inside `dir` with cache and run directories under it.
pub fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_realitycheck"))
        .current_dir(dir)
        .args(args)
        .args(["--cache-dir", "cache", "--run-dir", "runs"])
        .env_remove("REALITYCHECK_CONFIG")
        .env_remove("REALITYCHECK_LVLM_URL")
        .env_remove("REALITYCHECK_NLI_URL")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

pub fn run_replay(dir: &Path, args: &[&str]) -> Output {
    let mut all: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    all.extend(replay_args());
    let refs: Vec<&str> = all.iter().map(String::as_str).collect();
    run(dir, &refs)
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Parses the `backend requests: lvlm=A nli=B` log line.
pub fn request_counts(o: &Output) -> Option<(usize, usize)> {
    let err = stderr(o);
    let line = err.lines().find(|l| l.contains("backend requests:"))?;
    let field = |name: &str| -> Option<usize> {
        let rest = &line[line.find(&format!("{name}="))? + name.len() + 1..];
        rest.split(|c: char| !c.is_ascii_digit())
            .next()?
            .parse()
            .ok()
    };
    Some((field("lvlm")?, field("nli")?))
}

/// Manifest of three fixture images, the second pointing at a missing file.
pub fn manifest_with_missing_image(dir: &Path) -> PathBuf {
    let images = fixture().join("images");
    let lines = [
        format!(
            r#"{{"image_id":"camel_real","path":"{}"}}"#,
            images.join("camel_real.png").display()
        ),
        format!(
            r#"{{"image_id":"gone","path":"{}"}}"#,
            dir.join("gone.png").display()
        ),
        format!(
            r#"{{"image_id":"plow_real","path":"{}"}}"#,
            images.join("plow_real.png").display()
        ),
    ];
    let path = dir.join("three.jsonl");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}
