//! Runs the `ognet` binary and compares output trees.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn ognet(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ognet"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs a command that must succeed; returns its stdout or the stderr line.
pub fn try_ok(cwd: &Path, args: &[&str]) -> Result<String, String> {
    let out = ognet(cwd, args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

pub fn ok(cwd: &Path, args: &[&str]) -> String {
    try_ok(cwd, args).unwrap_or_else(|e| panic!("{e}"))
}

/// Every file under `root` keyed by its relative path.
pub fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Names of files that differ or exist on one side only.
pub fn tree_diff(a: &Path, b: &Path) -> Vec<String> {
    let (fa, fb) = (files(a), files(b));
    let mut diff: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    diff.extend(fb.keys().filter(|k| !fa.contains_key(*k)).map(|k| k.display().to_string()));
    diff
}

/// Every command once with small budgets.
pub fn small_pipeline(dir: &Path) -> Result<(), String> {
    let quick = ["--size", "32", "--iters", "3", "--seed", "1"];
    let with = |base: &[&'static str], extra: &[&'static str]| -> Vec<&'static str> {
        base.iter().chain(extra).copied().collect()
    };
    try_ok(dir, &["synth", "--out", "a", "--count", "4", "--size", "40", "--seed", "1"])?;
    try_ok(dir, &["synth", "--out", "b", "--count", "4", "--size", "40", "--seed", "2"])?;
    try_ok(dir, &with(&["train-stage1", "--manifest", "a/manifest.tsv", "--out", "s1.ckpt"], &quick))?;
    try_ok(
        dir,
        &["gen-diffmaps", "--checkpoint", "s1.ckpt", "--manifest", "b/manifest.tsv", "--out", "bm", "--size", "32"],
    )?;
    try_ok(dir, &with(&["train-stage2", "--manifest", "bm/manifest.tsv", "--out", "s2.ckpt"], &quick))?;
    try_ok(
        dir,
        &["infer", "--checkpoint", "s2.ckpt", "--manifest", "b/manifest.tsv", "--out", "maps", "--size", "32"],
    )?;
    try_ok(
        dir,
        &["eval", "--manifest", "b/manifest.tsv", "--checkpoint", "s2.ckpt", "--out", "ev1", "--size", "32"],
    )?;
    try_ok(dir, &["eval", "--manifest", "b/manifest.tsv", "--maps", "maps", "--out", "ev2"])?;
    let ablate = [
        "ablate",
        "--manifest",
        "bm/manifest.tsv",
        "--out",
        "abl",
        "--attention",
        "none,ogam",
        "--conv-e-size",
        "1",
        "--eval-manifest",
        "a/manifest.tsv",
    ];
    try_ok(dir, &with(&ablate, &["--size", "32", "--iters", "2", "--seed", "1"]))?;
    Ok(())
}
