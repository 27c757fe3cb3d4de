#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use priming::harness::RunConfig;

pub const TINY: &str = include_str!("../fixtures/tiny.toml");

pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Runs the `priming` binary.
pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priming")).args(args).output().unwrap()
}

pub fn cli_ok(args: &[&str]) -> serde_json::Value {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

/// The `{"error": {...}}` record of a failed run.
pub fn cli_err(args: &[&str]) -> serde_json::Value {
    let out = cli(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not a JSON error record ({e}): {line}"))
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Label index `l` under the 3-type scheme: 0 is O, odd is B, even is I.
fn oracle_type(l: usize) -> Option<(bool, usize)> {
    (l > 0).then(|| (l % 2 == 1, (l - 1) / 2))
}

/// Every `(type, start, end)` that forms a maximal entity span, found by
/// testing each interval on its own.
pub fn oracle_spans(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for start in 0..n {
        let Some((_, t)) = oracle_type(labels[start]) else { continue };
        let inside = |k: usize| oracle_type(labels[k]) == Some((false, t));
        let opens = match oracle_type(labels[start]) {
            Some((true, _)) => true,
            _ => start == 0 || oracle_type(labels[start - 1]).map(|(_, u)| u) != Some(t),
        };
        if !opens {
            continue;
        }
        for end in start + 1..=n {
            if (start + 1..end).all(inside) && (end == n || !inside(end)) {
                out.push((t, start, end));
            }
        }
    }
    out
}

/// (precision, recall, F1) in percent from the interval oracle.
pub fn oracle_scores(gold: &[Vec<usize>], pred: &[Vec<usize>]) -> (f64, f64, f64) {
    let (mut g, mut p, mut c) = (0usize, 0usize, 0usize);
    for (a, b) in gold.iter().zip(pred) {
        let gs = oracle_spans(a);
        let ps = oracle_spans(b);
        g += gs.len();
        p += ps.len();
        c += ps.iter().filter(|s| gs.contains(s)).count();
    }
    let pct = |x: usize, y: usize| if y == 0 { 0.0 } else { 100.0 * x as f64 / y as f64 };
    let (pr, rc) = (pct(c, p), pct(c, g));
    let f1 = if pr + rc > 0.0 { 2.0 * pr * rc / (pr + rc) } else { 0.0 };
    (pr, rc, f1)
}

/// A gold sequence and a prediction that copies it with some corruption, so
/// that exact matches, boundary errors and type errors all occur.
pub fn random_pair(rng: &mut impl rand::Rng) -> (Vec<usize>, Vec<usize>) {
    let n = rng.gen_range(0..16);
    let gold: Vec<usize> = (0..n).map(|_| if rng.gen_bool(0.4) { 0 } else { rng.gen_range(0..7) }).collect();
    let pred = gold
        .iter()
        .map(|&l| if rng.gen_bool(0.25) { rng.gen_range(0..7) } else { l })
        .collect();
    (gold, pred)
}
