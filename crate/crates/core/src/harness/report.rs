use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::experiment::MatrixResult;
use crate::error::{Error, Result};
use crate::finetune::{EvalReport, FineTuneSetting};

/// Append-only JSONL file, flushed after every record.
pub struct JsonlWriter {
    file: File,
}

impl JsonlWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            file: File::create(path)?,
        })
    }

    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            file: OpenOptions::new().create(true).append(true).open(path)?,
        })
    }

    pub fn write<T: Serialize>(&mut self, item: &T) -> Result<()> {
        let mut line = serde_json::to_vec(item)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    for item in items {
        w.write(item)?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(out)
}

/// Mean F1 over seeds for every (setting, language).
pub fn mean_by(reports: &[EvalReport]) -> BTreeMap<(FineTuneSetting, String), f64> {
    let mut acc: BTreeMap<(FineTuneSetting, String), (f64, usize)> = BTreeMap::new();
    for r in reports {
        let e = acc.entry((r.setting, r.language.clone())).or_default();
        e.0 += r.f1;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn first_seen<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// Settings × languages markdown table of seed-mean F1, with an average
/// column. The best value of each column is bold.
pub fn render_table(reports: &[EvalReport]) -> String {
    let means = mean_by(reports);
    let mut settings = first_seen(reports.iter().map(|r| r.setting));
    settings.sort();
    let languages = first_seen(reports.iter().map(|r| r.language.clone()));
    let seeds = first_seen(reports.iter().map(|r| r.seed));
    let fraction: BTreeMap<FineTuneSetting, String> = reports
        .iter()
        .map(|r| (r.setting, r.trainable_percent.clone()))
        .collect();

    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for &s in &settings {
        let mut row: Vec<Option<f64>> = languages.iter().map(|l| means.get(&(s, l.clone())).copied()).collect();
        let vals: Vec<f64> = row.iter().flatten().copied().collect();
        row.push((vals.len() == languages.len()).then(|| vals.iter().sum::<f64>() / vals.len() as f64));
        rows.push(row);
    }
    let ncols = languages.len() + 1;
    let best: Vec<Option<f64>> = (0..ncols)
        .map(|c| rows.iter().filter_map(|r| r[c]).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))))
        .collect();

    let mut out = format!(
        "Entity-level micro F1 on the test split, mean over {} seed(s) ({}).\n\n",
        seeds.len(),
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")
    );
    out.push_str("| Setting |");
    for l in &languages {
        out.push_str(&format!(" {l} |"));
    }
    out.push_str(" avg |\n|---|");
    out.push_str(&"---:|".repeat(ncols));
    out.push('\n');
    for (s, row) in settings.iter().zip(&rows) {
        out.push_str(&format!("| {} ({}) |", s.label(), fraction[s]));
        for (c, v) in row.iter().enumerate() {
            match v {
                Some(v) if Some(*v) == best[c] => out.push_str(&format!(" **{v:.2}** |")),
                Some(v) => out.push_str(&format!(" {v:.2} |")),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn render_matrix(m: &MatrixResult) -> String {
    let get = |p: &str, f: &str| {
        m.cells
            .iter()
            .find(|c| c.priming == p && c.finetuning == f)
            .map_or("-".to_string(), |c| format!("{:.2}", c.mean))
    };
    let mut out = String::from("Priming strategy (rows) × downstream fine-tuning (columns), mean F1 over targets and seeds.\n\n");
    out.push_str("| priming \\ fine-tuning | AT | full FT |\n|---|---:|---:|\n");
    for p in ["PE-sim", "full-sim"] {
        out.push_str(&format!("| {p} | {} | {} |\n", get(p, "AT"), get(p, "full FT")));
    }
    out.push_str("\nPer-seed diagonal checks (diagonal cell vs. the other priming strategy in the same column):\n\n");
    out.push_str("| seed | column | diagonal | off-diagonal | holds |\n|---|---|---:|---:|---|\n");
    for c in &m.checks {
        out.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} | {} |\n",
            c.seed,
            c.finetuning,
            c.diagonal_f1,
            c.off_diagonal_f1,
            if c.holds { "yes" } else { "no" }
        ));
    }
    let (ok, n) = m.seeds_holding();
    out.push_str(&format!("\nDiagonal holds in {ok} of {n} replications.\n"));
    out
}

pub(crate) fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}
