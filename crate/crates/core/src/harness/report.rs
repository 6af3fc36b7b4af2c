use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{read_json, write_json, RunRecord};
use crate::error::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Serialize)]
struct SummaryRow<'a> {
    experiment: &'a str,
    task: &'a str,
    method: &'a str,
    k: f64,
    divergence: &'static str,
    seed: u64,
    alpha: f64,
    tau: f64,
    speedup: f64,
    c: f64,
    accept: usize,
    reject: usize,
    median_kl: f64,
    config_hash: &'a str,
}

/// Writes `summary.csv` with one row per record and each record as JSON
/// under `records/`. Returns the summary path.
pub fn report(records: &[RunRecord], out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out = out_dir.as_ref();
    if records.is_empty() {
        return Err(Error::precondition("no run records to report"));
    }
    let rec_dir = out.join("records");
    fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
    let summary = out.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&summary)?;
    for r in records {
        w.serialize(SummaryRow {
            experiment: &r.experiment,
            task: &r.task,
            method: &r.method,
            k: r.k,
            divergence: r.divergence.name(),
            seed: r.seed,
            alpha: r.alpha,
            tau: r.tau,
            speedup: r.speedup,
            c: r.c,
            accept: r.accept,
            reject: r.reject,
            median_kl: r.analysis.median_kl,
            config_hash: &r.config_hash,
        })?;
        let name = format!("{}-seed{}-{}.json", r.experiment, r.seed, r.method);
        write_json(&rec_dir.join(name), r)?;
    }
    w.flush().map_err(|e| Error::io(&summary, e))?;
    Ok(summary)
}

/// Every `record-*.json` below `root`, sorted by path.
pub fn read_records(root: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    collect(root.as_ref(), &mut paths)?;
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            if path.file_name().is_some_and(|n| n != "records") {
                collect(&path, out)?;
            }
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("record-") && n.ends_with(".json"))
        {
            out.push(path);
        }
    }
    Ok(())
}
