//! Writes `metrics.csv`, `summary.json` and `landscape.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::json;

use super::config::ExperimentConfig;
use super::metrics::MetricsLog;
use crate::error::{Error, Result};

pub fn metrics_csv(log: &MetricsLog) -> String {
    let mut out = String::from("iteration,task_id");
    for k in 0..log.num_tasks {
        let _ = write!(out, ",acc_task_{k}");
    }
    out.push_str(",avg_acc,lr,mem_size,mean_history\n");
    for r in &log.rows {
        let _ = write!(out, "{},{}", r.iteration, r.task_id);
        for a in &r.acc {
            match a {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        let _ = writeln!(out, ",{},{},{},{}", r.avg_acc, r.lr, r.mem_size, r.mean_history);
    }
    out
}

pub fn landscape_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (s, l) in curve {
        let _ = writeln!(out, "{s},{l}");
    }
    out
}

pub fn summary_json(log: &MetricsLog, cfg: &ExperimentConfig, wall_seconds: f64) -> serde_json::Value {
    json!({
        "method": cfg.method.to_string(),
        "seed": cfg.seed,
        "final_acc": log.final_acc(),
        "final_fm": log.final_fm(),
        "anytime_acc": log.anytime_acc(),
        "acc_matrix": log.acc_matrix,
        "train_steps": log.train_steps,
        "wall_seconds": wall_seconds,
        "config": cfg.to_kv_pairs(),
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the run outputs into `dir`, creating it if needed.
pub fn emit_results(
    dir: &Path,
    log: &MetricsLog,
    cfg: &ExperimentConfig,
    wall_seconds: f64,
    landscape: Option<&[(f64, f64)]>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("metrics.csv"), &metrics_csv(log))?;
    let summary = serde_json::to_string_pretty(&summary_json(log, cfg, wall_seconds))
        .map_err(|e| Error::Data(e.to_string()))?;
    write(&dir.join("summary.json"), &summary)?;
    if let Some(curve) = landscape {
        write(&dir.join("landscape.csv"), &landscape_csv(curve))?;
    }
    Ok(())
}
