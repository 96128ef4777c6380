//! Executes one configured run into a run directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use relab_core::trainer::{metrics_line, run_with, Checkpoint, MetricsRecord, CHECKPOINT_FORMAT_VERSION};
use relab_core::Error;
use serde_json::json;

use crate::config::ExperimentConfig;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const MANIFEST: &str = "manifest.json";
pub const ABORT_REPORT: &str = "abort.json";

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Aborted { step: u64, reason: String },
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub status: RunStatus,
    pub last: Option<MetricsRecord>,
    pub final_root_probs: Option<Vec<f64>>,
}

/// Runs `cfg` and writes the resolved config, metrics stream, final
/// checkpoint and manifest into `dir`. A numerical abort is reported in the
/// summary rather than as an error.
pub fn execute(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<RunSummary> {
    let exp = cfg.build()?;
    fs::create_dir_all(dir).with_context(|| format!("cannot create run directory {}", dir.display()))?;
    for stale in [METRICS, CHECKPOINT, MANIFEST, ABORT_REPORT] {
        let p = dir.join(stale);
        if p.exists() {
            fs::remove_file(&p).with_context(|| format!("cannot remove {}", p.display()))?;
        }
    }
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml_string())?;

    let mut metrics = BufWriter::new(File::create(dir.join(METRICS))?);
    let mut last = None;
    let result = run_with(
        &exp.task,
        &exp.init,
        &exp.algorithm,
        &exp.schedule,
        &exp.optimizer,
        |rec| {
            writeln!(metrics, "{}", metrics_line(rec))?;
            last = Some(rec.clone());
            Ok(())
        },
    );
    metrics.flush()?;
    drop(metrics);

    let mut files = vec![RESOLVED_CONFIG, METRICS];
    let (status, final_root_probs) = match result {
        Ok(out) => {
            Checkpoint {
                policy: out.policy.clone(),
                seed: exp.optimizer.seed,
                step: exp.optimizer.steps,
            }
            .save(&dir.join(CHECKPOINT))?;
            files.push(CHECKPOINT);
            (RunStatus::Completed, Some(out.policy.probs_row(0)))
        }
        Err(Error::Aborted { step, reason, record }) => {
            let report = json!({ "step": step, "reason": reason, "record": record });
            fs::write(dir.join(ABORT_REPORT), serde_json::to_string_pretty(&report)? + "\n")?;
            files.push(ABORT_REPORT);
            (RunStatus::Aborted { step, reason }, None)
        }
        Err(e) => return Err(e.into()),
    };
    files.push(MANIFEST);

    let manifest = json!({
        "artifact": "relab",
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_format_version": CHECKPOINT_FORMAT_VERSION,
        "seed": exp.optimizer.seed,
        "algorithm": exp.algorithm.kind.name(),
        "steps_requested": exp.optimizer.steps,
        "steps_completed": last.as_ref().map_or(0, |r: &MetricsRecord| r.step + 1),
        "status": match &status { RunStatus::Completed => "completed", RunStatus::Aborted { .. } => "aborted" },
        "files": files,
    });
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        status,
        last,
        final_root_probs,
    })
}
