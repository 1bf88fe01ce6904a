use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::StageKind;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub nll: f64,
    pub orth: f64,
    pub total: f64,
}

/// Per-step loss trace and summary of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageKind,
    pub steps: Vec<StepRecord>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_clock_secs: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// Summary record written next to the step log.
#[derive(Serialize)]
struct Summary<'a> {
    stage: StageKind,
    steps: usize,
    final_step: Option<&'a StepRecord>,
    metrics: &'a BTreeMap<String, f64>,
    wall_clock_secs: f64,
    config_hash: &'a str,
    seed: u64,
}

impl StageReport {
    pub fn new(stage: StageKind, config_hash: String, seed: u64) -> Self {
        Self {
            stage,
            steps: Vec::new(),
            metrics: BTreeMap::new(),
            wall_clock_secs: 0.0,
            config_hash,
            seed,
        }
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.steps.last()
    }

    /// One `step= lr= nll= orth= total=` line per step.
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for r in &self.steps {
            let _ = writeln!(
                s,
                "step={} lr={:.6e} nll={:.6} orth={:.6} total={:.6}",
                r.step, r.lr, r.nll, r.orth, r.total
            );
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&Summary {
            stage: self.stage,
            steps: self.steps.len(),
            final_step: self.steps.last(),
            metrics: &self.metrics,
            wall_clock_secs: self.wall_clock_secs,
            config_hash: &self.config_hash,
            seed: self.seed,
        })
        .expect("summary serializes")
    }

    /// Writes `<stem>.log` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join(format!("{stem}.log"));
        std::fs::write(&log, self.log_text()).map_err(|e| Error::io(&log, e))?;
        let js = dir.join(format!("{stem}.json"));
        std::fs::write(&js, self.summary_json()).map_err(|e| Error::io(&js, e))?;
        Ok(())
    }
}
