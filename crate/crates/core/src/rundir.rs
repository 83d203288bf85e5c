//! Run directory layout: `manifest.txt`, `metrics.csv`, `step-XXXXXX/`
//! checkpoints and a `best` marker naming the selected checkpoint.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, step_dir_name};
use crate::config::RunConfig;
use crate::harness::{HarnessError, Result};
use crate::model::Model;
use crate::tasks::{END, PAD, UNK};

pub const RUN_FORMAT: &str = "hyperformer-run-v1";
pub const METRICS_HEADER: &str = "step,task,split,metric,loss";

pub struct RunDir {
    root: PathBuf,
    metrics: BufWriter<File>,
    run: RunConfig,
}

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

/// The fully resolved run manifest text.
pub fn manifest_text(run: &RunConfig) -> String {
    let mut s = format!("format = {RUN_FORMAT}\n");
    s.push_str(&format!("special.pad = {PAD}\nspecial.end = {END}\nspecial.unk = {UNK}\n"));
    s.push_str("artifact.metrics = metrics.csv\nartifact.checkpoints = step-*/\nartifact.best = best\n");
    for (k, v) in run.to_pairs() {
        s.push_str(&format!("config.{k} = {v}\n"));
    }
    s
}

/// Extracts the config assignments from a run manifest.
pub fn config_from_manifest(text: &str) -> std::result::Result<RunConfig, crate::config::ConfigError> {
    let mut run = RunConfig::default();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            if let Some(key) = k.strip_prefix("config.") {
                run.set(key, v)?;
            }
        }
    }
    run.validate()?;
    Ok(run)
}

impl RunDir {
    /// Creates the directory and writes the manifest before anything else.
    pub fn create(root: &Path, run: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let mp = root.join("manifest.txt");
        fs::write(&mp, manifest_text(run)).map_err(|e| io_err(&mp, e))?;
        let cp = root.join("metrics.csv");
        let f = File::create(&cp).map_err(|e| io_err(&cp, e))?;
        let mut metrics = BufWriter::new(f);
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| io_err(&cp, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            metrics,
            run: run.clone(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log_metric(&mut self, step: usize, task: &str, split: &str, metric: Option<f64>, loss: f64) -> Result<()> {
        let m = metric.map_or(String::new(), |v| v.to_string());
        writeln!(self.metrics, "{step},{task},{split},{m},{loss}").map_err(|e| io_err(&self.root, e))
    }

    pub fn save_checkpoint(&mut self, model: &Model, step: usize) -> Result<PathBuf> {
        let dir = self.root.join(step_dir_name(step));
        checkpoint::save(&dir, model, &self.run, step).map_err(|e| HarnessError::Io(e.to_string()))?;
        Ok(dir)
    }

    pub fn mark_best(&mut self, step: usize) -> Result<()> {
        let p = self.root.join("best");
        fs::write(&p, format!("{}\n", step_dir_name(step))).map_err(|e| io_err(&p, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| io_err(&self.root, e))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = self.metrics.flush();
    }
}
