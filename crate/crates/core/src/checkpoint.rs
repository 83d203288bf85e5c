//! Checkpoint directories: a text manifest plus a little-endian f64 blob.
//!
//! ```text
//! step-000250/
//!   manifest.txt   format, epsilon, seed, step, config.*, task.*, param.*
//!   params.bin     parameter values in manifest order
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::model::{Model, ModelError, Owner};
use crate::tasks::{END, PAD, UNK};
use crate::tensor::{Tensor, NORM_EPS};

pub const FORMAT: &str = "hyperformer-checkpoint-v1";
pub const MANIFEST: &str = "manifest.txt";
pub const PARAMS: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub struct Checkpoint {
    pub model: Model,
    pub run: RunConfig,
    pub step: usize,
}

/// Directory name for a checkpoint at `step`.
pub fn step_dir_name(step: usize) -> String {
    format!("step-{step:06}")
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Writes `model` to `dir`. The model's own config and seed replace those
/// in `run`.
pub fn save(dir: &Path, model: &Model, run: &RunConfig, step: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut run = run.clone();
    run.model = model.config().clone();
    run.seed = model.seed();
    let mut m = String::new();
    m.push_str(&format!("format = {FORMAT}\n"));
    m.push_str(&format!("epsilon = {NORM_EPS:e}\n"));
    m.push_str(&format!("seed = {}\n", model.seed()));
    m.push_str(&format!("step = {step}\n"));
    m.push_str(&format!("special.pad = {PAD}\nspecial.end = {END}\nspecial.unk = {UNK}\n"));
    for (k, v) in run.to_pairs() {
        m.push_str(&format!("config.{k} = {v}\n"));
    }
    for (i, t) in model.task_names().iter().enumerate() {
        m.push_str(&format!("task.{i} = {t}\n"));
    }
    let mut blob = Vec::with_capacity(model.num_parameters() * 8);
    for (i, p) in model.params().iter().enumerate() {
        m.push_str(&format!(
            "param.{i} = {} {} {} {} {}\n",
            p.name,
            shape_text(p.tensor.shape()),
            p.owner,
            p.trainable,
            p.task.map_or("-".to_string(), |t| t.to_string())
        ));
        for x in p.tensor.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mp = dir.join(MANIFEST);
    fs::write(&mp, m).map_err(io(&mp))?;
    let bp = dir.join(PARAMS);
    fs::write(&bp, blob).map_err(io(&bp))?;
    Ok(())
}

struct ParamLine {
    name: String,
    shape: Vec<usize>,
    owner: Owner,
    trainable: bool,
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: String| CheckpointError::Corrupt {
        path: dir.to_path_buf(),
        reason,
    };
    let mp = dir.join(MANIFEST);
    let text = fs::read_to_string(&mp).map_err(io(&mp))?;
    let mut run = RunConfig::default();
    let mut seed = None;
    let mut step = None;
    let mut format_ok = false;
    let mut tasks: Vec<(usize, String)> = Vec::new();
    let mut params: Vec<(usize, ParamLine)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| corrupt(format!("manifest line {}: `{line}`", n + 1)))?;
        if let Some(key) = k.strip_prefix("config.") {
            run.set(key, v)?;
        } else if let Some(i) = k.strip_prefix("task.") {
            let i = i.parse().map_err(|_| corrupt(format!("bad task key `{k}`")))?;
            tasks.push((i, v.to_string()));
        } else if let Some(i) = k.strip_prefix("param.") {
            let i = i.parse().map_err(|_| corrupt(format!("bad param key `{k}`")))?;
            let f: Vec<&str> = v.split(' ').collect();
            if f.len() != 5 {
                return Err(corrupt(format!("bad param line `{line}`")));
            }
            let shape = f[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| corrupt(format!("bad shape in `{line}`")))?;
            params.push((
                i,
                ParamLine {
                    name: f[0].to_string(),
                    shape,
                    owner: f[2].parse().map_err(corrupt)?,
                    trainable: f[3].parse().map_err(|_| corrupt(format!("bad flag in `{line}`")))?,
                },
            ));
        } else {
            match k {
                "format" => format_ok = v == FORMAT,
                "epsilon" => {
                    let e: f64 = v.parse().map_err(|_| corrupt("bad epsilon".into()))?;
                    if e != NORM_EPS {
                        return Err(corrupt(format!("epsilon {e} differs from {NORM_EPS}")));
                    }
                }
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| corrupt("bad seed".into()))?),
                "step" => step = Some(v.parse::<usize>().map_err(|_| corrupt("bad step".into()))?),
                _ if k.starts_with("special.") => {}
                _ => return Err(corrupt(format!("unknown manifest key `{k}`"))),
            }
        }
    }
    if !format_ok {
        return Err(corrupt(format!("missing or unsupported format (expected {FORMAT})")));
    }
    let seed = seed.ok_or_else(|| corrupt("missing seed".into()))?;
    let step = step.ok_or_else(|| corrupt("missing step".into()))?;
    tasks.sort_by_key(|t| t.0);
    if tasks.iter().enumerate().any(|(i, t)| t.0 != i) {
        return Err(corrupt("task ids are not contiguous".into()));
    }
    params.sort_by_key(|p| p.0);
    if params.iter().enumerate().any(|(i, p)| p.0 != i) {
        return Err(corrupt("parameter ids are not contiguous".into()));
    }
    let names: Vec<String> = tasks.into_iter().map(|t| t.1).collect();
    run.seed = seed;
    let mut model = Model::build(&run.model, &names, seed)?;
    if model.params().len() != params.len() {
        return Err(corrupt(format!(
            "manifest lists {} parameters, configuration declares {}",
            params.len(),
            model.params().len()
        )));
    }
    let bp = dir.join(PARAMS);
    let blob = fs::read(&bp).map_err(io(&bp))?;
    let total: usize = params.iter().map(|p| p.1.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(corrupt(format!("{} holds {} bytes, expected {}", PARAMS, blob.len(), total * 8)));
    }
    let mut off = 0;
    for (_, p) in params {
        let i = model
            .param_index(&p.name)
            .ok_or_else(|| corrupt(format!("unexpected parameter `{}`", p.name)))?;
        if model.params()[i].owner != p.owner {
            return Err(corrupt(format!("owner mismatch for `{}`", p.name)));
        }
        let n: usize = p.shape.iter().product();
        let data: Vec<f64> = blob[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        off += n * 8;
        let t = Tensor::new(p.shape, data).map_err(|e| corrupt(e.to_string()))?;
        model.set_param_at(i, t)?;
        model.set_trainable(i, p.trainable);
    }
    Ok(Checkpoint { model, run, step })
}
