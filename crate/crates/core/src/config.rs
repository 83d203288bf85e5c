//! Model, training and run configuration, plus the `key = value` text
//! format used by config files, run manifests and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tasks::{Generator, TaskSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

// ── variants ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Every parameter is trained.
    FullFinetune,
    /// Per-task adapters and per-task layer norms.
    Adapters,
    /// Per-task adapters; every layer norm shared across tasks.
    AdaptersSharedLn,
    /// Task projector plus one hypernetwork head per adapter.
    HyperFormer,
    /// One shared hypernetwork per stack conditioned on task, layer and position.
    HyperFormerPP,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::FullFinetune,
        Variant::Adapters,
        Variant::AdaptersSharedLn,
        Variant::HyperFormer,
        Variant::HyperFormerPP,
    ];

    pub fn has_adapters(self) -> bool {
        !matches!(self, Variant::FullFinetune)
    }

    pub fn is_hyper(self) -> bool {
        matches!(self, Variant::HyperFormer | Variant::HyperFormerPP)
    }

    pub fn is_adapter_baseline(self) -> bool {
        matches!(self, Variant::Adapters | Variant::AdaptersSharedLn)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::FullFinetune => "full-finetune",
            Variant::Adapters => "adapters",
            Variant::AdaptersSharedLn => "adapters-shared-ln",
            Variant::HyperFormer => "hyperformer",
            Variant::HyperFormerPP => "hyperformer++",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| format!("expected one of {}", Variant::ALL.map(|v| v.to_string()).join(", ")))
    }
}

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ablations {
    pub no_adapters: bool,
    pub no_conditional_ln: bool,
    pub no_task_projector: bool,
    pub freeze_base_ln: bool,
    pub use_task_prefixes: bool,
}

impl Ablations {
    const NAMES: [&'static str; 5] = [
        "no-adapters",
        "no-conditional-ln",
        "no-task-projector",
        "freeze-base-ln",
        "use-task-prefixes",
    ];

    fn flags(&self) -> [bool; 5] {
        [
            self.no_adapters,
            self.no_conditional_ln,
            self.no_task_projector,
            self.freeze_base_ln,
            self.use_task_prefixes,
        ]
    }

    pub fn single(name: &str) -> Result<Self, String> {
        let mut a = Self::default();
        a.enable(name)?;
        Ok(a)
    }

    fn enable(&mut self, name: &str) -> Result<(), String> {
        match name {
            "no-adapters" => self.no_adapters = true,
            "no-conditional-ln" => self.no_conditional_ln = true,
            "no-task-projector" => self.no_task_projector = true,
            "freeze-base-ln" => self.freeze_base_ln = true,
            "use-task-prefixes" => self.use_task_prefixes = true,
            other => return Err(format!("unknown ablation `{other}`")),
        }
        Ok(())
    }

    pub fn all_names() -> &'static [&'static str] {
        &Self::NAMES
    }
}

impl fmt::Display for Ablations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = Self::NAMES
            .iter()
            .zip(self.flags())
            .filter(|(_, b)| *b)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join(","))
        }
    }
}

impl FromStr for Ablations {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut a = Ablations::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            a.enable(part)?;
        }
        Ok(a)
    }
}

// ── model configuration ─────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Blocks per stack (encoder and decoder each).
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// Longest sequence (source or decoder input) the positional table covers.
    pub max_len: usize,
    /// Adapter bottleneck width `d`.
    pub bottleneck: usize,
    /// Task embedding width `t`.
    pub task_dim: usize,
    /// Task feature width `t'` (HyperFormer only; HyperFormer++ uses `t`).
    pub task_feature_dim: usize,
    /// Hidden width `e` of the task projector.
    pub projector_hidden: usize,
    pub variant: Variant,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            d_ff: 128,
            vocab: 16,
            max_len: 16,
            bottleneck: 8,
            task_dim: 16,
            task_feature_dim: 16,
            projector_hidden: 32,
            variant: Variant::HyperFormerPP,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Whether adapters are attached at all.
    pub fn adapters_enabled(&self) -> bool {
        self.variant.has_adapters() && !self.ablations.no_adapters
    }

    /// Sets the bottleneck from a reduction factor `r = h / d`.
    pub fn set_reduction(&mut self, r: usize) -> Result<(), ConfigError> {
        if r == 0 || self.hidden % r != 0 {
            return Err(invalid(format!("reduction factor {r} must divide hidden size {}", self.hidden)));
        }
        self.bottleneck = self.hidden / r;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let dims = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
            ("bottleneck", self.bottleneck),
            ("task_dim", self.task_dim),
            ("task_feature_dim", self.task_feature_dim),
            ("projector_hidden", self.projector_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(invalid(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab <= crate::tasks::FIRST_CONTENT {
            return Err(invalid("vocabulary must leave room for content tokens"));
        }
        let a = self.ablations;
        let v = self.variant;
        if a.no_adapters && !v.is_hyper() {
            return Err(invalid(format!("ablation no-adapters does not apply to variant {v}")));
        }
        if a.no_conditional_ln && (!v.is_hyper() || a.no_adapters) {
            return Err(invalid(format!(
                "ablation no-conditional-ln needs a hypernetwork variant with adapters (got {v})"
            )));
        }
        if a.no_task_projector {
            if v != Variant::HyperFormer {
                return Err(invalid(format!("ablation no-task-projector only applies to hyperformer, not {v}")));
            }
            if a.no_adapters {
                return Err(invalid("no-task-projector together with no-adapters leaves nothing to condition"));
            }
            if self.task_feature_dim != self.task_dim {
                return Err(invalid(format!(
                    "no-task-projector needs task_feature_dim == task_dim ({} != {})",
                    self.task_feature_dim, self.task_dim
                )));
            }
        }
        Ok(())
    }
}

// ── training configuration ──────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err("expected adam or sgd".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Task-sampling temperature.
    pub temperature: f64,
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
    pub subsample: Option<usize>,
    /// Denoising steps that produce the frozen base model (0 keeps random init).
    pub pretrain_steps: usize,
    pub pretrain_learning_rate: f64,
    /// Per-position corruption probability during pretraining (mask, delete
    /// or span-to-UNK).
    pub pretrain_mask_prob: f64,
    /// Fine-tuning steps for few-shot transfer.
    pub transfer_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1 << 13,
            batch_size: 16,
            learning_rate: 3e-4,
            temperature: 10.0,
            checkpoint_every: 250,
            optimizer: OptimizerKind::Adam,
            subsample: None,
            pretrain_steps: 4000,
            pretrain_learning_rate: 1e-3,
            pretrain_mask_prob: 0.15,
            transfer_steps: 400,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if self.checkpoint_every == 0 || self.steps < self.checkpoint_every {
            return Err(invalid(format!(
                "need 1 <= checkpoint_every <= steps (got {} and {})",
                self.checkpoint_every, self.steps
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.pretrain_learning_rate > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.pretrain_mask_prob) {
            return Err(invalid("pretrain_mask_prob must lie in [0, 1)"));
        }
        if self.subsample == Some(0) {
            return Err(invalid("subsample must be at least 1"));
        }
        Ok(())
    }
}

// ── data configuration ──────────────────────────────────────────────

#[derive(Clone, Debug, Default, PartialEq)]
struct TaskOverride {
    train_size: Option<usize>,
    valid_size: Option<usize>,
    test_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Task names; each name is also its generator (`copy`, `shift-2`, ...).
    pub tasks: Vec<String>,
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    /// Directory with `train.jsonl`, `valid.jsonl`, `test.jsonl`; replaces the
    /// synthetic generators when set.
    pub data_dir: Option<String>,
    overrides: BTreeMap<String, TaskOverride>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tasks: vec!["copy".into(), "reverse".into(), "shift-1".into()],
            alphabet: 8,
            min_len: 2,
            max_len: 5,
            train_size: 2000,
            valid_size: 100,
            test_size: 200,
            data_dir: None,
            overrides: BTreeMap::new(),
        }
    }
}

/// Stable 64-bit FNV-1a, used to derive per-task data seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl DataConfig {
    /// Resolves the synthetic task specs. Data seeds depend on the run seed
    /// and the task name only.
    pub fn task_specs(&self, seed: u64) -> Result<Vec<TaskSpec>, ConfigError> {
        self.tasks.iter().map(|name| self.task_spec(name, seed)).collect()
    }

    pub fn task_spec(&self, name: &str, seed: u64) -> Result<TaskSpec, ConfigError> {
        let generator: Generator = name.parse().map_err(|e: crate::tasks::TaskError| ConfigError::InvalidValue {
            key: "tasks".into(),
            value: name.into(),
            reason: e.to_string(),
        })?;
        let o = self.overrides.get(name).cloned().unwrap_or_default();
        Ok(TaskSpec {
            name: name.to_string(),
            generator,
            alphabet: self.alphabet,
            min_len: self.min_len,
            max_len: self.max_len,
            train_size: o.train_size.unwrap_or(self.train_size),
            valid_size: o.valid_size.unwrap_or(self.valid_size),
            test_size: o.test_size.unwrap_or(self.test_size),
            seed: seed ^ fnv1a(name.as_bytes()),
        })
    }

    pub fn set_task_size(&mut self, task: &str, split: &str, n: usize) -> Result<(), ConfigError> {
        let o = self.overrides.entry(task.to_string()).or_default();
        match split {
            "train_size" => o.train_size = Some(n),
            "valid_size" => o.valid_size = Some(n),
            "test_size" => o.test_size = Some(n),
            other => return Err(ConfigError::UnknownKey(format!("task.{task}.{other}"))),
        }
        Ok(())
    }
}

// ── run configuration ───────────────────────────────────────────────

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub seed: u64,
}

/// Documented keys, in manifest order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for initialization, data and sampling"),
    ("variant", "full-finetune | adapters | adapters-shared-ln | hyperformer | hyperformer++"),
    ("ablations", "comma list of no-adapters, no-conditional-ln, no-task-projector, freeze-base-ln, use-task-prefixes, or none"),
    ("layers", "blocks per stack"),
    ("hidden", "model width h"),
    ("heads", "attention heads"),
    ("d_ff", "feed-forward inner width"),
    ("vocab", "vocabulary size V"),
    ("max_len", "positional table length"),
    ("bottleneck", "adapter bottleneck d"),
    ("reduction", "alternative to bottleneck: d = hidden / reduction (input only)"),
    ("task_dim", "task embedding width t"),
    ("task_feature_dim", "task feature width t' (hyperformer)"),
    ("projector_hidden", "task projector hidden width e"),
    ("steps", "multi-task optimizer steps"),
    ("batch_size", "examples per step"),
    ("learning_rate", "constant learning rate"),
    ("temperature", "task sampling temperature"),
    ("checkpoint_every", "steps between validation checkpoints"),
    ("optimizer", "adam | sgd"),
    ("subsample", "training examples kept per task, or none"),
    ("pretrain_steps", "denoising steps that produce the frozen base"),
    ("pretrain_learning_rate", "learning rate for base pretraining"),
    ("pretrain_mask_prob", "per-position corruption probability during pretraining"),
    ("transfer_steps", "fine-tuning steps in few-shot transfer"),
    ("tasks", "comma list of tasks: copy, reverse, sort, shift-K, modsum"),
    ("alphabet", "content symbols per synthetic task"),
    ("min_len", "shortest synthetic source"),
    ("max_seq_len", "longest synthetic source"),
    ("train_size", "training examples per task"),
    ("valid_size", "validation examples per task"),
    ("test_size", "test examples per task"),
    ("data_dir", "directory of train/valid/test JSONL files, or none"),
    ("task.<name>.train_size", "per-task override (also valid_size, test_size)"),
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_with<T, E: fmt::Display>(key: &str, value: &str, r: Result<T, E>) -> Result<T, ConfigError> {
    r.map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "variant" => m.variant = parse_with(key, value, value.parse())?,
            "ablations" => m.ablations = parse_with(key, value, value.parse())?,
            "layers" => m.layers = parse_num(key, value)?,
            "hidden" => m.hidden = parse_num(key, value)?,
            "heads" => m.heads = parse_num(key, value)?,
            "d_ff" => m.d_ff = parse_num(key, value)?,
            "vocab" => m.vocab = parse_num(key, value)?,
            "max_len" => m.max_len = parse_num(key, value)?,
            "bottleneck" => m.bottleneck = parse_num(key, value)?,
            "reduction" => {
                let r = parse_num(key, value)?;
                m.set_reduction(r)?;
            }
            "task_dim" => m.task_dim = parse_num(key, value)?,
            "task_feature_dim" => m.task_feature_dim = parse_num(key, value)?,
            "projector_hidden" => m.projector_hidden = parse_num(key, value)?,
            "steps" => t.steps = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "learning_rate" => t.learning_rate = parse_num(key, value)?,
            "temperature" => t.temperature = parse_num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(key, value)?,
            "optimizer" => t.optimizer = parse_with(key, value, value.parse())?,
            "subsample" => {
                t.subsample = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "pretrain_steps" => t.pretrain_steps = parse_num(key, value)?,
            "pretrain_learning_rate" => t.pretrain_learning_rate = parse_num(key, value)?,
            "pretrain_mask_prob" => t.pretrain_mask_prob = parse_num(key, value)?,
            "transfer_steps" => t.transfer_steps = parse_num(key, value)?,
            "tasks" => {
                d.tasks = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "alphabet" => d.alphabet = parse_num(key, value)?,
            "min_len" => d.min_len = parse_num(key, value)?,
            "max_seq_len" => d.max_len = parse_num(key, value)?,
            "train_size" => d.train_size = parse_num(key, value)?,
            "valid_size" => d.valid_size = parse_num(key, value)?,
            "test_size" => d.test_size = parse_num(key, value)?,
            "data_dir" => d.data_dir = (value != "none").then(|| value.to_string()),
            _ => {
                let parts: Vec<&str> = key.splitn(3, '.').collect();
                match parts.as_slice() {
                    ["task", name, field] if !name.is_empty() => {
                        let n = parse_num(key, value)?;
                        d.set_task_size(name, field, n)?;
                    }
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment) on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: assignment.to_string(),
        })?;
        self.set(k.trim(), v)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.tasks.is_empty() && self.data.data_dir.is_none() {
            return Err(invalid("at least one task is required"));
        }
        if self.data.data_dir.is_none() {
            for spec in self.data.task_specs(self.seed)? {
                spec.validate(self.model.vocab)
                    .map_err(|e| invalid(e.to_string()))?;
            }
            let prefix_room = if self.model.ablations.use_task_prefixes {
                self.data.tasks.len()
            } else {
                0
            };
            if crate::tasks::FIRST_CONTENT + self.data.alphabet + prefix_room > self.model.vocab {
                return Err(invalid(format!(
                    "vocab {} cannot hold {} symbols plus {} task prefixes",
                    self.model.vocab, self.data.alphabet, prefix_room
                )));
            }
            // Sources carry END and optionally a task prefix.
            let extra = 1 + self.model.ablations.use_task_prefixes as usize;
            if self.data.max_len + extra > self.model.max_len {
                return Err(invalid(format!(
                    "max_len {} must exceed the longest sequence ({}) by at least {extra}",
                    self.model.max_len, self.data.max_len
                )));
            }
        }
        Ok(())
    }

    /// Fully resolved assignments in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("variant".into(), m.variant.to_string()),
            ("ablations".into(), m.ablations.to_string()),
            ("layers".into(), m.layers.to_string()),
            ("hidden".into(), m.hidden.to_string()),
            ("heads".into(), m.heads.to_string()),
            ("d_ff".into(), m.d_ff.to_string()),
            ("vocab".into(), m.vocab.to_string()),
            ("max_len".into(), m.max_len.to_string()),
            ("bottleneck".into(), m.bottleneck.to_string()),
            ("task_dim".into(), m.task_dim.to_string()),
            ("task_feature_dim".into(), m.task_feature_dim.to_string()),
            ("projector_hidden".into(), m.projector_hidden.to_string()),
            ("steps".into(), t.steps.to_string()),
            ("batch_size".into(), t.batch_size.to_string()),
            ("learning_rate".into(), t.learning_rate.to_string()),
            ("temperature".into(), t.temperature.to_string()),
            ("checkpoint_every".into(), t.checkpoint_every.to_string()),
            ("optimizer".into(), t.optimizer.to_string()),
            (
                "subsample".into(),
                t.subsample.map_or("none".into(), |n| n.to_string()),
            ),
            ("pretrain_steps".into(), t.pretrain_steps.to_string()),
            ("pretrain_learning_rate".into(), t.pretrain_learning_rate.to_string()),
            ("pretrain_mask_prob".into(), t.pretrain_mask_prob.to_string()),
            ("transfer_steps".into(), t.transfer_steps.to_string()),
            ("tasks".into(), d.tasks.join(",")),
            ("alphabet".into(), d.alphabet.to_string()),
            ("min_len".into(), d.min_len.to_string()),
            ("max_seq_len".into(), d.max_len.to_string()),
            ("train_size".into(), d.train_size.to_string()),
            ("valid_size".into(), d.valid_size.to_string()),
            ("test_size".into(), d.test_size.to_string()),
            ("data_dir".into(), d.data_dir.clone().unwrap_or_else(|| "none".into())),
        ];
        for (name, o) in &d.overrides {
            for (field, v) in [
                ("train_size", o.train_size),
                ("valid_size", o.valid_size),
                ("test_size", o.test_size),
            ] {
                if let Some(v) = v {
                    out.push((format!("task.{name}.{field}"), v.to_string()));
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("variant = hyperformer\nsteps = 500 # short\ntask.copy.train_size = 4000\nablations = no-task-projector,freeze-base-ln")
            .unwrap();
        c.validate().unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.data.task_spec("copy", 0).unwrap().train_size, 4000);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("hiden = 8").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("hiden".into()));
        assert!(err.to_string().contains("hiden"));
    }

    #[test]
    fn contradictory_ablations_rejected() {
        let mut m = ModelConfig {
            variant: Variant::Adapters,
            ablations: Ablations::single("no-adapters").unwrap(),
            ..ModelConfig::default()
        };
        assert!(m.validate().is_err());
        m.variant = Variant::HyperFormerPP;
        m.validate().unwrap();
        m.ablations = Ablations::single("no-task-projector").unwrap();
        assert!(m.validate().is_err());
        m.variant = Variant::HyperFormer;
        m.validate().unwrap();
        m.task_feature_dim = 32;
        assert!(m.validate().is_err());
    }

    #[test]
    fn reduction_factor() {
        let mut m = ModelConfig::default();
        m.set_reduction(8).unwrap();
        assert_eq!(m.bottleneck * 8, m.hidden);
        assert!(m.set_reduction(7).is_err());
    }

    #[test]
    fn dims_and_train_invariants() {
        let m = ModelConfig {
            hidden: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(m.validate().is_err());
        let t = TrainConfig {
            steps: 10,
            checkpoint_every: 20,
            ..TrainConfig::default()
        };
        assert!(t.validate().is_err());
        let t = TrainConfig {
            temperature: 0.0,
            ..TrainConfig::default()
        };
        assert!(t.validate().is_err());
    }
}
