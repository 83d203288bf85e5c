//! Synthetic sequence-to-sequence tasks, JSONL ingestion and the task
//! registry used by the training harness.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const PAD: usize = 0;
pub const END: usize = 1;
pub const UNK: usize = 2;
pub const FIRST_CONTENT: usize = 3;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown generator `{0}` (expected copy, reverse, sort, shift-K or modsum)")]
    UnknownGenerator(String),
    #[error("task `{task}`: alphabet of {alphabet} symbols needs vocabulary >= {needed}, have {vocab}")]
    AlphabetTooLarge {
        task: String,
        alphabet: usize,
        needed: usize,
        vocab: usize,
    },
    #[error("task `{task}`: {reason}")]
    InvalidSpec { task: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("registry has no task with training data")]
    Empty,
}

// ── generators ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    Copy,
    Reverse,
    SortTokens,
    /// Monoalphabetic substitution `s -> (s + k) mod alphabet`.
    Shift(usize),
    /// Single-token target: sum of the source symbols mod alphabet.
    ModularSum,
}

impl Generator {
    /// Applies the transformation to symbols in `0..alphabet`.
    pub fn apply(&self, source: &[usize], alphabet: usize) -> Vec<usize> {
        match *self {
            Generator::Copy => source.to_vec(),
            Generator::Reverse => source.iter().rev().copied().collect(),
            Generator::SortTokens => {
                let mut s = source.to_vec();
                s.sort_unstable();
                s
            }
            Generator::Shift(k) => source.iter().map(|s| (s + k) % alphabet).collect(),
            Generator::ModularSum => vec![source.iter().sum::<usize>() % alphabet],
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::Copy => write!(f, "copy"),
            Generator::Reverse => write!(f, "reverse"),
            Generator::SortTokens => write!(f, "sort"),
            Generator::Shift(k) => write!(f, "shift-{k}"),
            Generator::ModularSum => write!(f, "modsum"),
        }
    }
}

impl FromStr for Generator {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(Generator::Copy),
            "reverse" => Ok(Generator::Reverse),
            "sort" | "sort-tokens" => Ok(Generator::SortTokens),
            "modsum" | "modular-sum" => Ok(Generator::ModularSum),
            _ => s
                .strip_prefix("shift-")
                .and_then(|k| k.parse().ok())
                .map(Generator::Shift)
                .ok_or_else(|| TaskError::UnknownGenerator(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub generator: Generator,
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(generator: Generator, alphabet: usize, seed: u64) -> Self {
        Self {
            name: generator.to_string(),
            generator,
            alphabet,
            min_len: 2,
            max_len: 5,
            train_size: 2000,
            valid_size: 100,
            test_size: 200,
            seed,
        }
    }

    fn invalid(&self, reason: &str) -> TaskError {
        TaskError::InvalidSpec {
            task: self.name.clone(),
            reason: reason.to_string(),
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<(), TaskError> {
        if self.alphabet == 0 {
            return Err(self.invalid("alphabet must be positive"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(self.invalid("length range must satisfy 1 <= min_len <= max_len"));
        }
        if FIRST_CONTENT + self.alphabet > vocab {
            return Err(TaskError::AlphabetTooLarge {
                task: self.name.clone(),
                alphabet: self.alphabet,
                needed: FIRST_CONTENT + self.alphabet,
                vocab,
            });
        }
        Ok(())
    }

    /// Number of distinct source sequences, saturating.
    pub fn sequence_space(&self) -> u128 {
        (self.min_len..=self.max_len)
            .map(|l| (self.alphabet as u128).saturating_pow(l as u32))
            .fold(0u128, |a, b| a.saturating_add(b))
    }

    /// Longest target this task can produce.
    pub fn max_target_len(&self) -> usize {
        match self.generator {
            Generator::ModularSum => 1,
            _ => self.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub task: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Generates the three splits of a synthetic task.
///
/// Splits are drawn from separate random streams (test, validation, then
/// train). When the sequence space is at least twice the requested number of
/// examples, a source already used by an earlier split is redrawn.
pub fn generate(spec: &TaskSpec, vocab: usize) -> Result<Splits, TaskError> {
    spec.validate(vocab)?;
    let total = (spec.train_size + spec.valid_size + spec.test_size) as u128;
    let enforce_disjoint = spec.sequence_space() >= 2 * total;
    if !enforce_disjoint {
        log::info!(
            "task {}: sequence space {} too small for disjoint splits of {} examples",
            spec.name,
            spec.sequence_space(),
            total
        );
    }
    let mut used: HashSet<Vec<usize>> = HashSet::new();
    let draw = |stream: u64, n: usize, used: &mut HashSet<Vec<usize>>| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let mut out = Vec::with_capacity(n);
        let mut mine = Vec::with_capacity(n);
        while out.len() < n {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.alphabet)).collect();
            if enforce_disjoint && used.contains(&symbols) {
                continue;
            }
            let target = spec.generator.apply(&symbols, spec.alphabet);
            mine.push(symbols.clone());
            out.push(Example {
                source: symbols.iter().map(|s| s + FIRST_CONTENT).collect(),
                target: target.iter().map(|s| s + FIRST_CONTENT).collect(),
                task: spec.name.clone(),
            });
        }
        used.extend(mine);
        out
    };
    let test = draw(3, spec.test_size, &mut used);
    let valid = draw(2, spec.valid_size, &mut used);
    let train = draw(1, spec.train_size, &mut used);
    Ok(Splits { train, valid, test })
}

// ── JSONL ───────────────────────────────────────────────────────────

/// Token vocabulary with the fixed special ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in ["<pad>", "</s>", "<unk>"] {
            v.insert(s);
        }
        v
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn encode(&mut self, text: &str, grow: bool) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| match self.index.get(t) {
                Some(&id) => id,
                None if grow => self.insert(t),
                None => UNK,
            })
            .collect()
    }
}

/// Reads `{"task", "input", "target"}` objects, one per line. New tokens
/// extend `vocab` in first-seen order when `grow` is set; otherwise they map
/// to [`UNK`].
pub fn ingest_jsonl(path: &Path, vocab: &mut Vocabulary, grow: bool) -> Result<Vec<Example>, TaskError> {
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| TaskError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| TaskError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| TaskError::Malformed {
            path: shown.clone(),
            line: lineno,
            reason,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
        let field = |name: &str| {
            value
                .get(name)
                .and_then(|v| v.as_str())
                .ok_or_else(|| malformed(format!("missing string field `{name}`")))
        };
        let task = field("task")?.to_string();
        let input = field("input")?;
        let target = field("target")?;
        let source = vocab.encode(input, grow);
        let target = vocab.encode(target, grow);
        if source.is_empty() || target.is_empty() {
            return Err(malformed("input and target must be non-empty".into()));
        }
        out.push(Example { source, target, task });
    }
    Ok(out)
}

/// Writes examples as JSONL, rendering ids through `render`.
pub fn write_jsonl<W: Write>(
    examples: &[Example],
    render: impl Fn(usize) -> String,
    mut out: W,
) -> std::io::Result<()> {
    for ex in examples {
        let join = |ids: &[usize]| ids.iter().map(|&i| render(i)).collect::<Vec<_>>().join(" ");
        let obj = serde_json::json!({
            "task": ex.task,
            "input": join(&ex.source),
            "target": join(&ex.target),
        });
        writeln!(out, "{obj}")?;
    }
    Ok(())
}

/// Renders a synthetic-task id: content symbols as their index, specials by name.
pub fn render_synthetic(id: usize) -> String {
    match id {
        PAD => "<pad>".into(),
        END => "</s>".into(),
        UNK => "<unk>".into(),
        c => (c - FIRST_CONTENT).to_string(),
    }
}

// ── registry ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TaskData {
    pub name: String,
    pub spec: Option<TaskSpec>,
    pub splits: Splits,
}

/// Ordered set of tasks; a task's id is its index.
#[derive(Clone, Debug, Default)]
pub struct TaskRegistry {
    tasks: Vec<TaskData>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: &[TaskSpec], vocab: usize) -> Result<Self, TaskError> {
        let mut reg = Self::new();
        for spec in specs {
            reg.push(TaskData {
                name: spec.name.clone(),
                spec: Some(spec.clone()),
                splits: generate(spec, vocab)?,
            });
        }
        Ok(reg)
    }

    /// Groups ingested examples by task name (first-seen order).
    pub fn from_examples(train: Vec<Example>, valid: Vec<Example>, test: Vec<Example>) -> Self {
        let mut reg = Self::new();
        for (split, exs) in [(Split::Train, train), (Split::Valid, valid), (Split::Test, test)] {
            for ex in exs {
                let id = match reg.id_of(&ex.task) {
                    Some(id) => id,
                    None => {
                        reg.push(TaskData {
                            name: ex.task.clone(),
                            spec: None,
                            splits: Splits::default(),
                        });
                        reg.len() - 1
                    }
                };
                let s = &mut reg.tasks[id].splits;
                match split {
                    Split::Train => s.train.push(ex),
                    Split::Valid => s.valid.push(ex),
                    Split::Test => s.test.push(ex),
                }
            }
        }
        reg
    }

    pub fn push(&mut self, task: TaskData) {
        self.tasks.push(task);
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn task(&self, id: usize) -> &TaskData {
        &self.tasks[id]
    }

    pub fn task_mut(&mut self, id: usize) -> &mut TaskData {
        &mut self.tasks[id]
    }

    pub fn names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.splits.train.len()).collect()
    }

    /// Size-proportional probabilities `p_τ = N_τ / Σ N`.
    pub fn size_proportions(&self) -> Vec<f64> {
        let sizes = self.train_sizes();
        let total: usize = sizes.iter().sum();
        sizes.iter().map(|&n| n as f64 / total as f64).collect()
    }

    /// Longest source and target over all splits.
    pub fn max_lengths(&self) -> (usize, usize) {
        let mut src = 0;
        let mut tgt = 0;
        for t in &self.tasks {
            for ex in t.splits.train.iter().chain(&t.splits.valid).chain(&t.splits.test) {
                src = src.max(ex.source.len());
                tgt = tgt.max(ex.target.len());
            }
        }
        (src, tgt)
    }

    /// Without-replacement subsample of every training split; validation and
    /// test are untouched. Requests above the dataset size are clamped.
    pub fn subsample(&self, n: usize, seed: u64) -> Self {
        let mut out = self.clone();
        for (id, task) in out.tasks.iter_mut().enumerate() {
            let train = &mut task.splits.train;
            if n > train.len() {
                log::warn!(
                    "task {}: subsample of {n} exceeds {} training examples, keeping all",
                    task.name,
                    train.len()
                );
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id as u64 + 1);
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(n);
            idx.sort_unstable();
            *train = idx.into_iter().map(|i| train[i].clone()).collect();
        }
        out
    }
}

/// Registry whose training splits have deliberately unequal sizes so that
/// temperature sampling has a visible effect.
pub fn imbalance_profile(specs: &[TaskSpec], sizes: &[usize], vocab: usize) -> Result<TaskRegistry, TaskError> {
    if specs.len() != sizes.len() {
        return Err(TaskError::InvalidSpec {
            task: "<profile>".into(),
            reason: format!("{} specs but {} sizes", specs.len(), sizes.len()),
        });
    }
    let specs: Vec<TaskSpec> = specs
        .iter()
        .zip(sizes)
        .map(|(s, &n)| TaskSpec {
            train_size: n,
            ..s.clone()
        })
        .collect();
    TaskRegistry::from_specs(&specs, vocab)
}
