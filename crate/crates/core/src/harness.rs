//! Multi-task training: freeze policies, temperature sampling, the
//! optimizer, base pretraining, checkpoint selection, evaluation and
//! few-shot transfer.

use std::fmt;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ModelConfig, OptimizerKind, TrainConfig, Variant};
use crate::hyper::WeightCache;
use crate::model::{Batch, BaseWeights, Model, ModelError, Owner, Parameter};
use crate::rundir::RunDir;
use crate::tasks::{Example, Split, TaskData, TaskError, TaskRegistry, FIRST_CONTENT, UNK};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("non-finite value at step {step} on task `{task}`: {detail}")]
    NonFinite {
        step: usize,
        task: String,
        detail: String,
    },
    #[error("no task has training data")]
    EmptyRegistry,
    #[error("{0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        HarnessError::Model(e)
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

// ── freeze policy ───────────────────────────────────────────────────

/// Which parameters an optimizer may update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezePolicy {
    pub trainable: Vec<Owner>,
    /// Restricts training to parameters owned by this task.
    pub only_task: Option<usize>,
}

impl FreezePolicy {
    /// Policy for multi-task training of a variant.
    pub fn for_config(c: &ModelConfig) -> Self {
        let mut trainable = match c.variant {
            Variant::FullFinetune => vec![Owner::BaseTheta, Owner::BaseLayerNorm],
            Variant::Adapters | Variant::AdaptersSharedLn => vec![Owner::BaseLayerNorm, Owner::Adapter],
            Variant::HyperFormer | Variant::HyperFormerPP => {
                vec![Owner::BaseLayerNorm, Owner::Hyper, Owner::TaskFeature, Owner::Adapter]
            }
        };
        if c.ablations.freeze_base_ln {
            trainable.retain(|o| *o != Owner::BaseLayerNorm);
        }
        Self {
            trainable,
            only_task: None,
        }
    }

    /// Policy for few-shot fine-tuning on `target`: hypernetworks and task
    /// embeddings for hypernetwork variants, the target's own adapters for
    /// adapter variants.
    pub fn transfer(c: &ModelConfig, target: usize) -> Self {
        match c.variant {
            Variant::HyperFormer | Variant::HyperFormerPP => Self {
                trainable: vec![Owner::Hyper, Owner::TaskFeature, Owner::Adapter],
                only_task: None,
            },
            Variant::Adapters | Variant::AdaptersSharedLn => Self {
                trainable: vec![Owner::Adapter, Owner::BaseLayerNorm],
                only_task: Some(target),
            },
            Variant::FullFinetune => Self::for_config(c),
        }
    }

    pub fn allows(&self, p: &Parameter) -> bool {
        self.trainable.contains(&p.owner)
            && match self.only_task {
                Some(t) => p.task == Some(t),
                None => true,
            }
    }

    pub fn apply(&self, model: &mut Model) {
        let flags: Vec<bool> = model.params().iter().map(|p| self.allows(p)).collect();
        for (i, f) in flags.into_iter().enumerate() {
            model.set_trainable(i, f);
        }
    }
}

// ── task sampling ───────────────────────────────────────────────────

/// `q_τ ∝ p_τ^{1/T}` with `p_τ = N_τ / Σ N`.
pub fn sampling_probabilities(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(HarnessError::Invalid("temperature must be positive".into()));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(HarnessError::EmptyRegistry);
    }
    let w: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            if n == 0 {
                0.0
            } else {
                ((n as f64 / total as f64).ln() / temperature).exp()
            }
        })
        .collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

#[derive(Clone, Debug)]
pub struct TaskSampler {
    probs: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl TaskSampler {
    pub fn new(sizes: &[usize], temperature: f64) -> Result<Self> {
        let probs = sampling_probabilities(sizes, temperature)?;
        let dist = WeightedIndex::new(&probs).map_err(|e| HarnessError::Invalid(e.to_string()))?;
        Ok(Self { probs, dist })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }
}

/// Draws one task id from the registry's temperature-scaled distribution.
pub fn sample_task<R: Rng + ?Sized>(registry: &TaskRegistry, temperature: f64, rng: &mut R) -> Result<usize> {
    Ok(TaskSampler::new(&registry.train_sizes(), temperature)?.sample(rng))
}

// ── optimizer ───────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer with a constant learning rate. Only trainable
/// parameters that received a gradient are touched.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Option<Vec<f64>>]) {
        self.t += 1;
        let n = model.params().len();
        if self.m.len() < n {
            self.m.resize(n, Vec::new());
            self.v.resize(n, Vec::new());
        }
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            if !p.trainable {
                continue;
            }
            let data = p.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in data.iter_mut().zip(g) {
                        *w -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    if m.is_empty() {
                        m.resize(data.len(), 0.0);
                        v.resize(data.len(), 0.0);
                    }
                    for k in 0..data.len() {
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                        let mh = m[k] / bc1;
                        let vh = v[k] / bc2;
                        data[k] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        model.bump_version();
    }
}

/// One optimizer step on one batch; returns the batch loss.
pub fn train_step(model: &mut Model, opt: &mut Optimizer, batch: &Batch, task: usize, step: usize) -> Result<f64> {
    let nonfinite = |detail: String| HarnessError::NonFinite {
        step,
        task: model.task_names()[task].clone(),
        detail,
    };
    let lg = match model.loss_and_grads(batch, task) {
        Ok(lg) => lg,
        Err(ModelError::Tensor(e @ TensorError::NonFinite { .. })) => return Err(nonfinite(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    if !lg.loss.is_finite() {
        return Err(nonfinite(format!("loss = {}", lg.loss)));
    }
    opt.step(model, &lg.grads);
    Ok(lg.loss)
}

// ── batching ────────────────────────────────────────────────────────

/// Endless shuffled pass over a dataset; reshuffles when exhausted.
#[derive(Clone, Debug)]
pub struct Cycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycle {
    pub fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_indices(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

const STREAM_SAMPLER: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_SHOTS: u64 = 3;
const STREAM_FEW_SHOT_BATCHES: u64 = 4;
const STREAM_BATCHES: u64 = 1000;

// ── evaluation ──────────────────────────────────────────────────────

/// Fraction of predictions equal to target followed by END. Predictions
/// without END never match.
pub fn exact_match(predictions: &[Vec<usize>], targets: &[&[usize]]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| p.last() == Some(&crate::tasks::END) && &p[..p.len() - 1] == **t)
        .count();
    hits as f64 / targets.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub exact_match: f64,
    pub loss: f64,
}

const EVAL_CHUNK: usize = 100;

/// Greedy-decoding exact match and teacher-forced loss on `examples`.
pub fn evaluate_examples(model: &Model, task: usize, examples: &[Example], cache: &mut WeightCache) -> Result<EvalResult> {
    if examples.is_empty() {
        return Ok(EvalResult {
            exact_match: 0.0,
            loss: f64::NAN,
        });
    }
    let mut hits = 0.0;
    let mut loss = 0.0;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let sources: Vec<&[usize]> = chunk.iter().map(|e| e.source.as_slice()).collect();
        let targets: Vec<&[usize]> = chunk.iter().map(|e| e.target.as_slice()).collect();
        let max_steps = targets.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
        let pred = model.decode_greedy(&sources, task, max_steps, Some(cache))?;
        hits += exact_match(&pred, &targets) * chunk.len() as f64;
        let batch = Batch::from_examples(model, &refs, task)?;
        loss += model.loss(&batch, task, Some(cache))? * chunk.len() as f64;
    }
    let n = examples.len() as f64;
    Ok(EvalResult {
        exact_match: hits / n,
        loss: loss / n,
    })
}

/// Exact match of the registry task `task` (matched by name) on a split.
pub fn evaluate(model: &Model, registry: &TaskRegistry, task: usize, split: Split) -> Result<f64> {
    let data = registry.task(task);
    let id = model
        .task_id(&data.name)
        .ok_or_else(|| HarnessError::Invalid(format!("model has no task `{}`", data.name)))?;
    let mut cache = WeightCache::new();
    Ok(evaluate_examples(model, id, data.splits.get(split), &mut cache)?.exact_match)
}

// ── checkpoint selection ────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointScore {
    pub step: usize,
    pub per_task: Vec<f64>,
    pub average: f64,
}

impl CheckpointScore {
    pub fn new(step: usize, per_task: Vec<f64>) -> Self {
        let average = per_task.iter().sum::<f64>() / per_task.len().max(1) as f64;
        Self {
            step,
            per_task,
            average,
        }
    }
}

/// Index of the highest average; the earliest step wins ties.
pub fn select_best(history: &[CheckpointScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in history.iter().enumerate() {
        match best {
            Some(b) if history[b].average > s.average || (history[b].average == s.average && history[b].step <= s.step) => {}
            _ => best = Some(i),
        }
    }
    best
}

// ── training ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<CheckpointScore>,
    /// Index into `history` of the selected checkpoint.
    pub best: usize,
    /// Loss on a fixed probe batch per task before and after training.
    pub probe_loss_before: Vec<f64>,
    pub probe_loss_after: Vec<f64>,
    pub final_step: usize,
}

impl TrainReport {
    pub fn best_score(&self) -> &CheckpointScore {
        &self.history[self.best]
    }
}

fn model_task_ids(model: &Model, registry: &TaskRegistry) -> Result<Vec<usize>> {
    registry
        .tasks()
        .iter()
        .map(|t| {
            model
                .task_id(&t.name)
                .ok_or_else(|| HarnessError::Invalid(format!("model has no task `{}`", t.name)))
        })
        .collect()
}

fn probe_losses(model: &Model, registry: &TaskRegistry, ids: &[usize], n: usize) -> Result<Vec<f64>> {
    registry
        .tasks()
        .iter()
        .zip(ids)
        .map(|(t, &id)| {
            let ex: Vec<&Example> = t.splits.train.iter().take(n).collect();
            let b = Batch::from_examples(model, &ex, id)?;
            Ok(model.loss(&b, id, None)?)
        })
        .collect()
}

/// Multi-task training. Each step samples one task, draws a batch from it
/// and updates the trainable parameters. Every `checkpoint_every` steps all
/// tasks are scored on validation. On return the model holds the parameters
/// of the best checkpoint.
pub fn train(
    model: &mut Model,
    registry: &TaskRegistry,
    cfg: &TrainConfig,
    seed: u64,
    mut out: Option<&mut RunDir>,
) -> Result<TrainReport> {
    cfg.validate().map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let ids = model_task_ids(model, registry)?;
    let sampler = TaskSampler::new(&registry.train_sizes(), cfg.temperature)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SAMPLER);
    let mut cycles: Vec<Cycle> = registry
        .tasks()
        .iter()
        .enumerate()
        .map(|(k, t)| Cycle::new(t.splits.train.len(), seed, STREAM_BATCHES + k as u64))
        .collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let probe_loss_before = probe_losses(model, registry, &ids, cfg.batch_size)?;

    let mut history = Vec::new();
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut window = vec![(0.0, 0usize); registry.len()];
    for step in 1..=cfg.steps {
        let k = sampler.sample(&mut rng);
        let task = registry.task(k);
        let idx = cycles[k].next_indices(cfg.batch_size);
        let ex: Vec<&Example> = idx.iter().map(|&i| &task.splits.train[i]).collect();
        let batch = Batch::from_examples(model, &ex, ids[k])?;
        let loss = train_step(model, &mut opt, &batch, ids[k], step)?;
        window[k].0 += loss;
        window[k].1 += 1;

        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let mut cache = WeightCache::new();
            let mut per_task = Vec::with_capacity(registry.len());
            for (k, t) in registry.tasks().iter().enumerate() {
                let r = evaluate_examples(model, ids[k], &t.splits.valid, &mut cache)?;
                per_task.push(r.exact_match);
                if let Some(o) = out.as_deref_mut() {
                    if window[k].1 > 0 {
                        o.log_metric(step, &t.name, "train", None, window[k].0 / window[k].1 as f64)?;
                    }
                    o.log_metric(step, &t.name, "valid", Some(r.exact_match), r.loss)?;
                }
            }
            window.iter_mut().for_each(|w| *w = (0.0, 0));
            let score = CheckpointScore::new(step, per_task);
            log::info!("step {step}: valid average exact match {:.4}", score.average);
            history.push(score);
            let best = select_best(&history).expect("history is nonempty");
            if best == history.len() - 1 {
                best_params = Some(model.params().iter().map(|p| p.tensor.clone()).collect());
            }
            if let Some(o) = out.as_deref_mut() {
                o.save_checkpoint(model, step)?;
                o.mark_best(history[best].step)?;
            }
        }
    }
    let best = select_best(&history).expect("at least one checkpoint");
    if let Some(params) = best_params {
        for (i, t) in params.into_iter().enumerate() {
            model.set_param_at(i, t)?;
        }
    }
    let probe_loss_after = probe_losses(model, registry, &ids, cfg.batch_size)?;
    Ok(TrainReport {
        history,
        best,
        probe_loss_before,
        probe_loss_after,
        final_step: cfg.steps,
    })
}

/// Single-task fine-tuning on `examples` for `steps` steps.
pub fn fit(
    model: &mut Model,
    task: usize,
    examples: &[Example],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(HarnessError::EmptyRegistry);
    }
    let mut cycle = Cycle::new(examples.len(), seed, STREAM_FEW_SHOT_BATCHES);
    let mut opt = Optimizer::adam(lr);
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let ex: Vec<&Example> = cycle.next_indices(batch_size).into_iter().map(|i| &examples[i]).collect();
        let batch = Batch::from_examples(model, &ex, task)?;
        losses.push(train_step(model, &mut opt, &batch, task, step)?);
    }
    Ok(losses)
}

// ── base pretraining ────────────────────────────────────────────────

/// Content-token source for pretraining.
#[derive(Clone, Debug)]
pub struct PretrainData {
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
}

/// Trains a plain encoder-decoder as a denoising autoencoder: random
/// content sequences corrupted by masking, deletion and span infilling at
/// `pretrain_mask_prob`, reconstructed in full. The result is the frozen base of later runs.
pub fn pretrain_base(config: &ModelConfig, data: &PretrainData, cfg: &TrainConfig, seed: u64) -> Result<BaseWeights> {
    let plain = ModelConfig {
        variant: Variant::FullFinetune,
        ablations: Default::default(),
        ..config.clone()
    };
    let mut model = Model::build(&plain, &["denoise".to_string()], seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_PRETRAIN);
    let mut opt = Optimizer::adam(cfg.pretrain_learning_rate);
    for step in 1..=cfg.pretrain_steps {
        let mut sources = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let len = rng.gen_range(data.min_len..=data.max_len);
            let seq: Vec<usize> = (0..len).map(|_| FIRST_CONTENT + rng.gen_range(0..data.alphabet)).collect();
            let noisy = corrupt(&seq, cfg.pretrain_mask_prob, &mut rng);
            sources.push(noisy);
            targets.push(seq);
        }
        let s: Vec<&[usize]> = sources.iter().map(Vec::as_slice).collect();
        let t: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        let batch = Batch::new(&s, &t, None)?;
        let loss = train_step(&mut model, &mut opt, &batch, 0, step)?;
        if step % 500 == 0 {
            log::info!("pretrain step {step}: loss {loss:.4}");
        }
    }
    Ok(model.base_weights())
}

/// Noises a sequence for denoising pretraining. Each position starts a
/// corruption with probability `p`, split evenly between masking the token,
/// deleting it, and replacing a two-token span by a single UNK. The result
/// is never empty.
fn corrupt<R: Rng + ?Sized>(seq: &[usize], p: f64, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        let r = rng.gen::<f64>();
        if r < p / 3.0 {
            out.push(UNK);
            i += 1;
        } else if r < 2.0 * p / 3.0 {
            i += 1;
        } else if r < p {
            out.push(UNK);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        out.push(UNK);
    }
    out
}

// ── transfer ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferMode {
    /// Copy the source task feature `z`.
    TaskEmbedding,
    /// Copy the source task's adapter parameters.
    AdapterWeights,
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferMode::TaskEmbedding => "task-embedding",
            TransferMode::AdapterWeights => "adapter-weights",
        })
    }
}

impl TransferMode {
    pub fn for_variant(v: Variant) -> Option<Self> {
        if v.is_hyper() {
            Some(TransferMode::TaskEmbedding)
        } else if v.is_adapter_baseline() {
            Some(TransferMode::AdapterWeights)
        } else {
            None
        }
    }
}

/// Initializes `target` from `source` and switches to the transfer freeze
/// policy.
pub fn transfer_init(model: &mut Model, source: usize, target: usize, mode: TransferMode) -> Result<()> {
    model.check_task(source)?;
    model.check_task(target)?;
    let cfg = model.config().clone();
    let ok = match mode {
        TransferMode::TaskEmbedding => cfg.variant.is_hyper() && cfg.adapters_enabled(),
        TransferMode::AdapterWeights => cfg.variant.is_adapter_baseline(),
    };
    if !ok {
        return Err(HarnessError::Invalid(format!(
            "transfer mode {mode} does not apply to variant {}",
            cfg.variant
        )));
    }
    let src_prefix = format!("task.{source}.");
    let copies: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .filter_map(|p| {
            let tail = p.name.strip_prefix(&src_prefix)?;
            let wanted = match mode {
                TransferMode::TaskEmbedding => p.owner == Owner::TaskFeature,
                TransferMode::AdapterWeights => p.owner == Owner::Adapter,
            };
            wanted.then(|| (format!("task.{target}.{tail}"), p.tensor.clone()))
        })
        .collect();
    for (name, t) in copies {
        model.set_param(&name, t)?;
    }
    FreezePolicy::transfer(&cfg, target).apply(model);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    /// Target initialized from the most similar training task.
    SourceInit,
    /// Target keeps its fresh random initialization.
    RandomInit,
}

impl Arm {
    pub fn label(self, variant: Variant) -> &'static str {
        match (self, variant.is_hyper()) {
            (Arm::SourceInit, true) => "embedding-init",
            (Arm::SourceInit, false) => "adapter-init",
            (Arm::RandomInit, _) => "random-init",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FewShotConfig {
    pub shots: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// `shots` examples drawn without replacement from the target's training
/// split; depends on the seed only.
pub fn draw_shots(target: &TaskData, shots: usize, seed: u64) -> Result<Vec<Example>> {
    let train = &target.splits.train;
    if shots == 0 || shots > train.len() {
        return Err(HarnessError::Invalid(format!(
            "cannot draw {shots} shots from {} training examples",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SHOTS);
    Ok(train.choose_multiple(&mut rng, shots).cloned().collect())
}

/// Registers `target` on a copy of `trained`, initializes it per `arm`,
/// fine-tunes on the shots and returns test exact match.
pub fn few_shot(trained: &Model, source: &str, target: &TaskData, arm: Arm, cfg: &FewShotConfig) -> Result<f64> {
    let mut model = trained.clone();
    let src = model
        .task_id(source)
        .ok_or_else(|| HarnessError::Invalid(format!("unknown source task `{source}`")))?;
    let tgt = model.register_task(&target.name)?;
    let variant = model.config().variant;
    let mode = TransferMode::for_variant(variant)
        .ok_or_else(|| HarnessError::Invalid(format!("variant {variant} has no transfer mode")))?;
    match arm {
        Arm::SourceInit => transfer_init(&mut model, src, tgt, mode)?,
        Arm::RandomInit => FreezePolicy::transfer(model.config(), tgt).apply(&mut model),
    }
    let shots = draw_shots(target, cfg.shots, cfg.seed)?;
    fit(&mut model, tgt, &shots, cfg.steps, cfg.batch_size, cfg.learning_rate, cfg.seed)?;
    let mut cache = WeightCache::new();
    Ok(evaluate_examples(&model, tgt, &target.splits.test, &mut cache)?.exact_match)
}

/// One few-shot run.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferRecord {
    pub shots: usize,
    pub arm: String,
    pub seed: u64,
    pub exact_match: f64,
}

/// Mean and standard deviation over seeds for one (shots, arm).
#[derive(Clone, Debug, PartialEq)]
pub struct TransferSummary {
    pub shots: usize,
    pub arm: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Runs both arms for every (shots, seed) pair on up to `jobs` threads.
/// Each job owns its model copy; records come back in job order.
pub fn transfer_sweep(
    trained: &Model,
    source: &str,
    target: &TaskData,
    shots: &[usize],
    seeds: &[u64],
    template: &FewShotConfig,
    jobs: usize,
) -> Result<Vec<TransferRecord>> {
    let variant = trained.config().variant;
    let mut plan = Vec::new();
    for &n in shots {
        for arm in [Arm::SourceInit, Arm::RandomInit] {
            for &seed in seeds {
                plan.push((n, arm, seed));
            }
        }
    }
    let run = |&(n, arm, seed): &(usize, Arm, u64)| -> Result<TransferRecord> {
        let cfg = FewShotConfig {
            shots: n,
            batch_size: template.batch_size.min(n),
            seed,
            ..template.clone()
        };
        let exact_match = few_shot(trained, source, target, arm, &cfg)?;
        log::info!("shots {n} {} seed {seed}: exact match {exact_match:.4}", arm.label(variant));
        Ok(TransferRecord {
            shots: n,
            arm: arm.label(variant).to_string(),
            seed,
            exact_match,
        })
    };
    let jobs = jobs.clamp(1, plan.len().max(1));
    if jobs == 1 {
        return plan.iter().map(run).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<TransferRecord>>> = (0..plan.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let workers: Vec<_> = (0..jobs)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= plan.len() {
                            break done;
                        }
                        done.push((i, run(&plan[i])));
                    }
                })
            })
            .collect();
        for w in workers {
            for (i, r) in w.join().expect("transfer worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Aggregates records per (shots, arm) in first-seen order.
pub fn summarize(records: &[TransferRecord]) -> Vec<TransferSummary> {
    let mut keys: Vec<(usize, String)> = Vec::new();
    for r in records {
        let k = (r.shots, r.arm.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(shots, arm)| {
            let xs: Vec<f64> = records
                .iter()
                .filter(|r| r.shots == shots && r.arm == arm)
                .map(|r| r.exact_match)
                .collect();
            let (mean, std) = mean_std(&xs);
            TransferSummary {
                shots,
                arm,
                mean,
                std,
                runs: xs.len(),
            }
        })
        .collect()
}

pub const TRANSFER_HEADER: &str = "shots,arm,seed,exact_match";

/// Per-seed rows followed by `mean` and `std` aggregate rows in the seed
/// column.
pub fn transfer_csv(records: &[TransferRecord]) -> String {
    let mut out = format!("{TRANSFER_HEADER}\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.shots, r.arm, r.seed, r.exact_match));
    }
    for s in summarize(records) {
        out.push_str(&format!("{},{},mean,{}\n", s.shots, s.arm, s.mean));
        out.push_str(&format!("{},{},std,{}\n", s.shots, s.arm, s.std));
    }
    out
}

/// Target and shot count per row, one `mean±std` column per arm, in
/// percent.
pub fn transfer_table(target: &str, summaries: &[TransferSummary]) -> String {
    let mut arms: Vec<&str> = Vec::new();
    let mut shots: Vec<usize> = Vec::new();
    for s in summaries {
        if !arms.contains(&s.arm.as_str()) {
            arms.push(&s.arm);
        }
        if !shots.contains(&s.shots) {
            shots.push(s.shots);
        }
    }
    let mut rows = vec![["target".to_string(), "shots".to_string()]
        .into_iter()
        .chain(arms.iter().map(|a| a.to_string()))
        .collect::<Vec<_>>()];
    for &n in &shots {
        let mut row = vec![target.to_string(), n.to_string()];
        for a in &arms {
            let cell = summaries
                .iter()
                .find(|s| s.shots == n && s.arm == *a)
                .map_or("-".to_string(), |s| format!("{:.2}±{:.1}", 100.0 * s.mean, 100.0 * s.std));
            row.push(cell);
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Task data for a run: the synthetic generators, or the JSONL files in
/// `data_dir` (vocabulary grown from `train.jsonl` only). Training splits
/// are subsampled when the run asks for it.
pub fn load_registry(run: &crate::config::RunConfig) -> Result<TaskRegistry> {
    let registry = match &run.data.data_dir {
        None => {
            let specs = run.data.task_specs(run.seed).map_err(|e| HarnessError::Invalid(e.to_string()))?;
            TaskRegistry::from_specs(&specs, run.model.vocab)?
        }
        Some(dir) => {
            let dir = Path::new(dir);
            let mut vocab = crate::tasks::Vocabulary::new();
            let train = crate::tasks::ingest_jsonl(&dir.join("train.jsonl"), &mut vocab, true)?;
            let valid = crate::tasks::ingest_jsonl(&dir.join("valid.jsonl"), &mut vocab, false)?;
            let test = crate::tasks::ingest_jsonl(&dir.join("test.jsonl"), &mut vocab, false)?;
            let registry = TaskRegistry::from_examples(train, valid, test);
            let prefixes = if run.model.ablations.use_task_prefixes { registry.len() } else { 0 };
            if vocab.len() + prefixes > run.model.vocab {
                return Err(HarnessError::Invalid(format!(
                    "data needs {} vocabulary entries plus {prefixes} task prefixes, model has {}",
                    vocab.len(),
                    run.model.vocab
                )));
            }
            registry
        }
    };
    if registry.is_empty() {
        return Err(HarnessError::EmptyRegistry);
    }
    Ok(match run.train.subsample {
        Some(n) => registry.subsample(n, run.seed),
        None => registry,
    })
}

/// Runs `train` with pretraining and a run directory, used by the CLI.
pub fn run_training(
    run: &crate::config::RunConfig,
    registry: &TaskRegistry,
    base: Option<&BaseWeights>,
    out: Option<&Path>,
) -> Result<(Model, TrainReport)> {
    let mut model = crate::model::build_model(&run.model, registry, run.seed)?;
    let pretrained;
    let base = match base {
        Some(b) => b,
        None => {
            let (alphabet, min_len, max_len) = pretrain_shape(run, registry);
            pretrained = pretrain_base(&run.model, &PretrainData { alphabet, min_len, max_len }, &run.train, run.seed)?;
            &pretrained
        }
    };
    model.load_base(base)?;
    let mut dir = match out {
        Some(p) => Some(RunDir::create(p, run)?),
        None => None,
    };
    let report = train(&mut model, registry, &run.train, run.seed, dir.as_mut())?;
    if let Some(d) = dir.as_mut() {
        let mut cache = WeightCache::new();
        let step = report.best_score().step;
        for t in registry.tasks() {
            let id = model.task_id(&t.name).expect("registered");
            let r = evaluate_examples(&model, id, &t.splits.test, &mut cache)?;
            d.log_metric(step, &t.name, "test", Some(r.exact_match), r.loss)?;
        }
        d.flush()?;
    }
    Ok((model, report))
}

/// Alphabet and length range used to pretrain the base for a run.
fn pretrain_shape(run: &crate::config::RunConfig, registry: &TaskRegistry) -> (usize, usize, usize) {
    if run.data.data_dir.is_none() {
        return (run.data.alphabet, run.data.min_len, run.data.max_len);
    }
    let (src, _) = registry.max_lengths();
    let prefix = run.model.ablations.use_task_prefixes as usize;
    let alphabet = run.model.vocab - FIRST_CONTENT - if prefix == 1 { registry.len() } else { 0 };
    (alphabet.max(1), 1, src.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_probabilities() {
        let p = sampling_probabilities(&[100, 900], 1.0).unwrap();
        assert!((p[0] - 0.1).abs() < 1e-15 && (p[1] - 0.9).abs() < 1e-15);
        let p = sampling_probabilities(&[100, 900], 10.0).unwrap();
        let a = 0.1f64.powf(0.1);
        let b = 0.9f64.powf(0.1);
        assert!((p[0] - a / (a + b)).abs() < 1e-15);
        assert!((p[0] - 0.4453).abs() < 5e-5);
        let p = sampling_probabilities(&[7, 7, 7], 3.0).unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!(sampling_probabilities(&[0, 0], 1.0).is_err());
    }

    #[test]
    fn best_checkpoint_ties_go_to_earliest() {
        let h = vec![
            CheckpointScore::new(250, vec![0.5, 0.7]),
            CheckpointScore::new(500, vec![0.7, 0.7]),
            CheckpointScore::new(750, vec![0.8, 0.6]),
        ];
        assert_eq!(select_best(&h), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn exact_match_rules() {
        let t: Vec<&[usize]> = vec![&[4, 5], &[6]];
        assert_eq!(exact_match(&[vec![4, 5, 1], vec![6, 1]], &t), 1.0);
        assert_eq!(exact_match(&[vec![4, 5], vec![]], &t), 0.0);
        assert_eq!(exact_match(&[vec![4, 5, 1], vec![6, 6, 1]], &t), 0.5);
    }

    #[test]
    fn cycle_visits_everything_each_epoch() {
        let mut c = Cycle::new(5, 9, 0);
        let mut a = c.next_indices(5);
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        let mut b = c.next_indices(5);
        b.sort_unstable();
        assert_eq!(b, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
