//! Encoder-decoder transformer with adapter attachment points, a tied
//! frozen output layer and an owner-tagged parameter registry.
//!
//! Every block has two adapter positions: `0` after self-attention and `1`
//! after the feed-forward sub-block. Adapters act on the sub-block output
//! before the block's residual add, so a block computes
//! `x + A(sublayer(LN(x)))` with `A(v) = LN_{γ,β}(GeLU(v·Dᵀ)·Uᵀ) + v`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::config::{fnv1a, ConfigError, ModelConfig, Variant};
use crate::harness::FreezePolicy;
use crate::hyper::{self, AdapterVars, WeightCache};
use crate::tasks::{TaskRegistry, END, PAD};
use crate::tensor::{AttentionSpec, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown task id {0}")]
    UnknownTask(usize),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{name}`: expected shape {expected:?}, got {got:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("token id {id} out of range for vocabulary {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

// ── parameters ──────────────────────────────────────────────────────

/// Which part of the parameter partition a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    /// Pretrained transformer weights θ, including the tied embedding.
    BaseTheta,
    /// Layer norms of the transformer itself.
    BaseLayerNorm,
    /// Hypernetwork parameters ν: projector, heads, shared projector LN.
    Hyper,
    /// Task features z_τ and the layer-id / position embeddings.
    TaskFeature,
    /// Directly parameterized adapters and adapter layer norms.
    Adapter,
}

impl Owner {
    pub const ALL: [Owner; 5] = [
        Owner::BaseTheta,
        Owner::BaseLayerNorm,
        Owner::Hyper,
        Owner::TaskFeature,
        Owner::Adapter,
    ];
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Owner::BaseTheta => "base-theta",
            Owner::BaseLayerNorm => "base-layer-norm",
            Owner::Hyper => "hyper",
            Owner::TaskFeature => "task-feature",
            Owner::Adapter => "adapter",
        })
    }
}

impl FromStr for Owner {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Owner::ALL
            .into_iter()
            .find(|o| o.to_string() == s)
            .ok_or_else(|| format!("unknown owner `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub owner: Owner,
    /// Task that exclusively uses this parameter, if any.
    pub task: Option<usize>,
}

/// Base-model weights by name, as produced by pretraining.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaseWeights {
    pub params: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Normal truncated at ±2σ.
    Truncated(f64),
    Normal(f64),
    Const(f64),
}

struct Decl {
    name: String,
    shape: Vec<usize>,
    owner: Owner,
    task: Option<usize>,
    init: Init,
}

const STACKS: [&str; 2] = ["encoder", "decoder"];
pub const ENCODER: usize = 0;
pub const DECODER: usize = 1;
const BASE_STD: f64 = 0.02;
const HEAD_STD: f64 = 1e-3;

pub fn stack_name(stack: usize) -> &'static str {
    STACKS[stack]
}

fn task_prefix(k: usize) -> String {
    format!("task.{k}.")
}

/// Strips a `task.<k>.` prefix, returning the shared name.
fn base_name(name: &str) -> &str {
    if let Some(rest) = name.strip_prefix("task.") {
        if let Some((k, tail)) = rest.split_once('.') {
            if k.parse::<usize>().is_ok() {
                return tail;
            }
        }
    }
    name
}

fn declarations(c: &ModelConfig, tasks: usize) -> Vec<Decl> {
    let (h, d, t, e) = (c.hidden, c.bottleneck, c.task_dim, c.projector_hidden);
    let v = c.variant;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, owner: Owner, task: Option<usize>, init: Init| {
        out.push(Decl {
            name,
            shape,
            owner,
            task,
            init,
        })
    };
    push("embedding".into(), vec![c.vocab, h], Owner::BaseTheta, None, Init::Truncated(1.0));

    let per_task_ln = v == Variant::Adapters;
    let layer_norm = |push: &mut dyn FnMut(String, Vec<usize>, Owner, Option<usize>, Init), name: String| {
        if per_task_ln {
            for k in 0..tasks {
                push(format!("{}{name}.gamma", task_prefix(k)), vec![h], Owner::BaseLayerNorm, Some(k), Init::Const(1.0));
                push(format!("{}{name}.beta", task_prefix(k)), vec![h], Owner::BaseLayerNorm, Some(k), Init::Const(0.0));
            }
        } else {
            push(format!("{name}.gamma"), vec![h], Owner::BaseLayerNorm, None, Init::Const(1.0));
            push(format!("{name}.beta"), vec![h], Owner::BaseLayerNorm, None, Init::Const(0.0));
        }
    };

    for (s, stack) in STACKS.iter().enumerate() {
        for i in 0..c.layers {
            let p = format!("{stack}.layer.{i}");
            layer_norm(&mut push, format!("{p}.ln_attn"));
            for w in ["q", "k", "v", "o"] {
                push(format!("{p}.self_attn.{w}"), vec![h, h], Owner::BaseTheta, None, Init::Truncated(BASE_STD));
            }
            if s == DECODER {
                layer_norm(&mut push, format!("{p}.ln_cross"));
                for w in ["q", "k", "v", "o"] {
                    push(format!("{p}.cross_attn.{w}"), vec![h, h], Owner::BaseTheta, None, Init::Truncated(BASE_STD));
                }
            }
            layer_norm(&mut push, format!("{p}.ln_ff"));
            push(format!("{p}.ff.w1"), vec![h, c.d_ff], Owner::BaseTheta, None, Init::Truncated(BASE_STD));
            push(format!("{p}.ff.w2"), vec![c.d_ff, h], Owner::BaseTheta, None, Init::Truncated(BASE_STD));
        }
        layer_norm(&mut push, format!("{stack}.final_ln"));
    }

    if !c.adapters_enabled() {
        return out;
    }

    // Adapter weights and adapter layer norms.
    for stack in STACKS {
        for i in 0..c.layers {
            for j in 0..2 {
                let p = format!("{stack}.layer.{i}.adapter.{j}");
                if v.is_adapter_baseline() {
                    for k in 0..tasks {
                        let tp = task_prefix(k);
                        push(format!("{tp}{p}.up"), vec![h, d], Owner::Adapter, Some(k), Init::Truncated(BASE_STD));
                        push(format!("{tp}{p}.down"), vec![d, h], Owner::Adapter, Some(k), Init::Truncated(BASE_STD));
                        if v == Variant::Adapters {
                            push(format!("{tp}{p}.ln.gamma"), vec![h], Owner::Adapter, Some(k), Init::Const(0.0));
                            push(format!("{tp}{p}.ln.beta"), vec![h], Owner::Adapter, Some(k), Init::Const(0.0));
                        }
                    }
                }
                if v == Variant::AdaptersSharedLn || (v.is_hyper() && c.ablations.no_conditional_ln) {
                    push(format!("{p}.ln.gamma"), vec![h], Owner::Adapter, None, Init::Const(0.0));
                    push(format!("{p}.ln.beta"), vec![h], Owner::Adapter, None, Init::Const(0.0));
                }
                if v == Variant::HyperFormer {
                    heads(&mut push, c, &format!("{p}.hyper"));
                }
            }
        }
    }

    if !v.is_hyper() {
        return out;
    }

    // Hypernetwork projectors and structural embeddings.
    for stack in STACKS {
        let p = format!("{stack}.hyper");
        match v {
            Variant::HyperFormer => {
                if !c.ablations.no_task_projector {
                    let tf = c.task_feature_dim;
                    push(format!("{p}.projector.w1"), vec![tf, e], Owner::Hyper, None, Init::Truncated(fan_in(tf)));
                    push(format!("{p}.projector.w2"), vec![e, t], Owner::Hyper, None, Init::Truncated(fan_in(e)));
                }
            }
            Variant::HyperFormerPP => {
                push(format!("{p}.projector.w1"), vec![3 * t, e], Owner::Hyper, None, Init::Truncated(fan_in(3 * t)));
                push(format!("{p}.projector.w2"), vec![e, t], Owner::Hyper, None, Init::Truncated(fan_in(e)));
                push(format!("{p}.projector.ln.gamma"), vec![t], Owner::Hyper, None, Init::Const(1.0));
                push(format!("{p}.projector.ln.beta"), vec![t], Owner::Hyper, None, Init::Const(0.0));
                push(format!("{p}.layer_embedding"), vec![c.layers, t], Owner::TaskFeature, None, Init::Normal(1.0));
                push(format!("{p}.position_embedding"), vec![2, t], Owner::TaskFeature, None, Init::Normal(1.0));
                heads(&mut push, c, &p);
            }
            _ => unreachable!(),
        }
    }
    let zdim = match v {
        Variant::HyperFormer => c.task_feature_dim,
        _ => t,
    };
    for k in 0..tasks {
        push(format!("{}feature", task_prefix(k)), vec![zdim], Owner::TaskFeature, Some(k), Init::Normal(1.0));
    }
    out
}

fn fan_in(n: usize) -> f64 {
    1.0 / (n as f64).sqrt()
}

fn heads(push: &mut dyn FnMut(String, Vec<usize>, Owner, Option<usize>, Init), c: &ModelConfig, p: &str) {
    let (h, d, t) = (c.hidden, c.bottleneck, c.task_dim);
    push(format!("{p}.up"), vec![t, h * d], Owner::Hyper, None, Init::Normal(HEAD_STD));
    push(format!("{p}.down"), vec![t, d * h], Owner::Hyper, None, Init::Normal(HEAD_STD));
    if !c.ablations.no_conditional_ln {
        push(format!("{p}.gamma"), vec![t, h], Owner::Hyper, None, Init::Normal(HEAD_STD));
        push(format!("{p}.beta"), vec![t, h], Owner::Hyper, None, Init::Normal(HEAD_STD));
    }
}

/// Deterministic initial value: depends only on the seed and the name.
fn initial_tensor(decl: &Decl, seed: u64) -> Tensor {
    let n: usize = decl.shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(decl.name.as_bytes()));
    let data = match decl.init {
        Init::Const(c) => vec![c; n],
        Init::Normal(std) => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
        Init::Truncated(std) => (0..n)
            .map(|_| loop {
                let x: f64 = rng.sample(StandardNormal);
                if x.abs() <= 2.0 {
                    break std * x;
                }
            })
            .collect(),
    };
    Tensor::new(decl.shape.clone(), data).expect("declared shape matches data")
}

/// Fixed sinusoidal position table `[len × h]`.
pub fn sinusoidal_positions(len: usize, h: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * h);
    for pos in 0..len {
        for c in 0..h {
            let i2 = (c - c % 2) as f64;
            let angle = pos as f64 * (-(i2) * 10000f64.ln() / h as f64).exp();
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, h], data).expect("position table shape")
}

// ── layout ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ln {
    pub gamma: usize,
    pub beta: usize,
}

/// One shared layer norm or one per task.
#[derive(Clone, Debug)]
pub(crate) struct LnSlot(Vec<Ln>);

impl LnSlot {
    fn get(&self, task: usize) -> Ln {
        if self.0.len() == 1 {
            self.0[0]
        } else {
            self.0[task]
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Heads {
    pub up: usize,
    pub down: usize,
    pub gamma: Option<usize>,
    pub beta: Option<usize>,
}

#[derive(Clone, Debug)]
pub(crate) enum AdapterSlot {
    Direct {
        up: Vec<usize>,
        down: Vec<usize>,
        ln: LnSlot,
    },
    Hyper {
        /// Position-specific heads (HyperFormer); `None` uses the stack's
        /// shared heads.
        heads: Option<Heads>,
        /// Plain adapter layer norm when conditional LN is ablated.
        ln: Option<Ln>,
    },
}

#[derive(Clone, Debug)]
struct BlockLayout {
    ln_attn: LnSlot,
    attn: Attn,
    cross: Option<(LnSlot, Attn)>,
    ln_ff: LnSlot,
    w1: usize,
    w2: usize,
    adapters: Option<[AdapterSlot; 2]>,
}

#[derive(Clone, Debug)]
pub(crate) struct StackHyper {
    pub projector: Option<(usize, usize)>,
    pub projector_ln: Option<Ln>,
    pub layer_embedding: Option<usize>,
    pub position_embedding: Option<usize>,
    pub heads: Option<Heads>,
}

#[derive(Clone, Debug)]
struct StackLayout {
    blocks: Vec<BlockLayout>,
    final_ln: LnSlot,
    hyper: Option<StackHyper>,
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: usize,
    stacks: Vec<StackLayout>,
    features: Vec<usize>,
}

struct Lookup<'a> {
    index: &'a HashMap<String, usize>,
    tasks: usize,
    per_task_ln: bool,
}

impl Lookup<'_> {
    fn get(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
    }

    fn opt(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    fn ln(&self, name: &str) -> Result<Ln> {
        Ok(Ln {
            gamma: self.get(&format!("{name}.gamma"))?,
            beta: self.get(&format!("{name}.beta"))?,
        })
    }

    fn ln_opt(&self, name: &str) -> Option<Ln> {
        self.ln(name).ok()
    }

    fn base_ln(&self, name: &str) -> Result<LnSlot> {
        if self.per_task_ln {
            (0..self.tasks)
                .map(|k| self.ln(&format!("{}{name}", task_prefix(k))))
                .collect::<Result<Vec<_>>>()
                .map(LnSlot)
        } else {
            Ok(LnSlot(vec![self.ln(name)?]))
        }
    }

    fn heads(&self, p: &str) -> Result<Heads> {
        Ok(Heads {
            up: self.get(&format!("{p}.up"))?,
            down: self.get(&format!("{p}.down"))?,
            gamma: self.opt(&format!("{p}.gamma")),
            beta: self.opt(&format!("{p}.beta")),
        })
    }

    fn attn(&self, p: &str) -> Result<Attn> {
        Ok(Attn {
            q: self.get(&format!("{p}.q"))?,
            k: self.get(&format!("{p}.k"))?,
            v: self.get(&format!("{p}.v"))?,
            o: self.get(&format!("{p}.o"))?,
        })
    }
}

impl Layout {
    fn build(c: &ModelConfig, index: &HashMap<String, usize>, tasks: usize) -> Result<Self> {
        let lk = Lookup {
            index,
            tasks,
            per_task_ln: c.variant == Variant::Adapters,
        };
        let v = c.variant;
        let mut stacks = Vec::new();
        for (s, stack) in STACKS.iter().enumerate() {
            let mut blocks = Vec::new();
            for i in 0..c.layers {
                let p = format!("{stack}.layer.{i}");
                let adapters = if c.adapters_enabled() {
                    let slot = |j: usize| -> Result<AdapterSlot> {
                        let ap = format!("{p}.adapter.{j}");
                        if v.is_adapter_baseline() {
                            let up = (0..tasks)
                                .map(|k| lk.get(&format!("{}{ap}.up", task_prefix(k))))
                                .collect::<Result<Vec<_>>>()?;
                            let down = (0..tasks)
                                .map(|k| lk.get(&format!("{}{ap}.down", task_prefix(k))))
                                .collect::<Result<Vec<_>>>()?;
                            let ln = if v == Variant::Adapters {
                                LnSlot(
                                    (0..tasks)
                                        .map(|k| lk.ln(&format!("{}{ap}.ln", task_prefix(k))))
                                        .collect::<Result<Vec<_>>>()?,
                                )
                            } else {
                                LnSlot(vec![lk.ln(&format!("{ap}.ln"))?])
                            };
                            Ok(AdapterSlot::Direct { up, down, ln })
                        } else {
                            let heads = if v == Variant::HyperFormer {
                                Some(lk.heads(&format!("{ap}.hyper"))?)
                            } else {
                                None
                            };
                            Ok(AdapterSlot::Hyper {
                                heads,
                                ln: lk.ln_opt(&format!("{ap}.ln")),
                            })
                        }
                    };
                    Some([slot(0)?, slot(1)?])
                } else {
                    None
                };
                blocks.push(BlockLayout {
                    ln_attn: lk.base_ln(&format!("{p}.ln_attn"))?,
                    attn: lk.attn(&format!("{p}.self_attn"))?,
                    cross: if s == DECODER {
                        Some((lk.base_ln(&format!("{p}.ln_cross"))?, lk.attn(&format!("{p}.cross_attn"))?))
                    } else {
                        None
                    },
                    ln_ff: lk.base_ln(&format!("{p}.ln_ff"))?,
                    w1: lk.get(&format!("{p}.ff.w1"))?,
                    w2: lk.get(&format!("{p}.ff.w2"))?,
                    adapters,
                });
            }
            let hyper = if v.is_hyper() && c.adapters_enabled() {
                let hp = format!("{stack}.hyper");
                let projector = match (lk.opt(&format!("{hp}.projector.w1")), lk.opt(&format!("{hp}.projector.w2"))) {
                    (Some(a), Some(b)) => Some((a, b)),
                    _ => None,
                };
                Some(StackHyper {
                    projector,
                    projector_ln: lk.ln_opt(&format!("{hp}.projector.ln")),
                    layer_embedding: lk.opt(&format!("{hp}.layer_embedding")),
                    position_embedding: lk.opt(&format!("{hp}.position_embedding")),
                    heads: if v == Variant::HyperFormerPP {
                        Some(lk.heads(&hp)?)
                    } else {
                        None
                    },
                })
            } else {
                None
            };
            stacks.push(StackLayout {
                blocks,
                final_ln: lk.base_ln(&format!("{stack}.final_ln"))?,
                hyper,
            });
        }
        let features = if v.is_hyper() && c.adapters_enabled() {
            (0..tasks)
                .map(|k| lk.get(&format!("{}feature", task_prefix(k))))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Layout {
            embedding: lk.get("embedding")?,
            stacks,
            features,
        })
    }
}

// ── model ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    tasks: Vec<String>,
    seed: u64,
    version: u64,
    layout: Layout,
    positions: Tensor,
}

/// Builds a model for the tasks of `registry`.
pub fn build_model(config: &ModelConfig, registry: &TaskRegistry, seed: u64) -> Result<Model> {
    Model::build(config, &registry.names(), seed)
}

impl Model {
    pub fn build(config: &ModelConfig, tasks: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(ModelError::Invalid("a model needs at least one task".into()));
        }
        let params: Vec<Parameter> = declarations(config, tasks.len())
            .iter()
            .map(|d| Parameter {
                name: d.name.clone(),
                tensor: initial_tensor(d, seed),
                trainable: true,
                owner: d.owner,
                task: d.task,
            })
            .collect();
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let layout = Layout::build(config, &index, tasks.len())?;
        let mut model = Self {
            config: config.clone(),
            params,
            index,
            tasks: tasks.to_vec(),
            seed,
            version: 0,
            layout,
            positions: sinusoidal_positions(config.max_len, config.hidden),
        };
        FreezePolicy::for_config(config).apply(&mut model);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn task_names(&self) -> &[String] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_id(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == name)
    }

    /// Parameter-update counter; generated-weight caches key on it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Result<&Parameter> {
        self.param_index(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
    }

    /// Replaces a parameter's values; bumps the version.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .param_index(name)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))?;
        self.set_param_at(i, value)
    }

    pub fn set_param_at(&mut self, i: usize, value: Tensor) -> Result<()> {
        let p = &mut self.params[i];
        if p.tensor.shape() != value.shape() {
            return Err(ModelError::ParameterShape {
                name: p.name.clone(),
                expected: p.tensor.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        p.tensor = value;
        self.version += 1;
        Ok(())
    }

    pub fn set_trainable(&mut self, i: usize, trainable: bool) {
        self.params[i].trainable = trainable;
    }

    /// Mutable access to all parameter values for an optimizer update.
    /// The caller must call [`Model::bump_version`] afterwards.
    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Adds a new task with freshly initialized per-task parameters.
    /// Trainability of the new parameters follows the variant's policy.
    pub fn register_task(&mut self, name: &str) -> Result<usize> {
        if self.task_id(name).is_some() {
            return Err(ModelError::Invalid(format!("task `{name}` already registered")));
        }
        let k = self.tasks.len();
        let policy = FreezePolicy::for_config(&self.config);
        for d in declarations(&self.config, k + 1).into_iter().filter(|d| d.task == Some(k)) {
            let tensor = initial_tensor(&d, self.seed);
            self.index.insert(d.name.clone(), self.params.len());
            let mut p = Parameter {
                name: d.name,
                tensor,
                trainable: true,
                owner: d.owner,
                task: d.task,
            };
            p.trainable = policy.allows(&p);
            self.params.push(p);
        }
        self.tasks.push(name.to_string());
        self.layout = Layout::build(&self.config, &self.index, self.tasks.len())?;
        self.version += 1;
        Ok(k)
    }

    /// Base-model parameters under their shared names.
    pub fn base_weights(&self) -> BaseWeights {
        let mut params = BTreeMap::new();
        for p in &self.params {
            if matches!(p.owner, Owner::BaseTheta | Owner::BaseLayerNorm) {
                params.entry(base_name(&p.name).to_string()).or_insert_with(|| p.tensor.clone());
            }
        }
        BaseWeights { params }
    }

    /// Overwrites base parameters (and per-task copies of base layer norms).
    pub fn load_base(&mut self, base: &BaseWeights) -> Result<()> {
        for p in &mut self.params {
            if !matches!(p.owner, Owner::BaseTheta | Owner::BaseLayerNorm) {
                continue;
            }
            let key = base_name(&p.name);
            let t = base
                .params
                .get(key)
                .ok_or_else(|| ModelError::UnknownParameter(key.to_string()))?;
            if t.shape() != p.tensor.shape() {
                return Err(ModelError::ParameterShape {
                    name: p.name.clone(),
                    expected: p.tensor.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            p.tensor = t.clone();
        }
        self.version += 1;
        Ok(())
    }

    pub(crate) fn check_task(&self, task: usize) -> Result<()> {
        if task < self.tasks.len() {
            Ok(())
        } else {
            Err(ModelError::UnknownTask(task))
        }
    }

    /// Sentinel token prepended to the source when task prefixes are on.
    pub fn prefix_token(&self, task: usize) -> Option<usize> {
        self.config
            .ablations
            .use_task_prefixes
            .then(|| self.config.vocab - 1 - task)
    }

    pub(crate) fn feature_index(&self, task: usize) -> usize {
        self.layout.features[task]
    }

    pub(crate) fn stack_hyper(&self, stack: usize) -> Option<&StackHyper> {
        self.layout.stacks[stack].hyper.as_ref()
    }

    pub(crate) fn adapter_slot(&self, stack: usize, layer: usize, pos: usize) -> Option<&AdapterSlot> {
        self.layout.stacks[stack].blocks[layer]
            .adapters
            .as_ref()
            .map(|a| &a[pos])
    }
}

// ── batches ─────────────────────────────────────────────────────────

/// Padded source side of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub size: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
}

/// Teacher-forced decoder side: input starts with PAD, targets end with END.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub len: usize,
    pub input: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: SourceBatch,
    pub target: TargetBatch,
}

impl SourceBatch {
    pub fn new(sources: &[&[usize]], prefix: Option<usize>) -> Result<Self> {
        if sources.is_empty() {
            return Err(ModelError::Invalid("empty batch".into()));
        }
        // Sources end with END, as targets do, so the length is explicit.
        let extra = prefix.is_some() as usize + 1;
        let len = sources.iter().map(|s| s.len() + extra).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(sources.len() * len);
        let mut valid = Vec::with_capacity(sources.len() * len);
        for s in sources {
            let row: Vec<usize> = prefix.into_iter().chain(s.iter().copied()).chain([END]).collect();
            valid.extend((0..len).map(|i| i < row.len()));
            ids.extend(row.iter().copied().chain(std::iter::repeat(PAD)).take(len));
        }
        Ok(Self {
            size: sources.len(),
            len,
            ids,
            valid,
        })
    }
}

impl TargetBatch {
    pub fn new(targets: &[&[usize]]) -> Self {
        let len = targets.iter().map(|t| t.len() + 1).max().unwrap_or(1);
        let mut input = Vec::with_capacity(targets.len() * len);
        let mut out = Vec::with_capacity(targets.len() * len);
        for t in targets {
            let full: Vec<usize> = t.iter().copied().chain([END]).collect();
            for i in 0..len {
                input.push(if i == 0 { PAD } else { full.get(i - 1).copied().unwrap_or(PAD) });
                out.push(full.get(i).copied());
            }
        }
        Self {
            len,
            input,
            targets: out,
        }
    }
}

impl Batch {
    pub fn new(sources: &[&[usize]], targets: &[&[usize]], prefix: Option<usize>) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(ModelError::Invalid("source and target counts differ".into()));
        }
        Ok(Self {
            source: SourceBatch::new(sources, prefix)?,
            target: TargetBatch::new(targets),
        })
    }

    pub fn from_examples(model: &Model, examples: &[&crate::tasks::Example], task: usize) -> Result<Self> {
        let s: Vec<&[usize]> = examples.iter().map(|e| e.source.as_slice()).collect();
        let t: Vec<&[usize]> = examples.iter().map(|e| e.target.as_slice()).collect();
        Batch::new(&s, &t, model.prefix_token(task))
    }
}

// ── forward ─────────────────────────────────────────────────────────

/// How generated adapter weights are obtained during a forward pass.
pub enum Conditioning<'c> {
    /// Generate on the forward tape (differentiable).
    Generate,
    /// Reuse memoized weights, generating on a miss.
    Cached(&'c mut WeightCache),
}

/// One forward pass: a tape plus the binding of parameters to tape leaves.
pub struct Forward<'m> {
    pub(crate) model: &'m Model,
    pub tape: Tape,
    vars: Vec<Option<Var>>,
    grad: bool,
    adapters: HashMap<(usize, usize, usize), AdapterVars>,
    pub(crate) embeddings: HashMap<(usize, usize), Var>,
    task: usize,
}

impl<'m> Forward<'m> {
    /// `grad` marks trainable parameters as requiring gradients.
    pub fn new(model: &'m Model, task: usize, grad: bool) -> Result<Self> {
        model.check_task(task)?;
        Ok(Self {
            model,
            tape: Tape::new(),
            vars: vec![None; model.params.len()],
            grad,
            adapters: HashMap::new(),
            embeddings: HashMap::new(),
            task,
        })
    }

    pub fn task(&self) -> usize {
        self.task
    }

    /// Tape leaf for parameter `i`, created on first use.
    pub fn param(&mut self, i: usize) -> Var {
        if let Some(v) = self.vars[i] {
            return v;
        }
        let p = &self.model.params[i];
        let v = self.tape.leaf(p.tensor.clone(), self.grad && p.trainable);
        self.vars[i] = Some(v);
        v
    }

    /// Tape variable bound to parameter `i`, if it was used.
    pub fn bound(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }

    fn ln(&mut self, x: Var, ln: Ln) -> Result<Var> {
        let g = self.param(ln.gamma);
        let b = self.param(ln.beta);
        Ok(self.tape.layer_norm(x, g, b)?)
    }

    fn check_ids(&self, ids: &[usize], len: usize) -> Result<()> {
        let c = &self.model.config;
        if len > c.max_len {
            return Err(ModelError::SequenceTooLong { len, max: c.max_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= c.vocab) {
            return Err(ModelError::TokenOutOfRange { id, vocab: c.vocab });
        }
        Ok(())
    }

    fn embed(&mut self, ids: &[usize], rows: usize, len: usize) -> Result<Var> {
        self.check_ids(ids, len)?;
        let h = self.model.config.hidden;
        let e = self.param(self.model.layout.embedding);
        let x = self.tape.gather_rows(e, ids)?;
        let table = self.model.positions.data();
        let mut pos = Vec::with_capacity(rows * len * h);
        for _ in 0..rows {
            pos.extend_from_slice(&table[..len * h]);
        }
        let p = self.tape.constant(Tensor::new(vec![rows * len, h], pos)?);
        Ok(self.tape.add(x, p)?)
    }

    fn mha(&mut self, xq: Var, xkv: Var, a: Attn, spec: AttentionSpec) -> Result<Var> {
        let (wq, wk, wv, wo) = (self.param(a.q), self.param(a.k), self.param(a.v), self.param(a.o));
        let q = self.tape.matmul(xq, wq)?;
        let k = self.tape.matmul(xkv, wk)?;
        let v = self.tape.matmul(xkv, wv)?;
        let o = self.tape.attention(q, k, v, spec)?;
        Ok(self.tape.matmul(o, wo)?)
    }

    fn adapt(&mut self, x: Var, stack: usize, layer: usize, pos: usize, cond: &mut Conditioning) -> Result<Var> {
        match self.adapter_vars(stack, layer, pos, cond)? {
            Some(w) => Ok(hyper::adapter_forward(&mut self.tape, x, &w)?),
            None => Ok(x),
        }
    }

    /// Adapter weights at `(stack, layer, pos)` for the pass's task.
    pub fn adapter_vars(
        &mut self,
        stack: usize,
        layer: usize,
        pos: usize,
        cond: &mut Conditioning,
    ) -> Result<Option<AdapterVars>> {
        let key = (stack, layer, pos);
        if let Some(w) = self.adapters.get(&key) {
            return Ok(Some(*w));
        }
        let task = self.task;
        let Some(slot) = self.model.adapter_slot(stack, layer, pos).cloned() else {
            return Ok(None);
        };
        let w = match slot {
            AdapterSlot::Direct { up, down, ln } => {
                let l = ln.get(task);
                AdapterVars {
                    up: self.param(up[task]),
                    down: self.param(down[task]),
                    gamma: self.param(l.gamma),
                    beta: self.param(l.beta),
                }
            }
            AdapterSlot::Hyper { .. } => match cond {
                Conditioning::Generate => hyper::generate_on_tape(self, stack, layer, pos)?,
                Conditioning::Cached(cache) => {
                    let g = cache.get_or_generate(self.model, task, stack, layer, pos)?;
                    AdapterVars {
                        up: self.tape.constant(g.up.clone()),
                        down: self.tape.constant(g.down.clone()),
                        gamma: self.tape.constant(g.gamma.clone()),
                        beta: self.tape.constant(g.beta.clone()),
                    }
                }
            },
        };
        self.adapters.insert(key, w);
        Ok(Some(w))
    }

    /// Encoder output `[size·len × h]` after the final layer norm.
    pub fn encode(&mut self, src: &SourceBatch, cond: &mut Conditioning) -> Result<Var> {
        let model = self.model;
        let task = self.task;
        let mut x = self.embed(&src.ids, src.size, src.len)?;
        let heads = model.config.heads;
        for (i, b) in model.layout.stacks[ENCODER].blocks.iter().enumerate() {
            let y = self.ln(x, b.ln_attn.get(task))?;
            let spec = AttentionSpec {
                batch: src.size,
                query_len: src.len,
                key_len: src.len,
                heads,
                key_valid: Some(src.valid.clone()),
                causal: false,
            };
            let a = self.mha(y, y, b.attn, spec)?;
            let a = self.adapt(a, ENCODER, i, 0, cond)?;
            x = self.tape.add(x, a)?;
            x = self.feed_forward(x, b, ENCODER, i, cond)?;
        }
        self.ln(x, model.layout.stacks[ENCODER].final_ln.get(task))
    }

    fn feed_forward(&mut self, x: Var, b: &BlockLayout, stack: usize, i: usize, cond: &mut Conditioning) -> Result<Var> {
        let y = self.ln(x, b.ln_ff.get(self.task))?;
        let w1 = self.param(b.w1);
        let w2 = self.param(b.w2);
        let f = self.tape.matmul(y, w1)?;
        let f = self.tape.gelu(f)?;
        let f = self.tape.matmul(f, w2)?;
        let f = self.adapt(f, stack, i, 1, cond)?;
        Ok(self.tape.add(x, f)?)
    }

    /// Logits `[size·len × V]` for decoder inputs `input` (row-major
    /// `size × len`) given encoder memory.
    pub fn decode(
        &mut self,
        memory: Var,
        src: &SourceBatch,
        input: &[usize],
        len: usize,
        cond: &mut Conditioning,
    ) -> Result<Var> {
        let model = self.model;
        let task = self.task;
        let heads = model.config.heads;
        let mut x = self.embed(input, src.size, len)?;
        for (i, b) in model.layout.stacks[DECODER].blocks.iter().enumerate() {
            let y = self.ln(x, b.ln_attn.get(task))?;
            let spec = AttentionSpec {
                batch: src.size,
                query_len: len,
                key_len: len,
                heads,
                key_valid: None,
                causal: true,
            };
            let a = self.mha(y, y, b.attn, spec)?;
            let a = self.adapt(a, DECODER, i, 0, cond)?;
            x = self.tape.add(x, a)?;
            let (ln_cross, cross) = b.cross.as_ref().expect("decoder blocks have cross-attention");
            let y = self.ln(x, ln_cross.get(task))?;
            let spec = AttentionSpec {
                batch: src.size,
                query_len: len,
                key_len: src.len,
                heads,
                key_valid: Some(src.valid.clone()),
                causal: false,
            };
            let c = self.mha(y, memory, *cross, spec)?;
            x = self.tape.add(x, c)?;
            x = self.feed_forward(x, b, DECODER, i, cond)?;
        }
        let y = self.ln(x, model.layout.stacks[DECODER].final_ln.get(task))?;
        let e = self.param(model.layout.embedding);
        let et = self.tape.transpose(e)?;
        let logits = self.tape.matmul(y, et)?;
        Ok(self.tape.scale(logits, 1.0 / (model.config.hidden as f64).sqrt())?)
    }

    pub fn logits(&mut self, batch: &Batch, cond: &mut Conditioning) -> Result<Var> {
        let mem = self.encode(&batch.source, cond)?;
        self.decode(mem, &batch.source, &batch.target.input, batch.target.len, cond)
    }

    pub fn loss(&mut self, batch: &Batch, cond: &mut Conditioning) -> Result<Var> {
        let logits = self.logits(batch, cond)?;
        Ok(self.tape.softmax_cross_entropy(logits, &batch.target.targets)?)
    }

    /// Gradients of `root` indexed like the model's parameters.
    pub fn param_grads(&self, root: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let mut g = self.tape.backward(root)?;
        Ok(self.vars.iter().map(|v| v.and_then(|v| g.take(v))).collect())
    }
}

/// Loss value and per-parameter gradients for one batch.
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Option<Vec<f64>>>,
}

impl Model {
    /// Logits `[batch × target_len × V]` without gradient tracking.
    pub fn forward(&self, batch: &Batch, task: usize, cache: Option<&mut WeightCache>) -> Result<Tensor> {
        let mut f = Forward::new(self, task, false)?;
        let mut cond = match cache {
            Some(c) => Conditioning::Cached(c),
            None => Conditioning::Generate,
        };
        let l = f.logits(batch, &mut cond)?;
        let t = f.tape.value(l).clone();
        Ok(t.reshape(&[batch.source.size, batch.target.len, self.config.vocab])?)
    }

    /// Mean cross-entropy without gradient tracking.
    pub fn loss(&self, batch: &Batch, task: usize, cache: Option<&mut WeightCache>) -> Result<f64> {
        let mut f = Forward::new(self, task, false)?;
        let mut cond = match cache {
            Some(c) => Conditioning::Cached(c),
            None => Conditioning::Generate,
        };
        let l = f.loss(batch, &mut cond)?;
        Ok(f.tape.value(l).item())
    }

    /// Loss and gradients of every trainable parameter.
    pub fn loss_and_grads(&self, batch: &Batch, task: usize) -> Result<LossGrad> {
        let mut f = Forward::new(self, task, true)?;
        let l = f.loss(batch, &mut Conditioning::Generate)?;
        let loss = f.tape.value(l).item();
        let grads = f.param_grads(l)?;
        Ok(LossGrad { loss, grads })
    }

    /// Greedy autoregressive decoding. Each returned sequence ends at the
    /// first END token (included) or after `max_steps` tokens.
    pub fn decode_greedy(
        &self,
        sources: &[&[usize]],
        task: usize,
        max_steps: usize,
        cache: Option<&mut WeightCache>,
    ) -> Result<Vec<Vec<usize>>> {
        if max_steps == 0 {
            return Err(ModelError::Invalid("max_steps must be at least 1".into()));
        }
        let mut f = Forward::new(self, task, false)?;
        let mut cond = match cache {
            Some(c) => Conditioning::Cached(c),
            None => Conditioning::Generate,
        };
        let src = SourceBatch::new(sources, self.prefix_token(task))?;
        let mem = f.encode(&src, &mut cond)?;
        let n = src.size;
        let v = self.config.vocab;
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        for step in 0..max_steps {
            let len = step + 1;
            let mut input = Vec::with_capacity(n * len);
            for row in &out {
                input.push(PAD);
                input.extend(row.iter().copied().chain(std::iter::repeat(PAD)).take(step));
            }
            let logits = f.decode(mem, &src, &input, len, &mut cond)?;
            let data = f.tape.value(logits).data();
            for (b, row) in out.iter_mut().enumerate() {
                if done[b] {
                    continue;
                }
                let r = &data[(b * len + step) * v..(b * len + step + 1) * v];
                let mut best = 0;
                for (i, &x) in r.iter().enumerate() {
                    if x > r[best] {
                        best = i;
                    }
                }
                row.push(best);
                done[b] = best == END;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablations;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            d_ff: 16,
            vocab: 32,
            max_len: 8,
            bottleneck: 2,
            task_dim: 4,
            task_feature_dim: 4,
            projector_hidden: 8,
            variant,
            ablations: Ablations::default(),
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn names_unique_and_partition_exhaustive() {
        for v in Variant::ALL {
            let m = Model::build(&tiny(v), &names(2), 0).unwrap();
            assert_eq!(m.index.len(), m.params.len());
            let by_owner: usize = Owner::ALL
                .iter()
                .map(|o| m.params.iter().filter(|p| p.owner == *o).map(|p| p.tensor.len()).sum::<usize>())
                .sum();
            assert_eq!(by_owner, m.num_parameters());
        }
    }

    #[test]
    fn base_init_independent_of_variant() {
        let a = Model::build(&tiny(Variant::FullFinetune), &names(2), 7).unwrap();
        let b = Model::build(&tiny(Variant::HyperFormerPP), &names(2), 7).unwrap();
        assert_eq!(a.base_weights(), b.base_weights());
    }

    #[test]
    fn batch_layout() {
        let b = Batch::new(&[&[5, 6], &[7]], &[&[8], &[9, 10]], None).unwrap();
        assert_eq!(b.source.ids, vec![5, 6, END, 7, END, PAD]);
        assert_eq!(b.source.valid, vec![true, true, true, true, true, false]);
        assert_eq!(b.target.len, 3);
        assert_eq!(b.target.input, vec![PAD, 8, END, PAD, 9, 10]);
        assert_eq!(
            b.target.targets,
            vec![Some(8), Some(END), None, Some(9), Some(10), Some(END)]
        );
        let p = SourceBatch::new(&[&[5]], Some(31)).unwrap();
        assert_eq!(p.ids, vec![31, 5, END]);
    }

    #[test]
    fn positions_match_formula() {
        let p = sinusoidal_positions(3, 4);
        assert_eq!(p.data()[0..4], [0.0, 1.0, 0.0, 1.0]);
        let x = 2.0 / 10000f64.powf(2.0 / 4.0);
        assert!((p.data()[2 * 4 + 2] - x.sin()).abs() < 1e-15);
    }

    #[test]
    fn register_task_matches_fresh_build() {
        let c = tiny(Variant::Adapters);
        let mut m = Model::build(&c, &names(1), 3).unwrap();
        m.register_task("t1").unwrap();
        let fresh = Model::build(&c, &names(2), 3).unwrap();
        for p in fresh.params() {
            assert_eq!(m.param(&p.name).unwrap(), p);
        }
    }
}
