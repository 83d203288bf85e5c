//! Task conditioning: task projectors, weight-generating heads, the
//! conditional adapter layer and the generated-weight cache.

use std::collections::HashMap;
use std::io::Write;

use crate::config::Variant;
use crate::model::{AdapterSlot, Forward, Model, ModelError, Result, ENCODER};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Adapter weights bound on a tape: `U [h×d]`, `D [d×h]`, `γ, β [h]`.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub up: Var,
    pub down: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Materialized adapter weights for one (task, stack, layer, position).
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedWeights {
    pub up: Tensor,
    pub down: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

type TResult<T> = std::result::Result<T, TensorError>;

// ── primitives ──────────────────────────────────────────────────────

/// `I = ReLU(z·W1)·W2`, or `I = z` without a projector. `z` is `[1×t']`.
pub fn project_task(tape: &mut Tape, z: Var, projector: Option<(Var, Var)>) -> TResult<Var> {
    match projector {
        Some((w1, w2)) => {
            let a = tape.matmul(z, w1)?;
            let a = tape.relu(a)?;
            tape.matmul(a, w2)
        }
        None => Ok(z),
    }
}

/// `I = LN(ReLU([z, l, p]·W1)·W2)` with a trainable shared layer norm.
/// `z`, `l`, `p` are length-`t` vectors of any row shape.
#[allow(clippy::too_many_arguments)]
pub fn project_task_shared(
    tape: &mut Tape,
    z: Var,
    l: Var,
    p: Var,
    w1: Var,
    w2: Var,
    gamma: Var,
    beta: Var,
) -> TResult<Var> {
    let x = tape.concat(&[z, l, p])?;
    let n = tape.value(x).len();
    let x = tape.reshape(x, &[1, n])?;
    let i = project_task(tape, x, Some((w1, w2)))?;
    tape.layer_norm(i, gamma, beta)
}

/// `U = reshape(I·W^U, h×d)`, `D = reshape(I·W^D, d×h)`.
pub fn generate_adapter(tape: &mut Tape, i: Var, wu: Var, wd: Var, h: usize, d: usize) -> TResult<(Var, Var)> {
    let u = tape.matmul(i, wu)?;
    let u = tape.reshape(u, &[h, d])?;
    let dn = tape.matmul(i, wd)?;
    let dn = tape.reshape(dn, &[d, h])?;
    Ok((u, dn))
}

/// `γ = I·W^γ`, `β = I·W^β`, each a length-`h` vector.
pub fn generate_layernorm(tape: &mut Tape, i: Var, wg: Var, wb: Var) -> TResult<(Var, Var)> {
    let g = tape.matmul(i, wg)?;
    let h = tape.value(g).len();
    let g = tape.reshape(g, &[h])?;
    let b = tape.matmul(i, wb)?;
    let b = tape.reshape(b, &[h])?;
    Ok((g, b))
}

/// `LN_{γ,β}(GeLU(x·Dᵀ)·Uᵀ) + x` over rows of `x [n×h]`.
pub fn adapter_forward(tape: &mut Tape, x: Var, w: &AdapterVars) -> TResult<Var> {
    let dt = tape.transpose(w.down)?;
    let a = tape.matmul(x, dt)?;
    let a = tape.gelu(a)?;
    let ut = tape.transpose(w.up)?;
    let a = tape.matmul(a, ut)?;
    let a = tape.layer_norm(a, w.gamma, w.beta)?;
    tape.add(a, x)
}

// ── model-bound generation ──────────────────────────────────────────

fn row(f: &mut Forward, table: usize, r: usize) -> Result<Var> {
    let t = f.param(table);
    Ok(f.tape.gather_rows(t, &[r])?)
}

/// Task feature `z_τ` of the pass's task as a `[1×t']` row.
fn feature_row(f: &mut Forward) -> Result<Var> {
    let z = f.param(f.model.feature_index(f.task()));
    let n = f.tape.value(z).len();
    Ok(f.tape.reshape(z, &[1, n])?)
}

/// Task embedding `I_τ` for a stack. HyperFormer++ additionally conditions
/// on `(layer, position)`.
pub fn task_embedding(f: &mut Forward, stack: usize, site: Option<(usize, usize)>) -> Result<Var> {
    let key = match site {
        Some((layer, pos)) => {
            let layers = f.model.config().layers;
            if layer >= layers || pos >= 2 {
                return Err(ModelError::Invalid(format!(
                    "adapter site ({layer}, {pos}) out of range for {layers} layers"
                )));
            }
            (stack, 2 * layer + pos)
        }
        None => (stack, usize::MAX),
    };
    if let Some(v) = f.embeddings.get(&key) {
        return Ok(*v);
    }
    let sh = f
        .model
        .stack_hyper(stack)
        .cloned()
        .ok_or_else(|| ModelError::Invalid("variant has no hypernetwork".into()))?;
    let z = feature_row(f)?;
    let i = match f.model.config().variant {
        Variant::HyperFormer => {
            let proj = sh.projector.map(|(a, b)| (f.param(a), f.param(b)));
            project_task(&mut f.tape, z, proj)?
        }
        Variant::HyperFormerPP => {
            let (layer, pos) = site.ok_or_else(|| ModelError::Invalid("HyperFormer++ needs a layer and position".into()))?;
            let l = row(f, sh.layer_embedding.expect("++ layer embeddings"), layer)?;
            let p = row(f, sh.position_embedding.expect("++ position embeddings"), pos)?;
            let (w1, w2) = sh.projector.expect("++ projector");
            let ln = sh.projector_ln.expect("++ shared layer norm");
            let (w1, w2, g, b) = (f.param(w1), f.param(w2), f.param(ln.gamma), f.param(ln.beta));
            project_task_shared(&mut f.tape, z, l, p, w1, w2, g, b)?
        }
        v => return Err(ModelError::Invalid(format!("variant {v} has no task embedding"))),
    };
    f.embeddings.insert(key, i);
    Ok(i)
}

/// Generates the adapter at `(stack, layer, pos)` on the forward tape.
pub(crate) fn generate_on_tape(f: &mut Forward, stack: usize, layer: usize, pos: usize) -> Result<AdapterVars> {
    let model = f.model;
    let cfg = model.config();
    let (h, d) = (cfg.hidden, cfg.bottleneck);
    let Some(AdapterSlot::Hyper { heads, ln }) = model.adapter_slot(stack, layer, pos).cloned() else {
        return Err(ModelError::Invalid("adapter site is not hypernetwork-generated".into()));
    };
    let (heads, site) = match heads {
        Some(hd) => (hd, None),
        None => (
            model
                .stack_hyper(stack)
                .and_then(|s| s.heads)
                .ok_or_else(|| ModelError::Invalid("missing shared heads".into()))?,
            Some((layer, pos)),
        ),
    };
    let i = task_embedding(f, stack, site)?;
    let (wu, wd) = (f.param(heads.up), f.param(heads.down));
    let (up, down) = generate_adapter(&mut f.tape, i, wu, wd, h, d)?;
    let (gamma, beta) = match (heads.gamma, heads.beta, ln) {
        (Some(g), Some(b), _) => {
            let (g, b) = (f.param(g), f.param(b));
            generate_layernorm(&mut f.tape, i, g, b)?
        }
        (_, _, Some(ln)) => (f.param(ln.gamma), f.param(ln.beta)),
        _ => return Err(ModelError::Invalid("adapter has no layer norm parameters".into())),
    };
    Ok(AdapterVars { up, down, gamma, beta })
}

/// Adapter weights at one site, evaluated without gradient tracking.
pub fn generate(model: &Model, task: usize, stack: usize, layer: usize, pos: usize) -> Result<GeneratedWeights> {
    let mut f = Forward::new(model, task, false)?;
    let w = f
        .adapter_vars(stack, layer, pos, &mut crate::model::Conditioning::Generate)?
        .ok_or_else(|| ModelError::Invalid("model has no adapters".into()))?;
    Ok(GeneratedWeights {
        up: f.tape.value(w.up).clone(),
        down: f.tape.value(w.down).clone(),
        gamma: f.tape.value(w.gamma).clone(),
        beta: f.tape.value(w.beta).clone(),
    })
}

// ── cache ───────────────────────────────────────────────────────────

/// Memoized generated weights keyed by (task, stack, layer, position).
/// Entries are tied to a model version and dropped when it changes.
#[derive(Debug, Default)]
pub struct WeightCache {
    version: Option<u64>,
    entries: HashMap<(usize, usize, usize, usize), GeneratedWeights>,
    generations: u64,
}

impl WeightCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total number of generations performed.
    pub fn generations(&self) -> u64 {
        self.generations
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn invalidate(&mut self) {
        self.entries.clear();
        self.version = None;
    }

    /// Whether the entries were generated from the model's current parameters.
    pub fn is_fresh(&self, model: &Model) -> bool {
        self.version == Some(model.version())
    }

    pub fn get_or_generate(
        &mut self,
        model: &Model,
        task: usize,
        stack: usize,
        layer: usize,
        pos: usize,
    ) -> Result<&GeneratedWeights> {
        if !self.is_fresh(model) {
            self.entries.clear();
            self.version = Some(model.version());
        }
        let key = (task, stack, layer, pos);
        if !self.entries.contains_key(&key) {
            let w = generate(model, task, stack, layer, pos)?;
            self.generations += 1;
            self.entries.insert(key, w);
        }
        Ok(&self.entries[&key])
    }
}

// ── embedding export ────────────────────────────────────────────────

/// Task-only embedding `I_τ` per task from the encoder-stack projector.
/// HyperFormer++ evaluates it with zero layer and position embeddings.
pub fn export_embeddings(model: &Model) -> Result<Vec<(String, Vec<f64>)>> {
    let cfg = model.config();
    if !cfg.variant.is_hyper() || !cfg.adapters_enabled() {
        return Err(ModelError::Invalid(format!(
            "variant {} has no task embeddings",
            cfg.variant
        )));
    }
    let mut out = Vec::new();
    for (task, name) in model.task_names().iter().enumerate() {
        let mut f = Forward::new(model, task, false)?;
        let i = if cfg.variant == Variant::HyperFormerPP {
            let sh = model.stack_hyper(ENCODER).cloned().expect("++ hypernetwork");
            let t = cfg.task_dim;
            let z = feature_row(&mut f)?;
            let l = f.tape.constant(Tensor::zeros(&[1, t]));
            let p = f.tape.constant(Tensor::zeros(&[1, t]));
            let (w1, w2) = sh.projector.expect("++ projector");
            let ln = sh.projector_ln.expect("++ shared layer norm");
            let (w1, w2, g, b) = (f.param(w1), f.param(w2), f.param(ln.gamma), f.param(ln.beta));
            project_task_shared(&mut f.tape, z, l, p, w1, w2, g, b)?
        } else {
            task_embedding(&mut f, ENCODER, None)?
        };
        out.push((name.clone(), f.tape.value(i).data().to_vec()));
    }
    Ok(out)
}

/// Writes `task,dim0..dim{t-1}` rows.
pub fn write_embeddings_csv<W: Write>(rows: &[(String, Vec<f64>)], mut w: W) -> std::io::Result<()> {
    let t = rows.first().map_or(0, |r| r.1.len());
    let header: Vec<String> = std::iter::once("task".to_string())
        .chain((0..t).map(|i| format!("dim{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (name, v) in rows {
        let cells: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
        writeln!(w, "{name},{}", cells.join(","))?;
    }
    Ok(())
}
