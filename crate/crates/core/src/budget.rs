//! Parameter budgets: closed-form counts and enumeration of a built model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::{ModelConfig, Variant};
use crate::model::{Model, ModelError, Owner};

/// `4·T·L·(2hd + 2h)`: adapters plus adapter layer norms, both stacks.
pub fn formula_adapters(tasks: u64, layers: u64, h: u64, d: u64) -> u64 {
    4 * tasks * layers * (2 * h * d + 2 * h)
}

/// `t(T + 4 + 2L) + 8te + 2t(2hd + 2h)`: task features plus hypernetworks.
pub fn formula_hyperformer_pp(tasks: u64, layers: u64, h: u64, d: u64, t: u64, e: u64) -> u64 {
    t * (tasks + 4 + 2 * layers) + 8 * t * e + 2 * t * (2 * h * d + 2 * h)
}

/// Parameters of the two shared projector layer norms, which the closed form
/// leaves out.
pub fn pp_shared_ln_term(t: u64) -> u64 {
    4 * t
}

#[derive(Clone, Debug, PartialEq)]
pub struct Budget {
    pub label: String,
    pub tasks: usize,
    pub per_owner: BTreeMap<Owner, usize>,
    pub trainable_per_owner: BTreeMap<Owner, usize>,
    pub total: usize,
    pub trainable_total: usize,
    /// Shared trainable parameters divided by T plus the mean of per-task
    /// trainable parameters.
    pub per_task_trainable: f64,
    /// `per_task_trainable` relative to the base model (θ plus one set of
    /// base layer norms).
    pub fraction_of_base: f64,
}

impl Budget {
    pub fn owner(&self, o: Owner) -> usize {
        self.per_owner.get(&o).copied().unwrap_or(0)
    }
}

/// Walks the parameter registry.
pub fn enumerate(model: &Model) -> Budget {
    let tasks = model.num_tasks();
    let mut per_owner: BTreeMap<Owner, usize> = Owner::ALL.iter().map(|o| (*o, 0)).collect();
    let mut trainable_per_owner = per_owner.clone();
    let (mut shared_trainable, mut task_trainable, mut base) = (0usize, 0usize, 0usize);
    for p in model.params() {
        let n = p.tensor.len();
        *per_owner.get_mut(&p.owner).expect("all owners present") += n;
        if p.trainable {
            *trainable_per_owner.get_mut(&p.owner).expect("all owners present") += n;
            if p.task.is_some() {
                task_trainable += n;
            } else {
                shared_trainable += n;
            }
        }
        let base_owner = matches!(p.owner, Owner::BaseTheta | Owner::BaseLayerNorm);
        if base_owner && p.task.map_or(true, |t| t == 0) {
            base += n;
        }
    }
    let total = per_owner.values().sum();
    let trainable_total = trainable_per_owner.values().sum();
    let per_task_trainable = (shared_trainable + task_trainable) as f64 / tasks as f64;
    let c = model.config();
    let label = if c.ablations == Default::default() {
        c.variant.to_string()
    } else {
        format!("{}[{}]", c.variant, c.ablations)
    };
    Budget {
        label,
        tasks,
        per_owner,
        trainable_per_owner,
        total,
        trainable_total,
        per_task_trainable,
        fraction_of_base: per_task_trainable / base as f64,
    }
}

/// Builds a throwaway model with `tasks` placeholder tasks and enumerates it.
pub fn enumerate_config(config: &ModelConfig, tasks: usize) -> Result<Budget, ModelError> {
    let names: Vec<String> = (0..tasks).map(|k| format!("task{k}")).collect();
    Ok(enumerate(&Model::build(config, &names, 0)?))
}

/// Closed form against enumeration for one model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormulaCheck {
    pub formula: u64,
    pub enumerated: u64,
    /// Allowed `enumerated − formula`.
    pub tolerance: u64,
}

impl FormulaCheck {
    pub fn ok(&self) -> bool {
        self.enumerated >= self.formula && self.enumerated - self.formula <= self.tolerance
    }
}

/// Compares enumeration with the matching closed form. Only the Adapters
/// and HyperFormer++ variants without ablations have one.
pub fn check_formula(model: &Model) -> Option<FormulaCheck> {
    let c = model.config();
    if c.ablations != Default::default() {
        return None;
    }
    let b = enumerate(model);
    let (tk, l, h, d, t, e) = (
        model.num_tasks() as u64,
        c.layers as u64,
        c.hidden as u64,
        c.bottleneck as u64,
        c.task_dim as u64,
        c.projector_hidden as u64,
    );
    match c.variant {
        Variant::Adapters => Some(FormulaCheck {
            formula: formula_adapters(tk, l, h, d),
            enumerated: b.owner(Owner::Adapter) as u64,
            tolerance: 0,
        }),
        Variant::HyperFormerPP => Some(FormulaCheck {
            formula: formula_hyperformer_pp(tk, l, h, d, t, e),
            enumerated: (b.owner(Owner::Hyper) + b.owner(Owner::TaskFeature)) as u64,
            tolerance: pp_shared_ln_term(t),
        }),
        _ => None,
    }
}

/// Smallest task count at which HyperFormer++ needs fewer parameters than
/// Adapters, or `None` if that never happens.
pub fn crossover_tasks(layers: u64, h: u64, d: u64, t: u64, e: u64) -> Option<u64> {
    let a = 2 * h * d + 2 * h;
    let slope = 4 * layers * a;
    if slope <= t {
        return None;
    }
    let fixed = t * (4 + 2 * layers) + 8 * t * e + 2 * t * a;
    Some(fixed / (slope - t) + 1)
}

// ── rendering ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "variant",
    "tasks",
    "total",
    "trainable",
    "base_theta",
    "base_layer_norm",
    "hyper",
    "task_feature",
    "adapter",
    "per_task_trainable",
    "fraction_of_base",
    "trainable_fraction",
];

fn cells(b: &Budget) -> Vec<String> {
    vec![
        b.label.clone(),
        b.tasks.to_string(),
        b.total.to_string(),
        b.trainable_total.to_string(),
        b.owner(Owner::BaseTheta).to_string(),
        b.owner(Owner::BaseLayerNorm).to_string(),
        b.owner(Owner::Hyper).to_string(),
        b.owner(Owner::TaskFeature).to_string(),
        b.owner(Owner::Adapter).to_string(),
        format!("{:.2}", b.per_task_trainable),
        format!("{:.6}", b.fraction_of_base),
        format!("{:.6}", b.trainable_total as f64 / b.total as f64),
    ]
}

pub fn report(budgets: &[Budget], format: ReportFormat) -> String {
    let header: Vec<String> = REPORT_COLUMNS.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = budgets.iter().map(cells).collect();
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            for r in std::iter::once(&header).chain(&rows) {
                let _ = writeln!(out, "{}", r.join(","));
            }
        }
        ReportFormat::Table => {
            let widths: Vec<usize> = (0..header.len())
                .map(|c| std::iter::once(&header).chain(&rows).map(|r| r[c].len()).max().unwrap_or(0))
                .collect();
            for (n, r) in std::iter::once(&header).chain(&rows).enumerate() {
                let line: Vec<String> = r
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                    .collect();
                let _ = writeln!(out, "{}", line.join("  ").trim_end());
                if n == 0 {
                    let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                }
            }
        }
    }
    out
}

/// Parses the CSV produced by [`report`] into rows of named cells.
pub fn parse_report_csv(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return Vec::new();
    };
    let cols: Vec<&str> = header.split(',').collect();
    lines
        .filter(|l| !l.is_empty())
        .map(|l| cols.iter().map(|c| c.to_string()).zip(l.split(',').map(String::from)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(formula_adapters(2, 2, 8, 2), 768);
        assert_eq!(formula_adapters(8, 12, 768, 24), 14_745_600);
        assert_eq!(formula_adapters(1, 1, 1, 1), 16);
        assert_eq!(formula_hyperformer_pp(2, 2, 8, 2, 4, 8), 680);
        assert_eq!(formula_hyperformer_pp(8, 12, 768, 24, 64, 128), 4_983_040);
        assert_eq!(formula_hyperformer_pp(8, 12, 768, 24, 0, 128), 0);
    }

    #[test]
    fn crossover_is_tight() {
        for (l, h, d, t, e) in [(2, 8, 2, 4, 8), (12, 768, 24, 64, 128), (1, 4, 1, 2, 4)] {
            let c = crossover_tasks(l, h, d, t, e).unwrap();
            assert!(formula_hyperformer_pp(c, l, h, d, t, e) < formula_adapters(c, l, h, d));
            if c > 1 {
                assert!(formula_hyperformer_pp(c - 1, l, h, d, t, e) >= formula_adapters(c - 1, l, h, d));
            }
        }
        assert_eq!(crossover_tasks(1, 1, 1, 100, 1), None);
    }
}
