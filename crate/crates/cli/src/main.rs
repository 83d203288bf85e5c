//! `hyperformer`: train, evaluate, transfer, audit and export.
//!
//! Exit codes: 0 success, 1 other failure (including audit mismatches),
//! 2 configuration error, 3 numerical failure, 4 IO error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use hyperformer_core::budget::{self, ReportFormat};
use hyperformer_core::checkpoint::{self, CheckpointError};
use hyperformer_core::config::{ConfigError, RunConfig, Variant};
use hyperformer_core::harness::{self, FewShotConfig, HarnessError};
use hyperformer_core::hyper;
use hyperformer_core::rundir;
use hyperformer_core::model::ModelError;
use hyperformer_core::tasks::{self, render_synthetic, Split, TaskData, TaskError};

#[derive(Parser)]
#[command(name = "hyperformer", version, about = "Hypernetwork adapters for multi-task sequence models")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write manifest, metrics and checkpoints to --out.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode one split of one task and print its exact match.
    Eval {
        /// Checkpoint directory, or a run directory (uses its best checkpoint).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Few-shot transfer to a new task from a trained checkpoint.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training task whose conditioning initializes the target.
        #[arg(long)]
        source: String,
        /// Target generator, e.g. `shift-2`.
        #[arg(long)]
        target: String,
        /// Comma-separated shot counts.
        #[arg(long, value_delimiter = ',', default_value = "32")]
        shots: Vec<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Fine-tuning steps; defaults to the run's `transfer_steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Batch size; defaults to the run's `batch_size`, capped at the shot count.
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        /// Worker threads; each job owns its model copy.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// CSV output file; the CSV goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter budgets per variant, checked against the closed forms.
    Audit {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of tasks; defaults to the configured task list.
        #[arg(long)]
        tasks: Option<usize>,
        /// Variants to enumerate; all by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        /// Print the closed forms only, without building models.
        #[arg(long)]
        formula_only: bool,
        /// Require exact equality, without the shared projector layer norm allowance.
        #[arg(long)]
        strict: bool,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Write the learned task embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured synthetic tasks as train/valid/test JSONL.
    ExportData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file or a run manifest; see the README for the keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

// ── failures ────────────────────────────────────────────────────────

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

const CONFIG: u8 = 2;
const NUMERIC: u8 = 3;
const IO: u8 = 4;

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(CONFIG, e)
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) => CONFIG,
        ModelError::Tensor(hyperformer_core::TensorError::NonFinite { .. }) => NUMERIC,
        _ => 1,
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::new(model_code(&e), e)
    }
}

impl From<TaskError> for Failure {
    fn from(e: TaskError) -> Self {
        let code = match e {
            TaskError::Io { .. } => IO,
            _ => CONFIG,
        };
        Failure::new(code, e)
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::NonFinite { .. } => NUMERIC,
            HarnessError::Io(_) => IO,
            HarnessError::Task(TaskError::Io { .. }) => IO,
            HarnessError::Task(_) | HarnessError::Invalid(_) | HarnessError::EmptyRegistry => CONFIG,
            HarnessError::Model(m) => model_code(m),
        };
        Failure::new(code, e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = match &e {
            CheckpointError::Io { .. } | CheckpointError::Corrupt { .. } => IO,
            CheckpointError::Config(_) => CONFIG,
            CheckpointError::Model(m) => model_code(m),
        };
        Failure::new(code, e)
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(IO, anyhow!("{}: {e}", path.display()))
}

type Result<T> = std::result::Result<T, Failure>;

// ── helpers ─────────────────────────────────────────────────────────

/// Defaults, then the config file, then `--set` overrides in order.
fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        let manifest_header = format!("format = {}", rundir::RUN_FORMAT);
        if text.lines().next() == Some(manifest_header.as_str()) {
            run = rundir::config_from_manifest(&text)?;
        } else {
            run.apply_text(&text)?;
        }
    }
    for o in &args.overrides {
        run.apply_override(o)?;
    }
    run.validate()?;
    Ok(run)
}

/// A run directory resolves to the checkpoint its `best` marker names.
fn checkpoint_dir(path: &Path) -> Result<PathBuf> {
    let best = path.join("best");
    if best.is_file() {
        let name = fs::read_to_string(&best).map_err(|e| io_failure(&best, e))?;
        return Ok(path.join(name.trim()));
    }
    Ok(path.to_path_buf())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

// ── commands ────────────────────────────────────────────────────────

fn train(config: &ConfigArgs, out: &Path) -> Result<()> {
    let run = resolve(config)?;
    let registry = harness::load_registry(&run)?;
    let (model, report) = harness::run_training(&run, &registry, None, Some(out))?;
    let best = report.best_score();
    println!("best step {} valid average exact_match {:?}", best.step, best.average);
    for t in registry.tasks() {
        let id = model.task_id(&t.name).expect("registered task");
        let mut cache = hyperformer_core::WeightCache::new();
        let r = harness::evaluate_examples(&model, id, &t.splits.test, &mut cache)?;
        println!("{} test exact_match {:?}", t.name, r.exact_match);
    }
    Ok(())
}

fn eval(path: &Path, task: &str, split: &str) -> Result<()> {
    let split: Split = split.parse().map_err(|e: String| Failure::new(CONFIG, anyhow!(e)))?;
    let c = checkpoint::load(&checkpoint_dir(path)?)?;
    let registry = harness::load_registry(&c.run)?;
    let k = registry
        .id_of(task)
        .ok_or_else(|| Failure::new(CONFIG, anyhow!("unknown task `{task}` (have {})", registry.names().join(", "))))?;
    let em = harness::evaluate(&c.model, &registry, k, split)?;
    println!("{task} {split} exact_match {em:?}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn transfer(
    path: &Path,
    source: &str,
    target: &str,
    shots: &[usize],
    seeds: &[u64],
    steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: f64,
    jobs: usize,
    out: Option<&Path>,
) -> Result<()> {
    if shots.iter().any(|&n| n == 0) || seeds.is_empty() {
        return Err(Failure::new(CONFIG, anyhow!("shots must be positive and at least one seed is required")));
    }
    let c = checkpoint::load(&checkpoint_dir(path)?)?;
    let spec = c.run.data.task_spec(target, c.run.seed)?;
    let splits = tasks::generate(&spec, c.run.model.vocab)?;
    let data = TaskData {
        name: target.to_string(),
        spec: Some(spec),
        splits,
    };
    let template = FewShotConfig {
        shots: 0,
        steps: steps.unwrap_or(c.run.train.transfer_steps),
        batch_size: batch_size.unwrap_or(c.run.train.batch_size),
        learning_rate,
        seed: 0,
    };
    let records = harness::transfer_sweep(&c.model, source, &data, shots, seeds, &template, jobs)?;
    let csv = harness::transfer_csv(&records);
    let table = harness::transfer_table(target, &harness::summarize(&records));
    match out {
        Some(p) => {
            write_file(p, &csv)?;
            print!("{table}");
        }
        None => print!("{csv}\n{table}"),
    }
    Ok(())
}

fn audit(
    config: &ConfigArgs,
    tasks: Option<usize>,
    variants: &[Variant],
    formula_only: bool,
    strict: bool,
    format: Format,
) -> Result<bool> {
    let run = resolve(config)?;
    let m = &run.model;
    let n = tasks.unwrap_or(run.data.tasks.len()).max(1);
    let (tk, l, h, d, t, e) = (
        n as u64,
        m.layers as u64,
        m.hidden as u64,
        m.bottleneck as u64,
        m.task_dim as u64,
        m.projector_hidden as u64,
    );
    if formula_only {
        let rows = [
            ("adapters", budget::formula_adapters(tk, l, h, d).to_string()),
            ("hyperformer++", budget::formula_hyperformer_pp(tk, l, h, d, t, e).to_string()),
            ("hyperformer++_shared_ln", budget::pp_shared_ln_term(t).to_string()),
            (
                "crossover_tasks",
                budget::crossover_tasks(l, h, d, t, e).map_or("none".into(), |c| c.to_string()),
            ),
        ];
        match format {
            Format::Csv => {
                println!("formula,value");
                rows.iter().for_each(|(k, v)| println!("{k},{v}"));
            }
            Format::Table => rows.iter().for_each(|(k, v)| println!("{k:<24} {v:>12}")),
        }
        return Ok(true);
    }
    let variants: Vec<Variant> = if variants.is_empty() { Variant::ALL.to_vec() } else { variants.to_vec() };
    let mut budgets = Vec::new();
    let mut ok = true;
    let mut notes = Vec::new();
    for v in variants {
        let mut c = m.clone();
        c.variant = v;
        if c.validate().is_err() {
            c.ablations = Default::default();
        }
        let names: Vec<String> = (0..n).map(|k| format!("task{k}")).collect();
        let model = hyperformer_core::Model::build(&c, &names, run.seed)?;
        if let Some(mut chk) = budget::check_formula(&model) {
            if strict {
                chk.tolerance = 0;
            }
            let verdict = if chk.ok() { "ok" } else { "MISMATCH" };
            notes.push(format!(
                "{v}: formula {} enumerated {} tolerance {} {verdict}",
                chk.formula, chk.enumerated, chk.tolerance
            ));
            ok &= chk.ok();
        }
        budgets.push(budget::enumerate(&model));
    }
    let fmt = match format {
        Format::Table => ReportFormat::Table,
        Format::Csv => ReportFormat::Csv,
    };
    print!("{}", budget::report(&budgets, fmt));
    for note in notes {
        eprintln!("{note}");
    }
    Ok(ok)
}

fn export_embeddings(path: &Path, out: &Path) -> Result<()> {
    let c = checkpoint::load(&checkpoint_dir(path)?)?;
    let rows = hyper::export_embeddings(&c.model).map_err(|e| Failure::new(CONFIG, e))?;
    let mut buf = Vec::new();
    hyper::write_embeddings_csv(&rows, &mut buf).map_err(|e| io_failure(out, e))?;
    write_file(out, &String::from_utf8(buf).expect("CSV is UTF-8"))
}

fn export_data(config: &ConfigArgs, out: &Path) -> Result<()> {
    let run = resolve(config)?;
    if run.data.data_dir.is_some() {
        return Err(Failure::new(CONFIG, anyhow!("export-data writes synthetic tasks; unset data_dir")));
    }
    let registry = harness::load_registry(&run)?;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    for split in [Split::Train, Split::Valid, Split::Test] {
        let mut buf = Vec::new();
        for t in registry.tasks() {
            tasks::write_jsonl(t.splits.get(split), render_synthetic, &mut buf).map_err(|e| io_failure(out, e))?;
        }
        let path = out.join(format!("{split}.jsonl"));
        write_file(&path, &String::from_utf8(buf).expect("JSONL is UTF-8"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => train(&config, &out),
        Command::Eval { checkpoint, task, split } => eval(&checkpoint, &task, &split),
        Command::Transfer {
            checkpoint,
            source,
            target,
            shots,
            seeds,
            steps,
            batch_size,
            learning_rate,
            jobs,
            out,
        } => transfer(
            &checkpoint,
            &source,
            &target,
            &shots,
            &seeds,
            steps,
            batch_size,
            learning_rate,
            jobs,
            out.as_deref(),
        ),
        Command::Audit {
            config,
            tasks,
            variants,
            formula_only,
            strict,
            format,
        } => {
            if audit(&config, tasks, &variants, formula_only, strict, format)? {
                Ok(())
            } else {
                Err(Failure::new(1, anyhow!("enumerated parameter counts disagree with the closed forms")))
            }
        }
        Command::ExportEmbeddings { checkpoint, out } => export_embeddings(&checkpoint, &out),
        Command::ExportData { config, out } => export_data(&config, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
