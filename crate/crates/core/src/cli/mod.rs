// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `eapgp` command line.
//!
//! ```text
//! eapgp [--config run.json] <train|discover|sweep|saturate|compare|edge-count|export-dot> [flags]
//! ```
//!
//! A JSON config file maps flag names (without dashes) to values and stands
//! in for flags; flags given on the command line win. Output directories
//! default to `$EAPGP_OUTPUT_ROOT`, else `out`. Invalid flags exit with code
//! 2, runtime failures with code 1.

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::attribution::{
    edge_scores, input_path, run_pipeline, saturation_profile, write_path_diagnostics, GradPoint,
    Method, PathMode, PathSpec, PipelineOutput, StepRule, TransformerObjective,
};
use crate::autodiff::Float;
use crate::error::{Error, Result};
use crate::evaluation::{
    edges_for_sparsity, faithfulness_sweep, write_sweep_csv, FaithfulnessReport,
    DEFAULT_SPARSITY_LEVELS,
};
use crate::graph::{
    circuit_from_json, circuit_to_json, edge_count_formula, precision_recall, to_dot, Circuit,
    CircuitFile, ComputationalGraph,
};
use crate::model::{
    answer_accuracy, load_checkpoint, save_checkpoint, train_toy, Model, ModelConfig,
    NormPlacement, Positions, TrainConfig,
};
use crate::seed::split_seed;
use crate::tasks::{read_jsonl, TaskBatch, TaskKind};

#[derive(Debug, Parser)]
#[command(
    name = "eapgp",
    version,
    about = "Edge attribution and circuit discovery on tiny transformers"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// JSON file of default flag values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a toy model on a task generator and write a checkpoint.
    Train(TrainArgs),
    /// Score edges, extract a circuit, and evaluate it.
    Discover(DiscoverArgs),
    /// Faithfulness at a list of sparsity levels.
    Sweep(SweepArgs),
    /// Per-step, per-channel gradient norms along the Input-space path.
    Saturate(SaturateArgs),
    /// Edge and node precision/recall of a candidate against a reference.
    Compare(CompareArgs),
    /// Number of edges in the graph of an L-layer, H-head model.
    EdgeCount(EdgeCountArgs),
    /// Graphviz rendering of a circuit, or of a whole graph.
    ExportDot(ExportDotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "EAPGP_OUTPUT_ROOT", default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    /// Built-in generator: induction, greater-than, ioi.
    #[arg(long, default_value = "induction", conflicts_with = "data")]
    pub task: TaskKind,
    /// JSONL task file instead of a generator.
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Examples drawn from the generator.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl TaskArgs {
    pub fn load(&self) -> Result<TaskBatch> {
        match &self.data {
            Some(path) => {
                let name = path
                    .file_stem()
                    .map_or("jsonl".into(), |s| s.to_string_lossy().into_owned());
                read_jsonl(BufReader::new(fs::File::open(path)?), &name)
            }
            None => self
                .task
                .generate(split_seed(self.seed, "task"), self.batch),
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    #[arg(long, default_value = "eap-gp")]
    pub method: Method,
    /// Path points (ignored by eap).
    #[arg(long, short = 'k', visible_alias = "steps", default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value = "literal_unit")]
    pub step_rule: StepRule,
    /// Point at which eap takes its single gradient: clean or corrupted.
    #[arg(long, default_value = "clean")]
    pub grad_point: GradPoint,
    /// shared or per_node.
    #[arg(long, default_value = "shared")]
    pub path_mode: PathMode,
    /// Positions in the GradPath objective: all or final.
    #[arg(long, default_value = "all")]
    pub objective_positions: Positions,
}

impl MethodArgs {
    pub fn spec(&self) -> PathSpec {
        PathSpec {
            k: self.k,
            step_rule: self.step_rule,
            objective_positions: self.objective_positions,
            grad_point: self.grad_point,
            path_mode: self.path_mode,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Checkpoint file name inside the output directory.
    #[arg(long, default_value = "model.eapg")]
    pub name: String,
    #[arg(long, default_value_t = 2000)]
    pub train_steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 16)]
    pub d_head: usize,
    #[arg(long, default_value_t = 64)]
    pub d_mlp: usize,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Edges to keep.
    #[arg(
        long,
        conflicts_with = "sparsity",
        required_unless_present = "sparsity"
    )]
    pub top_n: Option<usize>,
    /// Fraction of edges to drop.
    #[arg(long)]
    pub sparsity: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Comma-separated sparsity levels.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SPARSITY_LEVELS.to_vec())]
    pub sparsity: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SaturateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Relative threshold below which a gradient counts as saturated.
    #[arg(long, default_value_t = 0.05)]
    pub eps: f64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub candidate: PathBuf,
    pub reference: PathBuf,
}

#[derive(Debug, Args)]
pub struct EdgeCountArgs {
    #[arg(long)]
    pub layers: usize,
    #[arg(long)]
    pub heads: usize,
}

#[derive(Debug, Args)]
pub struct ExportDotArgs {
    /// Circuit JSON; its graph is drawn with the circuit highlighted.
    #[arg(long, value_name = "FILE", required_unless_present_all = ["layers", "heads"])]
    pub circuit: Option<PathBuf>,
    #[arg(long, conflicts_with = "circuit", requires = "heads")]
    pub layers: Option<usize>,
    #[arg(long, conflicts_with = "circuit", requires = "layers")]
    pub heads: Option<usize>,
    /// Write here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Parse `args` (program name first), filling unset flags from `--config`.
pub fn parse<I, T>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let Some(path) = config_path(&args) else {
        return Cli::try_parse_from(&args);
    };
    let defaults = config_flags(&path).map_err(|e| {
        clap::Error::raw(
            clap::error::ErrorKind::ValueValidation,
            format!("config {}: {e}\n", path.display()),
        )
    })?;
    // Config flags go right after the subcommand so later command-line
    // occurrences override them.
    let sub = args
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-') && is_subcommand(a))
        .map_or(1, |i| i + 2);
    let mut merged = args[..sub].to_vec();
    merged.extend(defaults);
    merged.extend_from_slice(&args[sub..]);
    Cli::try_parse_from(merged)
}

/// `--config` is read before parsing so the file can supply required flags.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn is_subcommand(a: &OsString) -> bool {
    use clap::CommandFactory;
    let a = a.to_string_lossy();
    Cli::command().get_subcommands().any(|c| c.get_name() == a)
}

fn config_flags(path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path)?;
    let Value::Object(map) = serde_json::from_str(&text)? else {
        return Err(Error::InvalidArgument(
            "config must be a JSON object".into(),
        ));
    };
    let mut out = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::String(s) => out.extend([flag.into(), s.into()]),
            Value::Number(n) => out.extend([flag.into(), n.to_string().into()]),
            Value::Array(items) => {
                let joined: Vec<String> = items
                    .iter()
                    .map(|v| match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                out.extend([flag.into(), joined.join(",").into()]);
            }
            Value::Object(_) => {
                return Err(Error::InvalidArgument(format!(
                    "config key `{key}` has an object value"
                )))
            }
        }
    }
    Ok(out)
}

/// Parse the process arguments, run, and return the exit code.
pub fn main_from_env() -> i32 {
    let cli = match parse(std::env::args_os()) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return 0;
            }
            if !e.render().to_string().contains("Usage:") {
                use clap::CommandFactory;
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return 2;
        }
    };
    let stdout = std::io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Execute a parsed command, printing a short summary to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Discover(a) => with_precision(&a.model, |m| cmd_discover(a, m, out)),
        Command::Sweep(a) => with_precision(&a.model, |m| cmd_sweep(a, m, out)),
        Command::Saturate(a) => with_precision(&a.model, |m| cmd_saturate(a, m, out)),
        Command::Compare(a) => cmd_compare(a, out),
        Command::EdgeCount(a) => {
            writeln!(out, "{}", edge_count_formula(a.layers, a.heads))?;
            Ok(())
        }
        Command::ExportDot(a) => cmd_export_dot(a, out),
    }
}

fn with_precision(args: &ModelArgs, f: impl FnOnce(&dyn AnyModel) -> Result<()>) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    match args.precision {
        Precision::F32 => f(&ModelRef(&model)),
        Precision::F64 => f(&ModelRef(&model.cast::<f64>())),
    }
}

/// Commands written once against whichever float type was requested.
trait AnyModel {
    fn pipeline(
        &self,
        batch: &TaskBatch,
        method: Method,
        spec: &PathSpec,
        n: usize,
    ) -> Result<PipelineOutput>;
    fn graph(&self) -> &ComputationalGraph;
    fn sweep(
        &self,
        batch: &TaskBatch,
        method: Method,
        spec: &PathSpec,
        levels: &[f64],
    ) -> Result<Vec<FaithfulnessReport>>;
    fn saturate(
        &self,
        batch: &TaskBatch,
        method: Method,
        spec: &PathSpec,
        eps: f64,
        w: &mut dyn Write,
    ) -> Result<f64>;
}

struct ModelRef<'a, F: Float>(&'a Model<F>);

impl<F: Float> AnyModel for ModelRef<'_, F> {
    fn pipeline(
        &self,
        batch: &TaskBatch,
        method: Method,
        spec: &PathSpec,
        n: usize,
    ) -> Result<PipelineOutput> {
        run_pipeline(self.0, batch, method, spec, n)
    }

    fn graph(&self) -> &ComputationalGraph {
        self.0.graph()
    }

    fn sweep(
        &self,
        batch: &TaskBatch,
        method: Method,
        spec: &PathSpec,
        levels: &[f64],
    ) -> Result<Vec<FaithfulnessReport>> {
        let graph = self.0.graph();
        let scores = edge_scores(self.0, batch, method, spec)?;
        faithfulness_sweep(
            self.0,
            graph,
            &scores.scores,
            &scores.provenance(graph, 0),
            levels,
            batch,
        )
    }

    fn saturate(
        &self,
        batch: &TaskBatch,
        method: Method,
        spec: &PathSpec,
        eps: f64,
        w: &mut dyn Write,
    ) -> Result<f64> {
        let path = input_path(self.0, batch, method, spec)?;
        let objective = TransformerObjective {
            model: self.0,
            tokens: &batch.clean,
            metrics: &batch.metrics,
            node: 0,
            positions: spec.objective_positions,
        };
        let profile = saturation_profile(&objective, &path, eps)?;
        write_path_diagnostics(w, &path, &profile)?;
        Ok(profile.saturated_fraction)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_timing(dir: &Path, command: &str, start: Instant) -> Result<()> {
    let timing =
        serde_json::json!({ "command": command, "wall_time_s": start.elapsed().as_secs_f64() });
    fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&timing)? + "\n",
    )?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    if a.task.data.is_some() {
        return Err(Error::InvalidArgument(
            "train draws batches from a generator; --data is not supported".into(),
        ));
    }
    let task = a.task.task;
    let config = ModelConfig {
        n_layers: a.layers,
        n_heads: a.heads,
        d_model: a.d_model,
        d_head: a.d_head,
        d_mlp: a.d_mlp,
        vocab_size: task.vocab_size(),
        max_seq_len: task.seq_len(),
        norm_placement: NormPlacement::PreNorm,
        seed: a.task.seed,
        linear: false,
    };
    let mut model = Model::<f32>::new(config)?;
    let train = TrainConfig {
        steps: a.train_steps,
        lr: a.lr,
        ..TrainConfig::default()
    };
    let data_seed = split_seed(a.task.seed, "train");
    let report = train_toy(
        &mut model,
        |step| task.generate(data_seed.wrapping_add(step as u64), a.task.batch),
        &train,
    )?;
    let held_out = task.generate(split_seed(a.task.seed, "held-out"), 512)?;
    let accuracy = answer_accuracy(&model, &held_out)?;
    create_dir(&a.out.out_dir)?;
    let path = a.out.out_dir.join(&a.name);
    save_checkpoint(&path, &model)?;
    write_timing(&a.out.out_dir, "train", start)?;
    writeln!(
        out,
        "final loss {:.4}, held-out accuracy {accuracy:.4}, wrote {}",
        report.losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    )?;
    Ok(())
}

fn cmd_discover(a: &DiscoverArgs, model: &dyn AnyModel, out: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    let batch = a.task.load()?;
    let n = match (a.top_n, a.sparsity) {
        (Some(n), _) => n,
        (None, Some(level)) if (0.0..=1.0).contains(&level) => {
            edges_for_sparsity(model.graph().n_edges(), level)
        }
        (None, Some(level)) => {
            return Err(Error::InvalidArgument(format!(
                "sparsity {level} outside [0, 1]"
            )))
        }
        (None, None) => {
            return Err(Error::InvalidArgument(
                "one of --top-n or --sparsity is required".into(),
            ))
        }
    };
    let result = model.pipeline(&batch, a.method.method, &a.method.spec(), n)?;
    let dir = &a.out.out_dir;
    create_dir(dir)?;
    let graph = model.graph();
    fs::write(
        dir.join("circuit.json"),
        circuit_to_json(graph, &result.circuit).to_json_string()?,
    )?;
    result
        .scores
        .write_csv(fs::File::create(dir.join("scores.csv"))?, graph)?;
    let mut report = serde_json::to_value(&result.report)?;
    if let Value::Object(m) = &mut report {
        m.remove("wall_time_s");
    }
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    write_timing(dir, "discover", start)?;
    writeln!(
        out,
        "{} edges selected, {} after pruning, NFS {:.4}",
        result.report.n_edges_selected, result.report.n_edges_after_prune, result.report.nfs
    )?;
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, model: &dyn AnyModel, out: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    let batch = a.task.load()?;
    let rows = model.sweep(&batch, a.method.method, &a.method.spec(), &a.sparsity)?;
    create_dir(&a.out.out_dir)?;
    write_sweep_csv(fs::File::create(a.out.out_dir.join("sweep.csv"))?, &rows)?;
    write_timing(&a.out.out_dir, "sweep", start)?;
    for r in &rows {
        writeln!(
            out,
            "sparsity {:<6} edges {:>5} NFS {:.4}",
            r.sparsity, r.n_edges_after_prune, r.nfs
        )?;
    }
    Ok(())
}

fn cmd_saturate(a: &SaturateArgs, model: &dyn AnyModel, out: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    let batch = a.task.load()?;
    create_dir(&a.out.out_dir)?;
    let file = fs::File::create(a.out.out_dir.join("diagnostics.csv"))?;
    let fraction = model.saturate(
        &batch,
        a.method.method,
        &a.method.spec(),
        a.eps,
        &mut std::io::BufWriter::new(file),
    )?;
    write_timing(&a.out.out_dir, "saturate", start)?;
    writeln!(out, "saturated fraction {fraction:.4}")?;
    Ok(())
}

fn read_circuit(path: &Path) -> Result<(ComputationalGraph, Circuit)> {
    circuit_from_json(&CircuitFile::from_json_str(&fs::read_to_string(path)?)?)
}

fn cmd_compare(a: &CompareArgs, out: &mut dyn Write) -> Result<()> {
    let (graph, candidate) = read_circuit(&a.candidate)?;
    let (_, reference) = read_circuit(&a.reference)?;
    let pr = precision_recall(&graph, &candidate, &reference)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&pr)?)?;
    Ok(())
}

fn cmd_export_dot(a: &ExportDotArgs, out: &mut dyn Write) -> Result<()> {
    let dot = match (&a.circuit, a.layers, a.heads) {
        (Some(path), _, _) => {
            let (graph, circuit) = read_circuit(path)?;
            to_dot(&graph, Some(&circuit))
        }
        (None, Some(l), Some(h)) => to_dot(&ComputationalGraph::new(l, h), None),
        _ => {
            return Err(Error::InvalidArgument(
                "need --circuit or both --layers and --heads".into(),
            ))
        }
    };
    match &a.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            fs::write(path, dot)?;
        }
        None => out.write_all(dot.as_bytes())?,
    }
    Ok(())
}
