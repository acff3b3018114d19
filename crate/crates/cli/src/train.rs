use std::collections::VecDeque;
use std::fs::File;
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};

use an2vec::eval::{link_prediction_data, split_edges, split_nodes};
use an2vec::loss::{finite_diff_check, GradCheckReport, DEFAULT_FD_STEP};
use an2vec::model::{draw_noise, ModelConfig};
use an2vec::rng::{stream, Stream};
use an2vec::synth::FeaturedGraph;
use an2vec::train::{init_weights, train_observed, TRACE_HEADER};
use an2vec::{DenseMatrix, TrainingData};
use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{load_with_context, DataSummary};
use crate::manifest::RunRecorder;
use crate::settings::{Preset, ResolvedTrain, Task, TrainSettings};
use crate::usage;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TASK_FILE: &str = "task.json";
pub const TRACE_FILE: &str = "trace.csv";
const GRAD_CHECK_LIMIT: f64 = 1e-4;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory: generated graph, LINQS or PubMed files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// JSON file with any of the settings below; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: TrainSettings,
    /// Check gradients on a shrunken copy of the problem before training.
    #[arg(long)]
    pub grad_check: bool,
}

/// Sidecar next to a checkpoint describing what was held out, so `eval`
/// can rebuild the identical split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: Task,
    pub test_frac: f64,
    pub train_frac: f64,
    pub split_seed: u64,
    pub data: DataSummary,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let mut rec = RunRecorder::new("train", &args.out);
    let outcome = execute(args, &mut rec);
    rec.finish(outcome)
}

fn execute(args: &TrainArgs, rec: &mut RunRecorder) -> Result<()> {
    let loaded = load_with_context(&args.data)?;
    let settings = TrainSettings::layered(args.preset, args.config.as_deref(), &args.settings)?;
    let resolved =
        settings.resolve(loaded.summary.features, loaded.summary.source.default_head())?;
    rec.config = json!({
        "data": args.data,
        "preset": args.preset,
        "settings": settings,
        "resolved": resolved,
        "dataset": loaded.summary,
    });
    rec.seed = Some(resolved.train.seed);
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    if args.grad_check {
        let report = shrunken_grad_check(&loaded.graph, &resolved)?;
        let path = args.out.join("grad_check.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report_json(&report))?)?;
        rec.artifact(&path);
        eprintln!(
            "gradient check: max relative error {:.3e} over {} coordinates ({} skipped)",
            report.max_rel_error, report.checked, report.skipped
        );
        if report.max_rel_error > GRAD_CHECK_LIMIT {
            bail!(
                "gradient check failed: max relative error {:.3e} exceeds {GRAD_CHECK_LIMIT:e}; not training",
                report.max_rel_error
            );
        }
    }

    let data = task_data(&loaded.graph, &resolved)?;
    let trace_path = args.out.join(TRACE_FILE);
    rec.artifact(&trace_path);
    let mut trace = LineWriter::new(
        File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?,
    );
    writeln!(trace, "{TRACE_HEADER}")?;
    let outcome = train_observed(&data, &resolved.train, |record| {
        writeln!(trace, "{}", record.csv_row())
            .map_err(|e| an2vec::Error::io(&trace_path, e))
    })?;
    trace.flush()?;

    let checkpoint = args.out.join(CHECKPOINT_FILE);
    outcome.checkpoint(&resolved.train).save(&checkpoint)?;
    rec.artifact(&checkpoint);
    let task = TaskRecord {
        task: resolved.task,
        test_frac: resolved.test_frac,
        train_frac: resolved.train_frac,
        split_seed: resolved.split_seed,
        data: loaded.summary.clone(),
    };
    let task_path = args.out.join(TASK_FILE);
    std::fs::write(&task_path, serde_json::to_string_pretty(&task)?)?;
    rec.artifact(&task_path);

    let best = outcome.trace.best().expect("at least one epoch");
    let last = outcome.trace.final_record().expect("at least one epoch");
    println!(
        "trained {} epochs: final total {:.6}, best total {:.6} at epoch {}",
        last.epoch, last.loss.total, best.loss.total, best.epoch
    );
    Ok(())
}

/// Training data for the task: link prediction hides the test edges,
/// node classification keeps only the subgraph induced by training nodes.
pub fn task_data(graph: &FeaturedGraph, r: &ResolvedTrain) -> Result<TrainingData> {
    let head = r.train.model.head;
    Ok(match r.task {
        Task::Full => TrainingData::new(
            graph.adjacency.clone(),
            graph.features.clone(),
            head,
            &r.train.loss,
        )?,
        Task::Linkpred => {
            let split = split_edges(&graph.adjacency, r.test_frac, r.split_seed)?;
            link_prediction_data(graph, &split, head, &r.train.loss)?
        }
        Task::Nodeclass => {
            if graph.labels.is_none() {
                return Err(usage!("task nodeclass needs a labelled dataset"));
            }
            let (train_nodes, _) = split_nodes(graph.num_nodes(), r.train_frac, r.split_seed)?;
            let sub = graph.induced(&train_nodes);
            TrainingData::new(sub.adjacency, sub.features, head, &r.train.loss)?
        }
    })
}

const SHRUNK_NODES: usize = 10;
const SHRUNK_FEATURES: usize = 6;
const SHRUNK_HIDDEN: usize = 4;

/// Breadth-first ball of at most `SHRUNK_NODES` nodes around the
/// highest-degree node, keeping the `SHRUNK_FEATURES` heaviest columns.
pub fn shrink(graph: &FeaturedGraph) -> FeaturedGraph {
    let a = &graph.adjacency;
    let start = (0..a.n()).max_by_key(|&i| (a.degree(i), std::cmp::Reverse(i))).unwrap_or(0);
    let mut seen = vec![false; a.n()];
    let mut keep = Vec::new();
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        keep.push(i);
        if keep.len() == SHRUNK_NODES {
            break;
        }
        for &j in a.neighbors(i) {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    // Top up from unvisited nodes when the component is small.
    for i in 0..a.n() {
        if keep.len() >= SHRUNK_NODES.min(a.n()) {
            break;
        }
        if !seen[i] {
            seen[i] = true;
            keep.push(i);
        }
    }
    keep.sort_unstable();
    let sub = graph.induced(&keep);

    let d = sub.num_features();
    let mut weight: Vec<(usize, f64)> = (0..d)
        .map(|j| (j, (0..sub.num_nodes()).map(|i| sub.features.get(i, j).abs()).sum()))
        .collect();
    weight.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut cols: Vec<usize> = weight.iter().take(SHRUNK_FEATURES).map(|c| c.0).collect();
    cols.sort_unstable();
    let features = DenseMatrix::from_fn(sub.num_nodes(), cols.len(), |i, k| sub.features.get(i, cols[k]));
    FeaturedGraph { features, ..sub }
}

fn shrunken_grad_check(graph: &FeaturedGraph, r: &ResolvedTrain) -> Result<GradCheckReport> {
    let small = shrink(graph);
    let config = ModelConfig {
        features: small.num_features(),
        hidden_enc: SHRUNK_HIDDEN,
        hidden_dec: SHRUNK_HIDDEN,
        ..r.train.model
    };
    let data = TrainingData::new(small.adjacency, small.features, config.head, &r.train.loss)
        .context("the shrunken gradient-check graph is degenerate")?;
    let weights = init_weights(&config, r.train.seed);
    let eps = draw_noise(data.n(), config.split.total(), 2, &mut stream(r.train.seed, Stream::Noise));
    Ok(finite_diff_check(&config, &weights, &data, &eps, &r.train.loss, DEFAULT_FD_STEP)?)
}

pub fn report_json(r: &GradCheckReport) -> serde_json::Value {
    json!({
        "max_rel_error": r.max_rel_error,
        "checked": r.checked,
        "skipped": r.skipped,
        "worst": r.worst.map(|(name, idx)| json!({ "matrix": name, "index": idx })),
        "step": DEFAULT_FD_STEP,
    })
}

pub fn read_task(checkpoint: &Path) -> Result<Option<TaskRecord>> {
    let path = checkpoint.with_file_name(TASK_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    Ok(Some(
        serde_json::from_str(&text).map_err(|e| usage!("{} is invalid: {e}", path.display()))?,
    ))
}
