use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use an2vec::eval::{
    node_classification, ranking_metrics, score_edges, split_edges, split_nodes, ClassifierConfig,
};
use an2vec::model::{embed_mean, Checkpoint};
use an2vec::DenseMatrix;
use anyhow::Result;
use clap::Args;
use serde_json::{json, Value};

use crate::data::load_with_context;
use crate::manifest::RunRecorder;
use crate::settings::Task;
use crate::train::read_task;
use crate::usage;

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the task the checkpoint was trained for.
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long)]
    pub test_frac: Option<f64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the mean embedding of every node to embeddings.csv.
    #[arg(long)]
    pub export_embeddings: bool,
}

pub const METRICS_FILE: &str = "metrics.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

pub fn run(args: &EvalArgs) -> Result<()> {
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let mut rec = RunRecorder::new("eval", &out);
    let outcome = execute(args, &out, &mut rec);
    rec.finish(outcome)
}

/// A flag may restate the training-time value but not contradict it.
fn agree<T: PartialEq + std::fmt::Debug + Copy>(
    name: &str,
    flag: Option<T>,
    recorded: Option<T>,
    fallback: T,
) -> Result<T> {
    match (flag, recorded) {
        (Some(f), Some(r)) if f != r => Err(usage!(
            "--{name} {f:?} contradicts the checkpoint's training run ({r:?})"
        )),
        (Some(f), _) => Ok(f),
        (None, Some(r)) => Ok(r),
        (None, None) => Ok(fallback),
    }
}

fn execute(args: &EvalArgs, out: &Path, rec: &mut RunRecorder) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let loaded = load_with_context(&args.data)?;
    let graph = &loaded.graph;
    let recorded = read_task(&args.checkpoint)?;

    if ck.config.features != graph.num_features() {
        return Err(usage!(
            "checkpoint expects {} feature columns but the dataset has {}",
            ck.config.features,
            graph.num_features()
        ));
    }
    if let Some(r) = &recorded {
        if r.data.nodes != loaded.summary.nodes || r.data.edges != loaded.summary.edges {
            return Err(usage!(
                "checkpoint was trained on a dataset with {} nodes and {} edges, this one has {} and {}",
                r.data.nodes,
                r.data.edges,
                loaded.summary.nodes,
                loaded.summary.edges
            ));
        }
    }
    let task = agree("task", args.task, recorded.as_ref().map(|r| r.task), Task::Full)?;
    let test_frac = agree("test-frac", args.test_frac, recorded.as_ref().map(|r| r.test_frac), 0.15)?;
    let train_frac =
        agree("train-frac", args.train_frac, recorded.as_ref().map(|r| r.train_frac), 0.5)?;
    let split_seed = agree(
        "split-seed",
        args.split_seed,
        recorded.as_ref().map(|r| r.split_seed),
        ck.seeds.master,
    )?;
    rec.config = json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "task": task,
        "test_frac": test_frac,
        "train_frac": train_frac,
        "split_seed": split_seed,
        "export_embeddings": args.export_embeddings,
    });
    rec.seed = Some(split_seed);
    std::fs::create_dir_all(out)?;

    let (metrics, embeddings) = match task {
        Task::Full => {
            if !args.export_embeddings {
                return Err(usage!(
                    "nothing to evaluate: the checkpoint saw the whole graph; pass --task linkpred or nodeclass with a matching checkpoint, or --export-embeddings"
                ));
            }
            let mu = embed_mean(&ck.weights, &ck.config, &graph.features, &graph.adjacency.normalize())?;
            (json!({ "task": task }), mu)
        }
        Task::Linkpred => {
            let split = split_edges(&graph.adjacency, test_frac, split_seed)?;
            let (scores, labels) = score_edges(&ck.config, &ck.weights, &graph.features, &split)?;
            let r = ranking_metrics(&scores, &labels)?;
            let mu = embed_mean(
                &ck.weights,
                &ck.config,
                &graph.features,
                &split.train_adjacency.normalize(),
            )?;
            let m = json!({
                "task": task,
                "test_frac": test_frac,
                "split_seed": split_seed,
                "test_edges": split.test_pos.len(),
                "test_non_edges": split.test_neg.len(),
                "auc": r.auc,
                "ap": r.ap,
            });
            (m, mu)
        }
        Task::Nodeclass => {
            let labels = graph
                .labels
                .as_ref()
                .ok_or_else(|| usage!("task nodeclass needs a labelled dataset"))?;
            let (train_nodes, test_nodes) = split_nodes(graph.num_nodes(), train_frac, split_seed)?;
            let mu = embed_mean(&ck.weights, &ck.config, &graph.features, &graph.adjacency.normalize())?;
            let f1 = node_classification(&mu, labels, &train_nodes, &test_nodes, &ClassifierConfig::default())?;
            let m = json!({
                "task": task,
                "train_frac": train_frac,
                "split_seed": split_seed,
                "train_nodes": train_nodes.len(),
                "test_nodes": test_nodes.len(),
                "f1": f1,
            });
            (m, mu)
        }
    };

    if task != Task::Full {
        let path = out.join(METRICS_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&metrics)?)?;
        rec.artifact(&path);
        println!("{}", compact(&metrics));
    }
    if args.export_embeddings {
        let path = out.join(EMBEDDINGS_FILE);
        std::fs::write(&path, embeddings_csv(&embeddings))?;
        rec.artifact(&path);
    }
    Ok(())
}

fn compact(v: &Value) -> String {
    serde_json::to_string(v).unwrap_or_default()
}

pub fn embeddings_csv(mu: &DenseMatrix) -> String {
    let mut s = String::new();
    let header: Vec<String> = (0..mu.cols()).map(|j| format!("mu{j}")).collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for i in 0..mu.rows() {
        let row: Vec<String> = mu.row(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}
