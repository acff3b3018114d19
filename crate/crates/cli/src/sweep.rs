//! Resumable grids. Each cell writes `cells/<key>.csv` atomically once it
//! finishes; a rerun skips every cell whose file exists, provided the grid
//! recorded in `sweep_index.json` is unchanged.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use an2vec::eval::{
    bootstrap_ci, mean_best_by_alpha, rld_gap, rld_slope, rows_to_csv, run_link_prediction,
    run_node_classification, run_study_cell, sort_rows, summarize_study, summary_to_csv,
    ClassifierConfig, ConfidenceInterval, ModelKind, StudyConfig, StudyRow, STUDY_HEADER,
};
use an2vec::rng::mix;
use an2vec::synth::FeaturedGraph;
use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::load_with_context;
use crate::manifest::RunRecorder;
use crate::settings::{Preset, ResolvedTrain, Task, TrainSettings};
use crate::usage;

pub const INDEX_FILE: &str = "sweep_index.json";
pub const LONG_FILE: &str = "study_long.csv";
pub const SUMMARY_FILE: &str = "study_summary.csv";
pub const CHECKS_FILE: &str = "study_checks.json";
const CELLS_DIR: &str = "cells";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridPreset {
    /// 100 communities, α in steps of 0.25, 20 repeats, 1000 epochs.
    Full,
    /// 50 communities, α ∈ {0, 0.5, 1}, 5 repeats, 500 epochs.
    Desk,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Grid JSON. `"kind": "overlap"` overrides fields of the preset's
    /// study; `"kind": "benchmark"` describes a dataset benchmark.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Stop after this many new cells (the rest stay pending).
    #[arg(long)]
    pub max_cells: Option<usize>,
    /// Base of an overlap grid.
    #[arg(long, value_enum)]
    pub preset: Option<GridPreset>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepIndex {
    schema_version: u32,
    grid: Value,
    cells: usize,
    completed: BTreeSet<String>,
}

/// One experiment grid, split into independently runnable cells.
trait Grid: Sync {
    fn keys(&self) -> Vec<String>;
    fn header(&self) -> &'static str;
    /// CSV rows, without header.
    fn run_cell(&self, index: usize) -> Result<Vec<String>>;
    fn finalize(&self, rows: &[String], out: &Path, rec: &mut RunRecorder) -> Result<()>;
}

pub fn run(args: &SweepArgs) -> Result<()> {
    let mut rec = RunRecorder::new("sweep", &args.out);
    let outcome = execute(args, &mut rec);
    rec.finish(outcome)
}

fn execute(args: &SweepArgs, rec: &mut RunRecorder) -> Result<()> {
    if args.jobs == 0 {
        return Err(usage!("--jobs must be at least 1"));
    }
    let spec = match &args.grid {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading grid {}", path.display()))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| usage!("grid {} is not valid JSON: {e}", path.display()))?
        }
        None => json!({ "kind": "overlap" }),
    };
    let kind = spec.get("kind").and_then(Value::as_str).map(str::to_owned);
    let (grid, fingerprint): (Box<dyn Grid>, Value) = match kind.as_deref() {
        Some("overlap") => {
            let cfg = overlap_config(args.preset, &spec)?;
            rec.seed = Some(cfg.seed);
            let fp = json!({ "kind": "overlap", "study": cfg });
            (Box::new(OverlapGrid { cfg }), fp)
        }
        Some("benchmark") => {
            if args.preset.is_some() {
                return Err(usage!("--preset applies to overlap grids only"));
            }
            let grid = BenchmarkGrid::from_spec(&spec)?;
            rec.seed = Some(grid.spec.seed);
            let fp = json!({ "kind": "benchmark", "grid": grid.spec, "cells": grid.resolved_echo() });
            (Box::new(grid), fp)
        }
        _ => return Err(usage!("grid needs \"kind\": \"overlap\" or \"benchmark\"")),
    };
    rec.config = json!({ "grid": fingerprint, "jobs": args.jobs, "max_cells": args.max_cells });
    drive(grid.as_ref(), fingerprint, args, rec)
}

fn drive(grid: &dyn Grid, fingerprint: Value, args: &SweepArgs, rec: &mut RunRecorder) -> Result<()> {
    let cells_dir = args.out.join(CELLS_DIR);
    std::fs::create_dir_all(&cells_dir)
        .with_context(|| format!("creating {}", cells_dir.display()))?;
    let keys = grid.keys();
    let index_path = args.out.join(INDEX_FILE);
    let mut index = SweepIndex {
        schema_version: 1,
        grid: fingerprint.clone(),
        cells: keys.len(),
        completed: BTreeSet::new(),
    };
    if index_path.exists() {
        let text = std::fs::read_to_string(&index_path)?;
        let previous: SweepIndex = serde_json::from_str(&text)
            .map_err(|e| usage!("{} is corrupt: {e}", index_path.display()))?;
        if previous.grid != fingerprint {
            return Err(usage!(
                "{} holds a sweep over a different grid; use a fresh --out directory",
                args.out.display()
            ));
        }
    }
    let cell_path = |key: &str| cells_dir.join(format!("{key}.csv"));
    index.completed = keys.iter().filter(|k| cell_path(k).exists()).cloned().collect();
    write_index(&index_path, &index)?;

    let pending: Vec<usize> = (0..keys.len()).filter(|&i| !index.completed.contains(&keys[i])).collect();
    let budget = args.max_cells.unwrap_or(usize::MAX).min(pending.len());
    let todo = &pending[..budget];
    eprintln!(
        "sweep: {} cells, {} already done, running {}",
        keys.len(),
        keys.len() - pending.len(),
        todo.len()
    );
    let index = Mutex::new(index);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .context("starting worker pool")?;
    pool.install(|| {
        todo.par_iter().try_for_each(|&i| -> Result<()> {
            let key = &keys[i];
            let started = Instant::now();
            let rows = grid.run_cell(i).with_context(|| format!("cell {key}"))?;
            let mut text = String::from(grid.header());
            text.push('\n');
            for r in &rows {
                text.push_str(r);
                text.push('\n');
            }
            let path = cell_path(key);
            let tmp = path.with_extension("csv.tmp");
            std::fs::write(&tmp, text)?;
            std::fs::rename(&tmp, &path)?;
            let mut idx = index.lock().expect("index lock");
            idx.completed.insert(key.clone());
            write_index(&index_path, &idx)?;
            eprintln!(
                "cell {key} done in {:.1}s ({}/{})",
                started.elapsed().as_secs_f64(),
                idx.completed.len(),
                keys.len()
            );
            Ok(())
        })
    })?;

    let index = index.into_inner().expect("index lock");
    rec.artifact(&index_path);
    if index.completed.len() < keys.len() {
        println!("{} of {} cells still pending; rerun to continue", keys.len() - index.completed.len(), keys.len());
        return Ok(());
    }
    let mut rows = Vec::new();
    for key in &keys {
        let path = cell_path(key);
        let text = std::fs::read_to_string(&path)?;
        let mut lines = text.lines();
        if lines.next() != Some(grid.header()) {
            return Err(usage!("{} has an unexpected header; delete it to rerun the cell", path.display()));
        }
        rows.extend(lines.filter(|l| !l.is_empty()).map(str::to_owned));
    }
    grid.finalize(&rows, &args.out, rec)?;
    println!("sweep complete: {} rows in {}", rows.len(), args.out.join(LONG_FILE).display());
    Ok(())
}

fn write_index(path: &Path, index: &SweepIndex) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(index)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Recursively overlays `top` onto `base`; objects merge, anything else is
/// replaced.
fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t.clone(),
    }
}

fn overlap_config(preset: Option<GridPreset>, spec: &Value) -> Result<StudyConfig> {
    let base = match preset.unwrap_or(GridPreset::Full) {
        GridPreset::Full => StudyConfig::default(),
        GridPreset::Desk => StudyConfig::desk(),
    };
    let mut merged = serde_json::to_value(base)?;
    let mut top = spec.clone();
    if let Value::Object(m) = &mut top {
        m.remove("kind");
    }
    merge(&mut merged, &top);
    let cfg: StudyConfig =
        serde_json::from_value(merged).map_err(|e| usage!("invalid overlap grid: {e}"))?;
    cfg.validate()?;
    Ok(cfg)
}

struct OverlapGrid {
    cfg: StudyConfig,
}

impl Grid for OverlapGrid {
    fn keys(&self) -> Vec<String> {
        self.cfg.cells().iter().map(|c| c.key()).collect()
    }

    fn header(&self) -> &'static str {
        STUDY_HEADER
    }

    fn run_cell(&self, index: usize) -> Result<Vec<String>> {
        let cell = self.cfg.cells()[index];
        Ok(run_study_cell(&self.cfg, cell)?.iter().map(StudyRow::csv_row).collect())
    }

    fn finalize(&self, rows: &[String], out: &Path, rec: &mut RunRecorder) -> Result<()> {
        let cfg = &self.cfg;
        let mut rows: Vec<StudyRow> =
            rows.iter().map(|l| StudyRow::parse_csv_row(l)).collect::<an2vec::Result<_>>()?;
        sort_rows(&mut rows);
        let long = out.join(LONG_FILE);
        std::fs::write(&long, rows_to_csv(&rows))?;
        rec.artifact(&long);

        let resamples = cfg.bootstrap_resamples;
        let summary = summarize_study(&rows, cfg.f_max, resamples, mix(cfg.seed, 0x5355_4d4d))?;
        let summary_path = out.join(SUMMARY_FILE);
        std::fs::write(&summary_path, summary_to_csv(&summary))?;
        rec.artifact(&summary_path);

        let checks = overlap_checks(cfg, &rows)?;
        let checks_path = out.join(CHECKS_FILE);
        std::fs::write(&checks_path, serde_json::to_string_pretty(&checks)?)?;
        rec.artifact(&checks_path);
        Ok(())
    }
}

fn ci_json(c: &ConfidenceInterval) -> Value {
    json!({ "estimate": c.estimate, "lo": c.lo, "hi": c.hi, "width": c.width() })
}

/// Trend statistics over α: per-model mean best totals, the full-overlap
/// disadvantage gap between the extreme α values, and the slope of the
/// equally narrow reference model's disadvantage.
fn overlap_checks(cfg: &StudyConfig, rows: &[StudyRow]) -> Result<Value> {
    let mut alphas = cfg.alphas.clone();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let mut models = Vec::new();
    let mut keys: Vec<(ModelKind, usize, usize)> = rows.iter().map(|r| (r.kind, r.f_total, r.f_ax)).collect();
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    keys.dedup();
    for (kind, f_total, f_ax) in keys {
        let means = mean_best_by_alpha(rows, kind, f_total, &alphas);
        let decreasing = means.windows(2).all(|w| w[1] < w[0]);
        models.push(json!({
            "kind": kind,
            "f_total": f_total,
            "f_ax": f_ax,
            "mean_best_total": means,
            "strictly_decreasing": decreasing,
        }));
    }
    let narrow = cfg.f_max / 2;
    let (lo, hi) = (alphas[0], alphas[alphas.len() - 1]);
    let resamples = cfg.bootstrap_resamples;
    let mut out = json!({ "alphas": alphas, "models": models });
    if alphas.len() >= 2 {
        let gap = rld_gap(rows, ModelKind::Overlap, narrow, cfg.f_max, lo, hi, resamples, mix(cfg.seed, 0x4741_5021))?;
        let slope = rld_slope(rows, ModelKind::Reference, narrow, cfg.f_max, &alphas, resamples, mix(cfg.seed, 0x534c_4f50))?;
        out["overlap_gap"] = json!({
            "f_total": narrow,
            "alpha_lo": lo,
            "alpha_hi": hi,
            "ci": ci_json(&gap),
            "margin_exceeds_width": gap.estimate > gap.width(),
            "lower_bound_positive": gap.lo > 0.0,
        });
        out["reference_slope"] = json!({
            "f_total": narrow,
            "ci": ci_json(&slope),
            "contains_zero": slope.contains(0.0),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Variant {
    name: String,
    #[serde(default)]
    settings: TrainSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchmarkSpec {
    kind: String,
    data: PathBuf,
    task: Task,
    #[serde(default)]
    preset: Option<Preset>,
    /// Shared by every variant; each variant's own settings win.
    #[serde(default)]
    settings: TrainSettings,
    variants: Vec<Variant>,
    /// Held-out edge fractions (linkpred) or training node fractions
    /// (nodeclass); defaults to the resolved setting.
    #[serde(default)]
    fracs: Option<Vec<f64>>,
    repeats: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_resamples")]
    bootstrap_resamples: usize,
}

fn default_resamples() -> usize {
    2000
}

struct BenchmarkGrid {
    spec: BenchmarkSpec,
    graph: FeaturedGraph,
    /// Per variant, resolved before seeds and fractions are filled in.
    base: Vec<ResolvedTrain>,
    fracs: Vec<f64>,
}

pub const BENCH_HEADER: &str = "variant,task,frac,repeat,seed,auc,ap,f1,best_total,best_epoch,parameters";
const BENCH_SUMMARY_HEADER: &str =
    "variant,task,frac,repeats,mean_auc,auc_lo,auc_hi,mean_ap,ap_lo,ap_hi,mean_f1,f1_lo,f1_hi";

impl BenchmarkGrid {
    fn from_spec(spec: &Value) -> Result<Self> {
        let spec: BenchmarkSpec = serde_json::from_value(spec.clone())
            .map_err(|e| usage!("invalid benchmark grid: {e}"))?;
        if spec.task == Task::Full {
            return Err(usage!("a benchmark grid needs task linkpred or nodeclass"));
        }
        if spec.repeats == 0 || spec.variants.is_empty() {
            return Err(usage!("a benchmark grid needs repeats >= 1 and at least one variant"));
        }
        let mut names: Vec<&str> = spec.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.is_empty() || n.contains([',', '/'])) {
            return Err(usage!("variant names must be unique, non-empty and free of ',' and '/'"));
        }
        let loaded = load_with_context(&spec.data)?;
        let head = loaded.summary.source.default_head();
        let base = spec
            .variants
            .iter()
            .map(|v| {
                let flags = spec.settings.overlay(&v.settings);
                let s = TrainSettings::layered(spec.preset, None, &flags)?;
                let mut r = s.resolve(loaded.summary.features, head)?;
                r.task = spec.task;
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        let fracs = match &spec.fracs {
            Some(f) if !f.is_empty() => f.clone(),
            Some(_) => return Err(usage!("fracs must not be empty")),
            None => vec![match spec.task {
                Task::Linkpred => base[0].test_frac,
                _ => base[0].train_frac,
            }],
        };
        if let Some(f) = fracs.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return Err(usage!("fractions must lie in (0, 1), got {f}"));
        }
        Ok(BenchmarkGrid { spec, graph: loaded.graph, base, fracs })
    }

    fn resolved_echo(&self) -> Value {
        json!(self.base)
    }

    fn cell(&self, index: usize) -> (usize, usize, usize) {
        let per_variant = self.fracs.len() * self.spec.repeats;
        let v = index / per_variant;
        let rest = index % per_variant;
        (v, rest / self.spec.repeats, rest % self.spec.repeats)
    }

    /// Training and split seeds of a repeat, shared by all variants and
    /// fractions so comparisons between them are paired.
    fn seeds(&self, repeat: usize) -> (u64, u64) {
        let train = mix(self.spec.seed, repeat as u64);
        (train, mix(train, 0x7370_6c74))
    }
}

impl Grid for BenchmarkGrid {
    fn keys(&self) -> Vec<String> {
        let n = self.spec.variants.len() * self.fracs.len() * self.spec.repeats;
        (0..n)
            .map(|i| {
                let (v, f, r) = self.cell(i);
                format!("{}-f{f}-r{r}", self.spec.variants[v].name)
            })
            .collect()
    }

    fn header(&self) -> &'static str {
        BENCH_HEADER
    }

    fn run_cell(&self, index: usize) -> Result<Vec<String>> {
        let (v, f, r) = self.cell(index);
        let (train_seed, split_seed) = self.seeds(r);
        let mut cfg = self.base[v].train;
        cfg.seed = train_seed;
        let frac = self.fracs[f];
        let (auc, ap, f1, outcome) = match self.spec.task {
            Task::Linkpred => {
                let (m, o) = run_link_prediction(&self.graph, &cfg, frac, split_seed)?;
                (Some(m.auc), Some(m.ap), None, o)
            }
            _ => {
                let (f1, o) = run_node_classification(
                    &self.graph,
                    &cfg,
                    frac,
                    split_seed,
                    &ClassifierConfig::default(),
                )?;
                (None, None, Some(f1), o)
            }
        };
        let best = outcome.trace.best().expect("at least one epoch");
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        let task = serde_json::to_value(self.spec.task)?;
        Ok(vec![format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.spec.variants[v].name,
            task.as_str().unwrap_or_default(),
            frac,
            r,
            train_seed,
            opt(auc),
            opt(ap),
            opt(f1),
            best.loss.total,
            best.epoch,
            cfg.model.parameter_count()
        )])
    }

    fn finalize(&self, rows: &[String], out: &Path, rec: &mut RunRecorder) -> Result<()> {
        let long = out.join(LONG_FILE);
        let mut text = format!("{BENCH_HEADER}\n");
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        std::fs::write(&long, text)?;
        rec.artifact(&long);

        let parsed: Vec<Vec<&str>> = rows.iter().map(|r| r.split(',').collect()).collect();
        let mut summary = format!("{BENCH_SUMMARY_HEADER}\n");
        let mut groups = 0u64;
        for variant in &self.spec.variants {
            for &frac in &self.fracs {
                let group: Vec<&Vec<&str>> = parsed
                    .iter()
                    .filter(|p| p[0] == variant.name && p[2].parse::<f64>().ok() == Some(frac))
                    .collect();
                let mut cols = Vec::new();
                for c in [5, 6, 7] {
                    let vals: Vec<f64> = group.iter().filter_map(|p| p[c].parse().ok()).collect();
                    cols.push(if vals.is_empty() {
                        ",,".to_string()
                    } else {
                        let ci = bootstrap_ci(vals.len(), self.spec.bootstrap_resamples, mix(self.spec.seed, groups), |idx| {
                            idx.iter().map(|&k| vals[k]).sum::<f64>() / idx.len() as f64
                        })?;
                        format!("{},{},{}", ci.estimate, ci.lo, ci.hi)
                    });
                }
                groups += 1;
                let task = group.first().map_or("", |p| p[1]);
                summary.push_str(&format!(
                    "{},{},{},{},{}\n",
                    variant.name,
                    task,
                    frac,
                    group.len(),
                    cols.join(",")
                ));
            }
        }
        let summary_path = out.join(SUMMARY_FILE);
        std::fs::write(&summary_path, summary)?;
        rec.artifact(&summary_path);
        Ok(())
    }
}
