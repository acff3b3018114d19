//! Evaluation protocols: held-out edge ranking, node classification on
//! embeddings, and the overlap-versus-reference loss comparison.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseAdjacency;
use crate::loss::{LossConfig, TrainingData};
use crate::matrix::DenseMatrix;
use crate::model::{
    embed_mean, score_pairs, AdjacencyDecoder, DimensionSplit, FeatureHead, ModelConfig,
    ModelWeights,
};
use crate::rng::{self, mix, Stream};
use crate::synth::{generate_featured, FeatureConfig, FeaturedGraph, SbmConfig};
use crate::train::{train, TrainConfig, TrainOutcome};

// ---------------------------------------------------------------------------
// Link prediction

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSplit {
    pub train_adjacency: SparseAdjacency,
    /// Held-out edges, `i < j`.
    pub test_pos: Vec<(usize, usize)>,
    /// Sampled non-edges of the original graph, `i < j`.
    pub test_neg: Vec<(usize, usize)>,
}

/// Moves `round(test_frac · |E|)` edges to the test set and pairs them with
/// as many distinct non-edges, both drawn uniformly.
pub fn split_edges(a: &SparseAdjacency, test_frac: f64, seed: u64) -> Result<EdgeSplit> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::Config(format!("test_frac must lie in (0, 1), got {test_frac}")));
    }
    let n = a.n();
    let count = (test_frac * a.num_edges() as f64).round() as usize;
    let total_pairs = n * n.saturating_sub(1) / 2;
    let available = total_pairs - a.num_edges();
    if count > available {
        return Err(Error::NotEnoughNonEdges {
            requested: count,
            available,
        });
    }
    let mut rng = rng::stream(seed, Stream::Split);
    let mut picked: Vec<usize> = index::sample(&mut rng, a.num_edges(), count).into_vec();
    picked.sort_unstable();
    let test_pos: Vec<_> = picked.iter().map(|&k| a.edges()[k]).collect();

    let test_neg = if available < 4 * count {
        // Dense graph: enumerate the complement instead of rejecting.
        let complement: Vec<_> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !a.has_edge(i, j))
            .collect();
        let mut idx = index::sample(&mut rng, complement.len(), count).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| complement[k]).collect()
    } else {
        let mut seen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            let pair = (i.min(j), i.max(j));
            if !a.has_edge(pair.0, pair.1) && seen.insert(pair) {
                out.push(pair);
            }
        }
        out
    };
    Ok(EdgeSplit {
        train_adjacency: a.without_edges(&test_pos),
        test_pos,
        test_neg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub auc: f64,
    pub ap: f64,
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("auc needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| scores[x].total_cmp(&scores[y]));
    // Sum of (1-based, tie-averaged) ranks of the positives, kept in half
    // units so it stays an exact integer.
    let mut rank_sum_x2: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let mid_x2 = (start + 1 + end + 1) as u64;
        let tied_pos = order[start..=end].iter().filter(|&&k| labels[k]).count() as u64;
        rank_sum_x2 += mid_x2 * tied_pos;
        start = end + 1;
    }
    let (p, q) = (pos as u64, neg as u64);
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * p * q) as f64)
}

/// Mean precision at the rank of each positive, walking scores in
/// descending order with ties broken by ascending index.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("average_precision", scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::Metric("average precision needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps ascending index among equal scores.
    order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// Scores of `test_pos` followed by `test_neg`, decoded at `ξ = μ` from an
/// encoding over the training adjacency and the full feature matrix.
pub fn score_edges(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    features: &DenseMatrix,
    split: &EdgeSplit,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let a_hat = split.train_adjacency.normalize();
    let mu = embed_mean(weights, cfg, features, &a_hat)?;
    let pairs: Vec<_> = split.test_pos.iter().chain(&split.test_neg).copied().collect();
    let scores = score_pairs(cfg, weights, &mu, &pairs)?;
    let labels = (0..pairs.len()).map(|k| k < split.test_pos.len()).collect();
    Ok((scores, labels))
}

pub fn ranking_metrics(scores: &[f64], labels: &[bool]) -> Result<RankingResult> {
    Ok(RankingResult {
        auc: auc(scores, labels)?,
        ap: average_precision(scores, labels)?,
    })
}

/// Training data for the link-prediction protocol: the encoder and the
/// reconstruction target both use the training adjacency.
pub fn link_prediction_data(
    graph: &FeaturedGraph,
    split: &EdgeSplit,
    head: FeatureHead,
    loss: &LossConfig,
) -> Result<TrainingData> {
    TrainingData::new(split.train_adjacency.clone(), graph.features.clone(), head, loss)
}

/// Split, train on the remainder, and rank the held-out pairs.
pub fn run_link_prediction(
    graph: &FeaturedGraph,
    cfg: &TrainConfig,
    test_frac: f64,
    split_seed: u64,
) -> Result<(RankingResult, TrainOutcome)> {
    let split = split_edges(&graph.adjacency, test_frac, split_seed)?;
    let data = link_prediction_data(graph, &split, cfg.model.head, &cfg.loss)?;
    let outcome = train(&data, cfg)?;
    let (scores, labels) = score_edges(&cfg.model, &outcome.weights, &graph.features, &split)?;
    Ok((ranking_metrics(&scores, &labels)?, outcome))
}

// ---------------------------------------------------------------------------
// Node classification

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub l2_strength: f64,
    pub max_iterations: usize,
    /// Stop once the largest gradient entry falls below this.
    pub tolerance: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            l2_strength: 1.0,
            max_iterations: 1000,
            tolerance: 1e-6,
        }
    }
}

/// One-vs-rest L2 logistic regression; row `c` of `weights` holds class
/// `c`'s coefficients with the intercept last.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticOvR {
    pub weights: DenseMatrix,
}

impl LogisticOvR {
    /// Minimizes, per class, mean log-loss plus `l2 / (2n) · ‖w‖²` (the
    /// intercept is not penalized) by gradient descent with step `1/L`.
    pub fn fit(x: &DenseMatrix, y: &[usize], classes: usize, cfg: &ClassifierConfig) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dim("LogisticOvR::fit", x.rows(), y.len()));
        }
        if x.rows() == 0 {
            return Err(Error::Metric("classifier needs training rows"));
        }
        if cfg.l2_strength < 0.0 {
            return Err(Error::Config("l2_strength must be nonnegative".into()));
        }
        let (n, d) = (x.rows(), x.cols());
        let nf = n as f64;
        let max_sq = (0..n)
            .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>() + 1.0)
            .fold(0.0, f64::max);
        let lipschitz = 0.25 * max_sq + cfg.l2_strength / nf;
        let step = 1.0 / lipschitz;
        let mut weights = DenseMatrix::zeros(classes, d + 1);
        let mut grad = vec![0.0; d + 1];
        for c in 0..classes {
            let w = weights.row_mut(c);
            for _ in 0..cfg.max_iterations {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for i in 0..n {
                    let xi = x.row(i);
                    let z = w[d] + xi.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>();
                    let r = crate::model::sigmoid(z) - (y[i] == c) as u8 as f64;
                    for (g, &v) in grad[..d].iter_mut().zip(xi) {
                        *g += r * v;
                    }
                    grad[d] += r;
                }
                for (g, &wk) in grad[..d].iter_mut().zip(&w[..d]) {
                    *g = *g / nf + cfg.l2_strength / nf * wk;
                }
                grad[d] /= nf;
                if grad.iter().all(|g| g.abs() < cfg.tolerance) {
                    break;
                }
                for (wk, g) in w.iter_mut().zip(&grad) {
                    *wk -= step * g;
                }
            }
        }
        Ok(LogisticOvR { weights })
    }

    /// Highest decision value wins; ties go to the lowest class.
    pub fn predict(&self, x: &DenseMatrix) -> Vec<usize> {
        let d = self.weights.cols() - 1;
        (0..x.rows())
            .map(|i| {
                let xi = x.row(i);
                let mut best = (0, f64::NEG_INFINITY);
                for c in 0..self.weights.rows() {
                    let w = self.weights.row(c);
                    let z = w[d] + xi.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>();
                    if z > best.1 {
                        best = (c, z);
                    }
                }
                best.0
            })
            .collect()
    }
}

/// Micro-averaged F1 (equal to accuracy for single-label prediction).
pub fn micro_f1(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::dim("micro_f1", truth.len(), predicted.len()));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Fits the classifier on `train_nodes` rows and scores `test_nodes`.
pub fn node_classification(
    embeddings: &DenseMatrix,
    labels: &[usize],
    train_nodes: &[usize],
    test_nodes: &[usize],
    cfg: &ClassifierConfig,
) -> Result<f64> {
    if labels.len() != embeddings.rows() {
        return Err(Error::dim("node_classification", embeddings.rows(), labels.len()));
    }
    let train_set: HashSet<_> = train_nodes.iter().copied().collect();
    if test_nodes.iter().any(|t| train_set.contains(t)) {
        return Err(Error::Config("train and test nodes overlap".into()));
    }
    let classes = train_nodes
        .iter()
        .chain(test_nodes)
        .map(|&i| labels[i] + 1)
        .max()
        .unwrap_or(0);
    let mut present = vec![false; classes];
    for &i in train_nodes {
        present[labels[i]] = true;
    }
    if let Some(c) = present.iter().position(|&p| !p) {
        return Err(Error::ClassAbsent(c));
    }
    let rows = |nodes: &[usize]| {
        let mut m = DenseMatrix::zeros(nodes.len(), embeddings.cols());
        for (k, &i) in nodes.iter().enumerate() {
            m.row_mut(k).copy_from_slice(embeddings.row(i));
        }
        m
    };
    let y_train: Vec<_> = train_nodes.iter().map(|&i| labels[i]).collect();
    let clf = LogisticOvR::fit(&rows(train_nodes), &y_train, classes, cfg)?;
    let predicted = clf.predict(&rows(test_nodes));
    let truth: Vec<_> = test_nodes.iter().map(|&i| labels[i]).collect();
    micro_f1(&predicted, &truth)
}

/// Random disjoint node split with `round(train_frac · N)` training nodes,
/// both halves sorted.
pub fn split_nodes(n: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train_frac must lie in (0, 1), got {train_frac}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Split));
    let cut = (train_frac * n as f64).round() as usize;
    let mut train = order[..cut].to_vec();
    let mut test = order[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Trains on the subgraph induced by the training nodes, embeds the full
/// graph, and classifies the held-out nodes from their `μ` rows.
pub fn run_node_classification(
    graph: &FeaturedGraph,
    cfg: &TrainConfig,
    train_frac: f64,
    split_seed: u64,
    clf: &ClassifierConfig,
) -> Result<(f64, TrainOutcome)> {
    let labels = graph
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("node classification needs labels".into()))?;
    let (train_nodes, test_nodes) = split_nodes(graph.num_nodes(), train_frac, split_seed)?;
    let sub = graph.induced(&train_nodes);
    let data = TrainingData::new(sub.adjacency, sub.features, cfg.model.head, &cfg.loss)?;
    let outcome = train(&data, cfg)?;
    let mu = embed_mean(&outcome.weights, &cfg.model, &graph.features, &graph.adjacency.normalize())?;
    let f1 = node_classification(&mu, labels, &train_nodes, &test_nodes, clf)?;
    Ok((f1, outcome))
}

// ---------------------------------------------------------------------------
// Overlap study

/// `(L_F − L_Fmax) / L_Fmax`
pub fn relative_loss_disadvantage(loss_f: f64, loss_fmax: f64) -> Result<f64> {
    if !(loss_fmax > 0.0) {
        return Err(Error::Metric("relative loss disadvantage needs a positive reference loss"));
    }
    Ok((loss_f - loss_fmax) / loss_fmax)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Percentile 95% interval of `stat` over `resamples` resamplings (with
/// replacement) of `units` sampling units. `stat` receives the resampled
/// unit indices; the estimate is `stat` on the original units.
pub fn bootstrap_ci(
    units: usize,
    resamples: usize,
    seed: u64,
    stat: impl Fn(&[usize]) -> f64,
) -> Result<ConfidenceInterval> {
    if units == 0 || resamples == 0 {
        return Err(Error::Metric("bootstrap needs at least one unit and one resample"));
    }
    let identity: Vec<usize> = (0..units).collect();
    let estimate = stat(&identity);
    let mut rng = rng::stream(seed, Stream::Bootstrap);
    let mut draws = Vec::with_capacity(resamples);
    let mut idx = vec![0; units];
    for _ in 0..resamples {
        idx.iter_mut().for_each(|k| *k = rng.random_range(0..units));
        draws.push(stat(&idx));
    }
    draws.sort_by(f64::total_cmp);
    Ok(ConfidenceInterval {
        estimate,
        lo: quantile_sorted(&draws, 0.025),
        hi: quantile_sorted(&draws, 0.975),
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, frac) = (pos.floor() as usize, pos.fract());
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, c) = v.into_iter().fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    s / c as f64
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x.iter().copied());
    let my = mean(y.iter().copied());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Overlap,
    Reference,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Overlap => "overlap",
            ModelKind::Reference => "reference",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub sbm: SbmConfig,
    pub alphas: Vec<f64>,
    pub noise_sigma: f64,
    pub f_max: usize,
    pub repeats: usize,
    pub seed: u64,
    pub epochs: usize,
    pub k_samples: usize,
    pub lr: f64,
    pub hidden_enc: usize,
    pub hidden_dec: usize,
    pub decoder: AdjacencyDecoder,
    pub head: FeatureHead,
    pub loss: LossConfig,
    pub targets: StudyTargets,
    pub bootstrap_resamples: usize,
}

/// What the feature loss reconstructs in the overlap study. The encoder
/// always sees the noisy features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyTargets {
    /// Noisy features as generated (see `LossConfig::normalize_feature_targets`).
    Features,
    /// One-hot colour of each node: the draw the multinomial head models.
    Colours,
}

impl Default for StudyConfig {
    /// The full-size grid: 100 communities, five α values, 20 repeats.
    fn default() -> Self {
        StudyConfig {
            sbm: SbmConfig::default(),
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            noise_sigma: FeatureConfig::default().noise_sigma,
            f_max: 20,
            repeats: 20,
            seed: 0,
            epochs: 1000,
            k_samples: 5,
            lr: 0.01,
            hidden_enc: 50,
            hidden_dec: 50,
            decoder: AdjacencyDecoder::Deep,
            head: FeatureHead::Multinomial,
            loss: LossConfig::default(),
            // Noisy targets either have negative entries, which the clipped
            // cross-entropy rewards without bound, or, renormalized, bury the
            // colour under the noise mass.
            targets: StudyTargets::Colours,
            bootstrap_resamples: 2000,
        }
    }
}

impl StudyConfig {
    /// Smaller grid: 50 communities, α ∈ {0, 0.5, 1}, 5 repeats, 500 epochs.
    pub fn desk() -> Self {
        StudyConfig {
            sbm: SbmConfig {
                m: 50,
                ..SbmConfig::default()
            },
            alphas: vec![0.0, 0.5, 1.0],
            repeats: 5,
            epochs: 500,
            ..StudyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sbm.validate()?;
        if self.f_max < 2 || self.f_max % 2 != 0 {
            return Err(Error::Config(format!("f_max must be even and ≥ 2, got {}", self.f_max)));
        }
        if self.repeats == 0 || self.alphas.is_empty() {
            return Err(Error::Config("need at least one repeat and one alpha".into()));
        }
        for &alpha in &self.alphas {
            FeatureConfig { alpha, noise_sigma: self.noise_sigma }.validate()?;
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::Config("bootstrap_resamples must be positive".into()));
        }
        Ok(())
    }

    /// `F_AX ∈ {0, 2, …, F_max/2}`.
    pub fn overlap_grid(&self) -> Vec<usize> {
        (0..=self.f_max / 2).step_by(2).collect()
    }

    /// Every `(α index, repeat)` cell; each trains all models on one network.
    pub fn cells(&self) -> Vec<StudyCell> {
        (0..self.alphas.len())
            .flat_map(|a| (0..self.repeats).map(move |r| StudyCell { alpha_index: a, repeat: r }))
            .collect()
    }

    /// Network seed of a repeat; shared across α so only the feature
    /// shuffle differs between α values.
    pub fn network_seed(&self, repeat: usize) -> u64 {
        mix(self.seed, repeat as u64)
    }

    /// Training seed of a repeat; shared across α, F and model kind.
    pub fn training_seed(&self, repeat: usize) -> u64 {
        mix(self.network_seed(repeat), 0x7261_696e)
    }

    fn train_config(&self, split: DimensionSplit, features: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                split,
                features,
                hidden_enc: self.hidden_enc,
                hidden_dec: self.hidden_dec,
                decoder: self.decoder,
                head: self.head,
            },
            loss: self.loss,
            epochs: self.epochs,
            k_samples: self.k_samples,
            lr: self.lr,
            seed,
            track_mean_loss: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StudyCell {
    pub alpha_index: usize,
    pub repeat: usize,
}

impl StudyCell {
    pub fn key(&self) -> String {
        format!("a{}-r{}", self.alpha_index, self.repeat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub alpha: f64,
    pub f_total: usize,
    pub f_ax: usize,
    pub kind: ModelKind,
    pub repeat: usize,
    /// Minimum stochastic total over all epochs.
    pub best_total: f64,
    /// Scaled adjacency and feature losses at the best-total epoch.
    pub best_la: f64,
    pub best_lx: f64,
    pub best_epoch: usize,
    pub parameters: usize,
}

pub const STUDY_HEADER: &str =
    "alpha,f_total,f_ax,kind,repeat,best_total,best_la,best_lx,auc,ap,f1,best_epoch,parameters";

impl StudyRow {
    /// Long-CSV row; the ranking and classification columns stay empty
    /// because this study measures training loss only.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},,,,{},{}",
            self.alpha,
            self.f_total,
            self.f_ax,
            self.kind,
            self.repeat,
            self.best_total,
            self.best_la,
            self.best_lx,
            self.best_epoch,
            self.parameters
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("bad study row `{line}`: {msg}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(bad("expected 13 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("number"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("integer"));
        Ok(StudyRow {
            alpha: num(f[0])?,
            f_total: int(f[1])?,
            f_ax: int(f[2])?,
            kind: match f[3] {
                "overlap" => ModelKind::Overlap,
                "reference" => ModelKind::Reference,
                _ => return Err(bad("kind")),
            },
            repeat: int(f[4])?,
            best_total: num(f[5])?,
            best_la: num(f[6])?,
            best_lx: num(f[7])?,
            best_epoch: int(f[11])?,
            parameters: int(f[12])?,
        })
    }
}

/// Canonical row order: α, kind, descending F, repeat.
pub fn sort_rows(rows: &mut [StudyRow]) {
    rows.sort_by(|a, b| {
        a.alpha
            .total_cmp(&b.alpha)
            .then_with(|| a.kind.cmp(&b.kind))
            .then_with(|| b.f_total.cmp(&a.f_total))
            .then_with(|| a.repeat.cmp(&b.repeat))
    });
}

pub fn rows_to_csv(rows: &[StudyRow]) -> String {
    let mut out = String::new();
    out.push_str(STUDY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Trains every overlap and reference model of one cell on the same
/// freshly generated network. The `F_AX = 0` overlap model and the
/// `F = F_max` reference model share an architecture and a seed, so it is
/// trained once and reported under both kinds.
pub fn run_study_cell(cfg: &StudyConfig, cell: StudyCell) -> Result<Vec<StudyRow>> {
    let alpha = cfg.alphas[cell.alpha_index];
    let fcfg = FeatureConfig { alpha, noise_sigma: cfg.noise_sigma };
    let graph = generate_featured(&cfg.sbm, &fcfg, cfg.network_seed(cell.repeat))?;
    let seed = cfg.training_seed(cell.repeat);
    let mut data = TrainingData::new(
        graph.adjacency.clone(),
        graph.features.clone(),
        cfg.head,
        &cfg.loss,
    )?;
    if cfg.targets == StudyTargets::Colours {
        let colours = graph.labels.as_ref().expect("generated graphs carry colours");
        data.targets = DenseMatrix::from_fn(graph.num_nodes(), graph.num_features(), |i, j| {
            (colours[i] == j) as u8 as f64
        });
    }
    let mut rows = Vec::new();
    let emit = |kind, f_ax, split: DimensionSplit| -> Result<StudyRow> {
        let tc = cfg.train_config(split, graph.num_features(), seed);
        let out = train(&data, &tc)?;
        let best = out.trace.best().expect("epochs ≥ 1");
        Ok(StudyRow {
            alpha,
            f_total: split.total(),
            f_ax,
            kind,
            repeat: cell.repeat,
            best_total: best.loss.total,
            best_la: best.loss.l_a_scaled,
            best_lx: best.loss.l_x_scaled,
            best_epoch: best.epoch,
            parameters: tc.model.parameter_count(),
        })
    };
    for f_ax in cfg.overlap_grid() {
        let row = emit(ModelKind::Overlap, f_ax, DimensionSplit::overlapping(cfg.f_max, f_ax)?)?;
        if f_ax == 0 {
            rows.push(StudyRow { kind: ModelKind::Reference, ..row.clone() });
        }
        rows.push(row);
    }
    for f_ax in cfg.overlap_grid().into_iter().skip(1) {
        let f = cfg.f_max - f_ax;
        rows.push(emit(ModelKind::Reference, 0, DimensionSplit::reference(f)?)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
}

/// Runs every cell sequentially.
pub fn run_overlap_study(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for cell in cfg.cells() {
        rows.extend(run_study_cell(cfg, cell)?);
    }
    sort_rows(&mut rows);
    Ok(StudyResult { rows })
}

/// Which loss a relative disadvantage is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossComponent {
    Total,
    Adjacency,
    Features,
}

impl LossComponent {
    fn of(self, r: &StudyRow) -> f64 {
        match self {
            LossComponent::Total => r.best_total,
            LossComponent::Adjacency => r.best_la,
            LossComponent::Features => r.best_lx,
        }
    }
}

/// Per-repeat losses of one `(α, kind, F)` series, indexed by repeat.
fn series<'a>(rows: &'a [StudyRow], alpha: f64, kind: ModelKind, f_total: usize) -> Vec<&'a StudyRow> {
    let mut v: Vec<_> = rows
        .iter()
        .filter(|r| r.alpha == alpha && r.kind == kind && r.f_total == f_total)
        .collect();
    v.sort_by_key(|r| r.repeat);
    v
}

/// Per-repeat relative loss disadvantage against the `F_max` model of the
/// same kind, α and repeat.
pub fn paired_rld(
    rows: &[StudyRow],
    alpha: f64,
    kind: ModelKind,
    f_total: usize,
    f_max: usize,
    component: LossComponent,
) -> Result<Vec<f64>> {
    let num = series(rows, alpha, kind, f_total);
    let den = series(rows, alpha, kind, f_max);
    if num.len() != den.len() || num.is_empty() {
        return Err(Error::Metric("incomplete study series"));
    }
    num.iter()
        .zip(&den)
        .map(|(a, b)| {
            if a.repeat != b.repeat {
                return Err(Error::Metric("unpaired study repeats"));
            }
            relative_loss_disadvantage(component.of(a), component.of(b))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub alpha: f64,
    pub kind: ModelKind,
    pub f_total: usize,
    pub f_ax: usize,
    pub repeats: usize,
    pub best_total: ConfidenceInterval,
    pub rld_total: ConfidenceInterval,
    pub rld_la: ConfidenceInterval,
    pub rld_lx: ConfidenceInterval,
}

pub const SUMMARY_HEADER: &str = "alpha,kind,f_total,f_ax,repeats,\
mean_best_total,best_total_lo,best_total_hi,\
mean_rld_total,rld_total_lo,rld_total_hi,\
mean_rld_la,rld_la_lo,rld_la_hi,\
mean_rld_lx,rld_lx_lo,rld_lx_hi";

impl SummaryRow {
    pub fn csv_row(&self) -> String {
        let ci = |c: &ConfidenceInterval| format!("{},{},{}", c.estimate, c.lo, c.hi);
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.alpha,
            self.kind,
            self.f_total,
            self.f_ax,
            self.repeats,
            ci(&self.best_total),
            ci(&self.rld_total),
            ci(&self.rld_la),
            ci(&self.rld_lx)
        )
    }
}

fn mean_ci(values: &[f64], resamples: usize, seed: u64) -> Result<ConfidenceInterval> {
    bootstrap_ci(values.len(), resamples, seed, |idx| mean(idx.iter().map(|&k| values[k])))
}

/// Means over repeats with bootstrap intervals, one row per `(α, kind, F)`.
pub fn summarize_study(rows: &[StudyRow], f_max: usize, resamples: usize, seed: u64) -> Result<Vec<SummaryRow>> {
    let mut keys: Vec<(u64, ModelKind, usize, usize)> = rows
        .iter()
        .map(|r| (r.alpha.to_bits(), r.kind, r.f_total, r.f_ax))
        .collect();
    keys.sort_by(|a, b| {
        f64::from_bits(a.0)
            .total_cmp(&f64::from_bits(b.0))
            .then(a.1.cmp(&b.1))
            .then(b.2.cmp(&a.2))
    });
    keys.dedup();
    let mut out = Vec::with_capacity(keys.len());
    for (k, &(alpha_bits, kind, f_total, f_ax)) in keys.iter().enumerate() {
        let alpha = f64::from_bits(alpha_bits);
        let s = mix(seed, k as u64);
        let totals: Vec<f64> = series(rows, alpha, kind, f_total).iter().map(|r| r.best_total).collect();
        let rld = |c| -> Result<ConfidenceInterval> {
            mean_ci(&paired_rld(rows, alpha, kind, f_total, f_max, c)?, resamples, s)
        };
        out.push(SummaryRow {
            alpha,
            kind,
            f_total,
            f_ax,
            repeats: totals.len(),
            best_total: mean_ci(&totals, resamples, s)?,
            rld_total: rld(LossComponent::Total)?,
            rld_la: rld(LossComponent::Adjacency)?,
            rld_lx: rld(LossComponent::Features)?,
        });
    }
    Ok(out)
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Bootstrap (over repeats) of the mean of `rld(α_lo) − rld(α_hi)`.
pub fn rld_gap(
    rows: &[StudyRow],
    kind: ModelKind,
    f_total: usize,
    f_max: usize,
    alpha_lo: f64,
    alpha_hi: f64,
    resamples: usize,
    seed: u64,
) -> Result<ConfidenceInterval> {
    let lo = paired_rld(rows, alpha_lo, kind, f_total, f_max, LossComponent::Total)?;
    let hi = paired_rld(rows, alpha_hi, kind, f_total, f_max, LossComponent::Total)?;
    if lo.len() != hi.len() {
        return Err(Error::Metric("unequal repeat counts across alphas"));
    }
    let diff: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| a - b).collect();
    mean_ci(&diff, resamples, seed)
}

/// OLS slope of the relative disadvantage against α, with repeats as the
/// bootstrap unit (each repeat carries its value at every α).
pub fn rld_slope(
    rows: &[StudyRow],
    kind: ModelKind,
    f_total: usize,
    f_max: usize,
    alphas: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<ConfidenceInterval> {
    let per_alpha: Vec<Vec<f64>> = alphas
        .iter()
        .map(|&a| paired_rld(rows, a, kind, f_total, f_max, LossComponent::Total))
        .collect::<Result<_>>()?;
    let repeats = per_alpha[0].len();
    if per_alpha.iter().any(|v| v.len() != repeats) {
        return Err(Error::Metric("unequal repeat counts across alphas"));
    }
    bootstrap_ci(repeats, resamples, seed, |idx| {
        let mut x = Vec::with_capacity(idx.len() * alphas.len());
        let mut y = Vec::with_capacity(idx.len() * alphas.len());
        for &r in idx {
            for (a, vals) in alphas.iter().zip(&per_alpha) {
                x.push(*a);
                y.push(vals[r]);
            }
        }
        ols_slope(&x, &y)
    })
}

/// Mean best total loss per α for one `(kind, F)` series, in `alphas` order.
pub fn mean_best_by_alpha(rows: &[StudyRow], kind: ModelKind, f_total: usize, alphas: &[f64]) -> Vec<f64> {
    alphas
        .iter()
        .map(|&a| mean(series(rows, a, kind, f_total).iter().map(|r| r.best_total)))
        .collect()
}
