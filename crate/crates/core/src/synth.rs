//! Stochastic-block-model featured networks whose node colours agree with
//! the block structure for a controllable fraction `alpha` of the nodes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseAdjacency;
use crate::matrix::DenseMatrix;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbmConfig {
    /// Number of communities.
    pub m: usize,
    /// Nodes per community.
    pub n: usize,
    pub p_in: f64,
    pub p_out: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        SbmConfig {
            m: 100,
            n: 10,
            p_in: 0.25,
            p_out: 0.01,
        }
    }
}

impl SbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Config("SBM needs m >= 1 and n >= 1".into()));
        }
        if !(0.0 <= self.p_out && self.p_out <= self.p_in && self.p_in <= 1.0) {
            return Err(Error::Config(format!(
                "SBM needs 0 <= p_out <= p_in <= 1 (got p_in={}, p_out={})",
                self.p_in, self.p_out
            )));
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.m * self.n
    }

    /// Expected number of undirected edges.
    pub fn expected_edges(&self) -> f64 {
        let n = self.n as f64;
        let total = self.num_nodes() as f64;
        let intra = self.m as f64 * n * (n - 1.0) / 2.0;
        let all = total * (total - 1.0) / 2.0;
        self.p_in * intra + self.p_out * (all - intra)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Fraction of nodes whose colour is left equal to their community.
    pub alpha: f64,
    pub noise_sigma: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            alpha: 1.0,
            noise_sigma: 0.1,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// `round((1 - alpha) * nodes)`, rounding halves up.
    pub fn shuffled_count(&self, nodes: usize) -> usize {
        ((1.0 - self.alpha) * nodes as f64 + 0.5).floor() as usize
    }
}

/// Adjacency plus node features, with optional class labels and planted
/// communities.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturedGraph {
    pub adjacency: SparseAdjacency,
    pub features: DenseMatrix,
    pub labels: Option<Vec<usize>>,
    pub community: Option<Vec<usize>>,
}

impl FeaturedGraph {
    pub fn new(adjacency: SparseAdjacency, features: DenseMatrix) -> Result<Self> {
        if features.rows() != adjacency.n() {
            return Err(Error::dim(
                "FeaturedGraph",
                adjacency.n(),
                features.rows(),
            ));
        }
        Ok(FeaturedGraph {
            adjacency,
            features,
            labels: None,
            community: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.n()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// Subgraph induced by `keep`, with features and labels carried along.
    pub fn induced(&self, keep: &[usize]) -> FeaturedGraph {
        let pick = |v: &Vec<usize>| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let mut features = DenseMatrix::zeros(keep.len(), self.num_features());
        for (new, &old) in keep.iter().enumerate() {
            features.row_mut(new).copy_from_slice(self.features.row(old));
        }
        FeaturedGraph {
            adjacency: self.adjacency.induced(keep),
            features,
            labels: self.labels.as_ref().map(pick),
            community: self.community.as_ref().map(pick),
        }
    }
}

/// Samples an SBM graph. Community `c` holds nodes `[c·n, (c+1)·n)`.
pub fn generate_sbm(cfg: &SbmConfig, seed: u64) -> Result<(SparseAdjacency, Vec<usize>)> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, Stream::Data);
    let total = cfg.num_nodes();
    let community: Vec<usize> = (0..total).map(|i| i / cfg.n).collect();
    let mut edges = Vec::new();
    for i in 0..total {
        let block_end = (community[i] + 1) * cfg.n;
        for j in i + 1..block_end {
            if bernoulli(&mut rng, cfg.p_in) {
                edges.push((i, j));
            }
        }
        // Inter-community pairs are sparse; jump between successes with
        // geometric gaps instead of flipping every coin.
        skip_sample(&mut rng, cfg.p_out, block_end, total, |j| edges.push((i, j)));
    }
    let adjacency = SparseAdjacency::from_edges(total, edges)?;
    Ok((adjacency, community))
}

fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> bool {
    p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p)
}

fn skip_sample<R: Rng>(rng: &mut R, p: f64, start: usize, end: usize, mut hit: impl FnMut(usize)) {
    if p <= 0.0 || start >= end {
        return;
    }
    if p >= 1.0 {
        (start..end).for_each(hit);
        return;
    }
    let log_q = (1.0 - p).ln();
    let mut pos = start;
    loop {
        // 1 - U lies in (0, 1], so the log is finite.
        let u: f64 = 1.0 - rng.random::<f64>();
        let gap = (u.ln() / log_q).floor();
        if gap >= (end - pos) as f64 {
            return;
        }
        pos += gap as usize;
        hit(pos);
        pos += 1;
        if pos >= end {
            return;
        }
    }
}

/// Pre-noise colours: community ids with a random subset of
/// `round((1-alpha)·N)` nodes permuted among themselves.
pub fn shuffle_colors(community: &[usize], fcfg: &FeatureConfig, seed: u64) -> Result<Vec<usize>> {
    fcfg.validate()?;
    let mut rng = rng::stream(seed, Stream::Colors);
    let total = community.len();
    let k = fcfg.shuffled_count(total).min(total);
    let mut colors = community.to_vec();
    let chosen = index::sample(&mut rng, total, k).into_vec();
    let mut picked: Vec<usize> = chosen.iter().map(|&i| community[i]).collect();
    picked.shuffle(&mut rng);
    for (&node, color) in chosen.iter().zip(picked) {
        colors[node] = color;
    }
    Ok(colors)
}

/// One-hot colour features (after the `alpha` shuffle) plus i.i.d. Gaussian
/// noise of standard deviation `noise_sigma`. Returns the features and the
/// pre-noise colours.
pub fn assign_features(
    community: &[usize],
    num_colors: usize,
    fcfg: &FeatureConfig,
    seed: u64,
) -> Result<(DenseMatrix, Vec<usize>)> {
    if let Some(&bad) = community.iter().find(|&&c| c >= num_colors) {
        return Err(Error::Config(format!(
            "community id {bad} out of range for {num_colors} colours"
        )));
    }
    let colors = shuffle_colors(community, fcfg, seed)?;
    let mut x = DenseMatrix::zeros(community.len(), num_colors);
    for (i, &c) in colors.iter().enumerate() {
        x.set(i, c, 1.0);
    }
    if fcfg.noise_sigma > 0.0 {
        let mut rng = rng::stream(seed, Stream::Noise);
        let normal = Normal::new(0.0, fcfg.noise_sigma)
            .map_err(|e| Error::Config(format!("noise: {e}")))?;
        for v in x.values_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok((x, colors))
}

/// Full synthetic featured network: SBM structure plus shuffled colours.
pub fn generate_featured(sbm: &SbmConfig, fcfg: &FeatureConfig, seed: u64) -> Result<FeaturedGraph> {
    let (adjacency, community) = generate_sbm(sbm, seed)?;
    let (features, colors) = assign_features(&community, sbm.m, fcfg, seed)?;
    Ok(FeaturedGraph {
        adjacency,
        features,
        labels: Some(colors),
        community: Some(community),
    })
}

pub const EDGES_FILE: &str = "edges.txt";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphManifest {
    pub schema_version: u32,
    pub nodes: usize,
    pub features: usize,
    pub edges: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sbm: Option<SbmConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_config: Option<FeatureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Writes `edges.txt`, `features.csv`, `labels.csv` and `manifest.json`
/// into `dir`, returning the written paths.
pub fn save_featured_graph(
    graph: &FeaturedGraph,
    dir: &Path,
    manifest: &GraphManifest,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let edges = dir.join(EDGES_FILE);
    graph.adjacency.write_edge_list(&edges)?;

    let features = dir.join(FEATURES_FILE);
    write_lines(&features, |w| {
        let header: Vec<String> = (0..graph.num_features()).map(|j| format!("f{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..graph.num_nodes() {
            let row: Vec<String> = graph.features.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })?;

    let labels = dir.join(LABELS_FILE);
    write_lines(&labels, |w| {
        writeln!(w, "node,label,community")?;
        for i in 0..graph.num_nodes() {
            let fmt = |v: &Option<Vec<usize>>| v.as_ref().map_or(String::new(), |v| v[i].to_string());
            writeln!(w, "{i},{},{}", fmt(&graph.labels), fmt(&graph.community))?;
        }
        Ok(())
    })?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(vec![edges, features, labels, manifest_path])
}

fn write_lines(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_featured_graph(dir: &Path) -> Result<(FeaturedGraph, GraphManifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: GraphManifest = serde_json::from_str(&text)?;
    let adjacency = SparseAdjacency::read_edge_list(&dir.join(EDGES_FILE), Some(manifest.nodes))?;

    let features_path = dir.join(FEATURES_FILE);
    let text = fs::read_to_string(&features_path).map_err(|e| Error::io(&features_path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: features_path.clone(),
        line,
        msg,
    };
    let mut values = Vec::with_capacity(manifest.nodes * manifest.features);
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for field in line.split(',') {
            let v = field
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(lineno + 1, format!("{field:?}: {e}")))?;
            values.push(v);
        }
        if values.len() - before != manifest.features {
            return Err(parse_err(
                lineno + 1,
                format!("expected {} fields, got {}", manifest.features, values.len() - before),
            ));
        }
        rows += 1;
    }
    let features = DenseMatrix::from_vec(rows, manifest.features, values)?;
    let mut graph = FeaturedGraph::new(adjacency, features)?;

    let labels_path = dir.join(LABELS_FILE);
    if labels_path.exists() {
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let mut labels = Vec::new();
        let mut community = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: labels_path.clone(),
                    line: lineno + 1,
                    msg: format!("expected 3 fields, got {}", fields.len()),
                });
            }
            labels.push(fields[1].trim().parse::<usize>().ok());
            community.push(fields[2].trim().parse::<usize>().ok());
        }
        graph.labels = labels.into_iter().collect();
        graph.community = community.into_iter().collect();
    }
    Ok((graph, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_probabilities() {
        let cfg = SbmConfig { m: 2, n: 3, p_in: 1.0, p_out: 0.0 };
        let (a, community) = generate_sbm(&cfg, 0).unwrap();
        assert_eq!(community, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(a.edges(), &[(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]);

        let empty = SbmConfig { m: 3, n: 4, p_in: 0.0, p_out: 0.0 };
        assert_eq!(generate_sbm(&empty, 1).unwrap().0.num_edges(), 0);

        let full = SbmConfig { m: 3, n: 2, p_in: 1.0, p_out: 1.0 };
        assert_eq!(generate_sbm(&full, 1).unwrap().0.num_edges(), 15);
    }

    #[test]
    fn invalid_configs() {
        assert!(SbmConfig { m: 2, n: 2, p_in: 0.1, p_out: 0.2 }.validate().is_err());
        assert!(SbmConfig { m: 0, n: 2, p_in: 0.1, p_out: 0.0 }.validate().is_err());
        assert!(FeatureConfig { alpha: 1.5, noise_sigma: 0.1 }.validate().is_err());
        assert!(FeatureConfig { alpha: 0.5, noise_sigma: -1.0 }.validate().is_err());
    }

    #[test]
    fn edge_count_matches_binomial_expectation() {
        let cfg = SbmConfig::default();
        // Independent Bernoulli sum: mean and variance in closed form.
        let intra = 100.0 * 45.0;
        let inter = (1000.0 * 999.0 / 2.0) - intra;
        let mean = 0.25 * intra + 0.01 * inter;
        let var = 0.25 * 0.75 * intra + 0.01 * 0.99 * inter;
        assert!((mean - 6075.0f64).abs() < 1e-9);
        assert!((cfg.expected_edges() - mean).abs() < 1e-9);
        let seeds = 20;
        let observed: f64 = (0..seeds)
            .map(|s| generate_sbm(&cfg, s).unwrap().0.num_edges() as f64)
            .sum::<f64>()
            / seeds as f64;
        let sd_of_mean = (var / seeds as f64).sqrt();
        assert!((observed - mean).abs() < 3.0 * sd_of_mean, "{observed} vs {mean}");
    }

    #[test]
    fn expected_density() {
        let cfg = SbmConfig::default();
        let expected: f64 = 0.25 * (100.0 * 10.0 * 9.0) / 1e6 + 0.01 * (1e6 - 100.0 * 100.0) / 1e6;
        assert!((expected - 0.01215).abs() < 1e-12);
        let mean: f64 = (0..20)
            .map(|s| generate_sbm(&cfg, 100 + s).unwrap().0.density())
            .sum::<f64>()
            / 20.0;
        assert!((mean - expected).abs() < 3e-4, "{mean}");
    }

    #[test]
    fn clean_features_are_community_one_hot() {
        let community: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let f = FeatureConfig { alpha: 1.0, noise_sigma: 0.0 };
        let (x, colors) = assign_features(&community, 3, &f, 5).unwrap();
        assert_eq!(colors, community);
        for i in 0..12 {
            for c in 0..3 {
                assert_eq!(x.get(i, c), (community[i] == c) as u8 as f64);
            }
        }
    }

    #[test]
    fn shuffle_preserves_color_counts() {
        let community: Vec<usize> = (0..40).map(|i| i / 10).collect();
        for &alpha in &[0.0, 0.25, 0.5, 0.8, 1.0] {
            for seed in 0..10 {
                let f = FeatureConfig { alpha, noise_sigma: 0.0 };
                let (x, colors) = assign_features(&community, 4, &f, seed).unwrap();
                for c in 0..4 {
                    let col: f64 = (0..40).map(|i| x.get(i, c)).sum();
                    assert_eq!(col, 10.0);
                }
                // Nodes that moved are a subset of the shuffled sample.
                let moved = colors.iter().zip(&community).filter(|(a, b)| a != b).count();
                assert!(moved <= f.shuffled_count(40));
            }
        }
    }

    #[test]
    fn full_shuffle_of_four_nodes() {
        let community = vec![0, 0, 1, 1];
        let f = FeatureConfig { alpha: 0.0, noise_sigma: 0.0 };
        assert_eq!(f.shuffled_count(4), 4);
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..50 {
            let colors = shuffle_colors(&community, &f, seed).unwrap();
            let mut sorted = colors.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 0, 1, 1]);
            seen.insert(colors);
        }
        // All 6 distinct arrangements of {0,0,1,1} are reachable.
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn shuffled_count_rounds_half_up() {
        let f = |alpha| FeatureConfig { alpha, noise_sigma: 0.0 };
        assert_eq!(f(0.5).shuffled_count(5), 3);
        assert_eq!(f(0.8).shuffled_count(1000), 200);
        assert_eq!(f(1.0).shuffled_count(7), 0);
        assert_eq!(f(0.0).shuffled_count(7), 7);
    }

    #[test]
    fn noise_has_requested_scale() {
        let community: Vec<usize> = (0..2000).map(|i| i / 10).collect();
        let f = FeatureConfig { alpha: 1.0, noise_sigma: 0.1 };
        let (x, colors) = assign_features(&community, 200, &f, 3).unwrap();
        let mut resid = Vec::new();
        for i in 0..2000 {
            for c in 0..200 {
                resid.push(x.get(i, c) - (colors[i] == c) as u8 as f64);
            }
        }
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3);
        assert!((sd - 0.1).abs() < 1e-3);
        for i in 0..2000 {
            let argmax = (0..200)
                .max_by(|&a, &b| x.get(i, a).total_cmp(&x.get(i, b)))
                .unwrap();
            assert_eq!(argmax, community[i]);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sbm = SbmConfig { m: 4, n: 5, p_in: 0.5, p_out: 0.05 };
        let fc = FeatureConfig { alpha: 0.5, noise_sigma: 0.1 };
        let g = generate_featured(&sbm, &fc, 9).unwrap();
        let manifest = GraphManifest {
            schema_version: 1,
            nodes: g.num_nodes(),
            features: g.num_features(),
            edges: g.adjacency.num_edges(),
            sbm: Some(sbm),
            feature_config: Some(fc),
            seed: Some(9),
        };
        save_featured_graph(&g, dir.path(), &manifest).unwrap();
        let (back, m) = load_featured_graph(dir.path()).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(back, g);
    }

    #[test]
    fn generation_is_deterministic() {
        let sbm = SbmConfig { m: 10, n: 10, p_in: 0.25, p_out: 0.01 };
        let fc = FeatureConfig { alpha: 0.3, noise_sigma: 0.1 };
        assert_eq!(
            generate_featured(&sbm, &fc, 4).unwrap(),
            generate_featured(&sbm, &fc, 4).unwrap()
        );
        assert_ne!(
            generate_featured(&sbm, &fc, 4).unwrap(),
            generate_featured(&sbm, &fc, 5).unwrap()
        );
    }
}
