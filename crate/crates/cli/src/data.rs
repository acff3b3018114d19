use std::path::Path;

use an2vec::datasets::{detect_dataset, load_content_cites, load_pubmed_files, DatasetFiles};
use an2vec::model::FeatureHead;
use an2vec::synth::{load_featured_graph, FeaturedGraph};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Generated,
    Linqs,
    Pubmed,
}

impl Source {
    /// One-hot colours are single draws; bags of words are binary vectors;
    /// TF/IDF scores are real-valued.
    pub fn default_head(self) -> FeatureHead {
        match self {
            Source::Generated => FeatureHead::Multinomial,
            Source::Linqs => FeatureHead::Bernoulli,
            Source::Pubmed => FeatureHead::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSummary {
    pub source: Source,
    pub nodes: usize,
    pub features: usize,
    pub edges: usize,
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped_citations: Option<usize>,
}

pub struct LoadedData {
    pub graph: FeaturedGraph,
    pub summary: DataSummary,
}

pub fn load(dir: &Path) -> Result<LoadedData> {
    let files = detect_dataset(dir).map_err(|e| crate::usage!("{e}"))?;
    let (graph, source, classes, dropped) = match &files {
        DatasetFiles::Generated(d) => {
            let (g, _) = load_featured_graph(d)?;
            let classes = g.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1));
            (g, Source::Generated, classes, None)
        }
        DatasetFiles::Linqs { content, cites } => {
            let ds = load_content_cites(content, cites)?;
            let (c, d) = (ds.class_names.len(), ds.stats.dropped_dangling);
            (ds.graph, Source::Linqs, Some(c), Some(d))
        }
        DatasetFiles::Pubmed { nodes, cites } => {
            let ds = load_pubmed_files(nodes, cites)?;
            let (c, d) = (ds.class_names.len(), ds.stats.dropped_dangling);
            (ds.graph, Source::Pubmed, Some(c), Some(d))
        }
    };
    let summary = DataSummary {
        source,
        nodes: graph.num_nodes(),
        features: graph.num_features(),
        edges: graph.adjacency.num_edges(),
        classes,
        dropped_citations: dropped,
    };
    Ok(LoadedData { graph, summary })
}

pub fn load_with_context(dir: &Path) -> Result<LoadedData> {
    load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}
