//! Loaders for the LINQS citation benchmarks: Cora and CiteSeer
//! (`.content` / `.cites`) and PubMed Diabetes (`.tab`).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseAdjacency;
use crate::matrix::DenseMatrix;
use crate::synth::FeaturedGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LoadStats {
    /// Citations naming an id absent from the node file.
    pub dropped_dangling: usize,
    pub dropped_self_loops: usize,
    /// Citation lines that repeat an undirected pair already seen.
    pub duplicate_links: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CitationDataset {
    pub graph: FeaturedGraph,
    /// Sorted label vocabulary; `graph.labels` index into it.
    pub class_names: Vec<String>,
    /// External id of each node, in node order.
    pub node_ids: Vec<String>,
    pub id_map: HashMap<String, usize>,
    pub stats: LoadStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub nodes: usize,
    pub features: usize,
    pub classes: usize,
    pub edges: usize,
    pub dropped_dangling: usize,
    pub dropped_self_loops: usize,
    pub duplicate_links: usize,
}

impl CitationDataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            nodes: self.graph.num_nodes(),
            features: self.graph.num_features(),
            classes: self.class_names.len(),
            edges: self.graph.adjacency.num_edges(),
            dropped_dangling: self.stats.dropped_dangling,
            dropped_self_loops: self.stats.dropped_self_loops,
            duplicate_links: self.stats.duplicate_links,
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Node rows collected before labels are indexed.
struct NodeTable {
    ids: Vec<String>,
    id_map: HashMap<String, usize>,
    features: Vec<f64>,
    width: usize,
    raw_labels: Vec<String>,
}

impl NodeTable {
    fn new(width: usize) -> Self {
        NodeTable {
            ids: Vec::new(),
            id_map: HashMap::new(),
            features: Vec::new(),
            width,
            raw_labels: Vec::new(),
        }
    }

    fn push(&mut self, id: &str, row: &[f64], label: &str) -> std::result::Result<(), String> {
        if self.id_map.insert(id.to_string(), self.ids.len()).is_some() {
            return Err(format!("duplicate node id `{id}`"));
        }
        self.ids.push(id.to_string());
        self.features.extend_from_slice(row);
        self.raw_labels.push(label.to_string());
        Ok(())
    }

    /// Resolves `(a, b)` id links into an undirected adjacency.
    fn finish(self, links: Vec<(String, String)>) -> Result<CitationDataset> {
        let n = self.ids.len();
        let mut stats = LoadStats::default();
        let mut pairs = BTreeSet::new();
        for (a, b) in &links {
            match (self.id_map.get(a), self.id_map.get(b)) {
                (Some(&i), Some(&j)) if i == j => stats.dropped_self_loops += 1,
                (Some(&i), Some(&j)) => {
                    if !pairs.insert((i.min(j), i.max(j))) {
                        stats.duplicate_links += 1;
                    }
                }
                _ => stats.dropped_dangling += 1,
            }
        }
        let adjacency = SparseAdjacency::from_edges(n, pairs)?;
        let class_names: Vec<String> = self
            .raw_labels
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let labels = self
            .raw_labels
            .iter()
            .map(|l| class_names.binary_search(l).expect("label in vocabulary"))
            .collect();
        let features = DenseMatrix::from_vec(n, self.width, self.features)?;
        let mut graph = FeaturedGraph::new(adjacency, features)?;
        graph.labels = Some(labels);
        Ok(CitationDataset {
            graph,
            class_names,
            node_ids: self.ids,
            id_map: self.id_map,
            stats,
        })
    }
}

/// LINQS `.content` (`id w1 … wD label`) plus `.cites` (`cited citing`).
/// Node order follows the content file.
pub fn load_content_cites(content_path: &Path, cites_path: &Path) -> Result<CitationDataset> {
    let content = read(content_path)?;
    let mut table: Option<NodeTable> = None;
    for (k, line) in content.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let lineno = k + 1;
        if fields.len() < 3 {
            return Err(parse_err(content_path, lineno, "expected an id, features and a label"));
        }
        let t = table.get_or_insert_with(|| NodeTable::new(fields.len() - 2));
        if fields.len() != t.width + 2 {
            return Err(parse_err(
                content_path,
                lineno,
                format!("expected {} fields, found {}", t.width + 2, fields.len()),
            ));
        }
        let row = fields[1..fields.len() - 1]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(content_path, lineno, format!("bad feature value: {e}")))?;
        t.push(fields[0], &row, fields[fields.len() - 1])
            .map_err(|m| parse_err(content_path, lineno, m))?;
    }
    let table = table.ok_or_else(|| parse_err(content_path, 0, "no nodes"))?;

    let cites = read(cites_path)?;
    let mut links = Vec::new();
    for (k, line) in cites.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.len() {
            0 => continue,
            2 => links.push((fields[0].to_string(), fields[1].to_string())),
            m => {
                return Err(parse_err(cites_path, k + 1, format!("expected 2 fields, found {m}")))
            }
        }
    }
    table.finish(links)
}

/// PubMed Diabetes: `*.NODE.paper.tab` with TF/IDF features and
/// `*.DIRECTED.cites.tab` with `id  paper:A  |  paper:B` rows. Both begin
/// with two header lines; the node file's second line declares the
/// vocabulary as `numeric:<word>:0.0` entries.
pub fn load_pubmed_files(node_path: &Path, cites_path: &Path) -> Result<CitationDataset> {
    let text = read(node_path)?;
    let mut lines = text.lines().enumerate();
    lines.next().ok_or_else(|| parse_err(node_path, 1, "missing header"))?;
    let (_, vocab_line) = lines.next().ok_or_else(|| parse_err(node_path, 2, "missing vocabulary"))?;
    let vocab: HashMap<&str, usize> = vocab_line
        .split('\t')
        .filter_map(|f| f.strip_prefix("numeric:"))
        .filter_map(|f| f.split(':').next())
        .enumerate()
        .map(|(k, w)| (w, k))
        .collect();
    if vocab.is_empty() {
        return Err(parse_err(node_path, 2, "no numeric vocabulary entries"));
    }
    let mut table = NodeTable::new(vocab.len());
    let mut row = vec![0.0; vocab.len()];
    for (k, line) in lines {
        let lineno = k + 1;
        let mut fields = line.split('\t').filter(|f| !f.is_empty());
        let Some(id) = fields.next() else { continue };
        row.iter_mut().for_each(|v| *v = 0.0);
        let mut label = None;
        for f in fields {
            let Some((key, value)) = f.split_once('=') else {
                return Err(parse_err(node_path, lineno, format!("expected key=value, found `{f}`")));
            };
            if key == "label" {
                label = Some(value);
            } else if key == "summary" {
                continue;
            } else if let Some(&col) = vocab.get(key) {
                row[col] = value
                    .parse()
                    .map_err(|e| parse_err(node_path, lineno, format!("bad value for {key}: {e}")))?;
            } else {
                return Err(parse_err(node_path, lineno, format!("unknown word `{key}`")));
            }
        }
        let label = label.ok_or_else(|| parse_err(node_path, lineno, "missing label"))?;
        table.push(id, &row, label).map_err(|m| parse_err(node_path, lineno, m))?;
    }

    let text = read(cites_path)?;
    let mut links = Vec::new();
    for (k, line) in text.lines().enumerate().skip(2) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let paper = |s: &str| s.strip_prefix("paper:").map(str::to_string);
        match fields.as_slice() {
            [_, a, "|", b] => match (paper(a), paper(b)) {
                (Some(a), Some(b)) => links.push((a, b)),
                _ => return Err(parse_err(cites_path, k + 1, "expected paper:<id> endpoints")),
            },
            _ => return Err(parse_err(cites_path, k + 1, "expected `id paper:A | paper:B`")),
        }
    }
    table.finish(links)
}

/// Files making up a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetFiles {
    /// Written by the synthetic generator (`manifest.json` present).
    Generated(PathBuf),
    Linqs { content: PathBuf, cites: PathBuf },
    Pubmed { nodes: PathBuf, cites: PathBuf },
}

fn single_with_suffix(dir: &Path, suffix: &str) -> Result<Option<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.file_name().and_then(|s| s.to_str()).is_some_and(|s| s.ends_with(suffix)) {
            found.push(path);
        }
    }
    found.sort();
    match found.len() {
        0 => Ok(None),
        1 => Ok(found.pop()),
        _ => Err(Error::Config(format!("several `*{suffix}` files in {}", dir.display()))),
    }
}

pub fn detect_dataset(dir: &Path) -> Result<DatasetFiles> {
    if dir.join(crate::synth::MANIFEST_FILE).is_file() {
        return Ok(DatasetFiles::Generated(dir.to_path_buf()));
    }
    if let (Some(content), Some(cites)) =
        (single_with_suffix(dir, ".content")?, single_with_suffix(dir, ".cites")?)
    {
        return Ok(DatasetFiles::Linqs { content, cites });
    }
    if let (Some(nodes), Some(cites)) = (
        single_with_suffix(dir, "NODE.paper.tab")?,
        single_with_suffix(dir, "DIRECTED.cites.tab")?,
    ) {
        return Ok(DatasetFiles::Pubmed { nodes, cites });
    }
    Err(Error::Config(format!(
        "{} holds neither a generated graph, LINQS .content/.cites, nor PubMed .tab files",
        dir.display()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    const CONTENT: &str = "p1\t1\t0\t1\tTheory\np2\t0\t1\t0\tNeural_Networks\np3\t1\t1\t0\tTheory\n";
    const CITES: &str = "p1\tp2\np2\tp1\np3\tp1\nghost\tp2\np3\tp3\n";

    #[test]
    fn linqs_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "tiny.content", CONTENT);
        let e = write(dir.path(), "tiny.cites", CITES);
        let ds = load_content_cites(&c, &e).unwrap();
        assert_eq!(ds.graph.num_nodes(), 3);
        assert_eq!(ds.graph.num_features(), 3);
        assert_eq!(ds.class_names, vec!["Neural_Networks", "Theory"]);
        assert_eq!(ds.graph.labels.as_deref(), Some(&[1, 0, 1][..]));
        assert_eq!(ds.graph.adjacency.edges(), &[(0, 1), (0, 2)]);
        assert_eq!(
            ds.stats,
            LoadStats { dropped_dangling: 1, dropped_self_loops: 1, duplicate_links: 1 }
        );
        assert!(ds.graph.features.values().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(ds.manifest().edges, 2);
        assert!(matches!(detect_dataset(dir.path()).unwrap(), DatasetFiles::Linqs { .. }));
    }

    #[test]
    fn dangling_citation_is_counted() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "a.content", "x 1 0 A\ny 0 1 B\n");
        let e = write(dir.path(), "a.cites", "x y\nx nowhere\n");
        let ds = load_content_cites(&c, &e).unwrap();
        assert_eq!(ds.stats.dropped_dangling, 1);
        assert_eq!(ds.graph.adjacency.num_edges(), 1);
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "a.content", "x 1 0 A\ny 0 B\n");
        let e = write(dir.path(), "a.cites", "");
        match load_content_cites(&c, &e) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let c = write(dir.path(), "b.content", "x 1 0 A\n");
        let e = write(dir.path(), "b.cites", "x\n");
        assert!(matches!(load_content_cites(&c, &e), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn line_order_does_not_matter() {
        let dir = tempfile::tempdir().unwrap();
        let mut content: Vec<String> = (0..12)
            .map(|i| format!("n{i} {} {} {} c{}", i % 2, (i / 2) % 2, (i / 4) % 2, i % 3))
            .collect();
        let mut cites: Vec<String> = (0..12).map(|i| format!("n{} n{}", i, (i * 5 + 1) % 12)).collect();
        let load = |content: &[String], cites: &[String], tag: &str| {
            let c = write(dir.path(), &format!("{tag}.content"), &content.join("\n"));
            let e = write(dir.path(), &format!("{tag}.cites"), &cites.join("\n"));
            load_content_cites(&c, &e).unwrap()
        };
        let a = load(&content, &cites, "a");
        let mut r = crate::rng::stream(1, crate::rng::Stream::Data);
        content.shuffle(&mut r);
        cites.shuffle(&mut r);
        let b = load(&content, &cites, "b");
        assert_eq!(a.class_names, b.class_names);
        assert_eq!(a.stats, b.stats);
        for (ia, id) in a.node_ids.iter().enumerate() {
            let ib = b.id_map[id];
            assert_eq!(a.graph.features.row(ia), b.graph.features.row(ib));
            assert_eq!(a.graph.labels.as_ref().unwrap()[ia], b.graph.labels.as_ref().unwrap()[ib]);
            let na: BTreeSet<_> = a.graph.adjacency.neighbors(ia).iter().map(|&k| &a.node_ids[k]).collect();
            let nb: BTreeSet<_> = b.graph.adjacency.neighbors(ib).iter().map(|&k| &b.node_ids[k]).collect();
            assert_eq!(na, nb);
        }
    }

    const PUBMED_NODES: &str = "NODE\tpaper\n\
cat=1,2,3:label\tnumeric:w-rat:0.0\tnumeric:w-insulin:0.0\tnumeric:w-cell:0.0\tstring:summary\n\
101\tlabel=1\tw-rat=0.25\tw-cell=0.5\tsummary=w-rat,w-cell\n\
102\tlabel=3\tw-insulin=0.125\tsummary=w-insulin\n\
103\tlabel=2\tsummary=\n";
    const PUBMED_CITES: &str = "DIRECTED\tcites\nNO_FEATURES\n\
1\tpaper:101\t|\tpaper:102\n\
2\tpaper:103\t|\tpaper:102\n\
3\tpaper:999\t|\tpaper:102\n";

    #[test]
    fn pubmed_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "Pubmed-Diabetes.NODE.paper.tab", PUBMED_NODES);
        let c = write(dir.path(), "Pubmed-Diabetes.DIRECTED.cites.tab", PUBMED_CITES);
        let ds = load_pubmed_files(&n, &c).unwrap();
        assert_eq!((ds.graph.num_nodes(), ds.graph.num_features(), ds.class_names.len()), (3, 3, 3));
        assert_eq!(ds.graph.features.row(0), &[0.25, 0.0, 0.5]);
        assert_eq!(ds.graph.features.row(1), &[0.0, 0.125, 0.0]);
        assert_eq!(ds.graph.labels.as_deref(), Some(&[0, 2, 1][..]));
        assert_eq!(ds.graph.adjacency.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(ds.stats.dropped_dangling, 1);
        assert!(ds.graph.features.values().iter().all(|&v| v >= 0.0));
        assert!(matches!(detect_dataset(dir.path()).unwrap(), DatasetFiles::Pubmed { .. }));
    }

    #[test]
    fn pubmed_unknown_word_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = PUBMED_NODES.replace("w-insulin=0.125", "w-zebra=0.125");
        let n = write(dir.path(), "x.NODE.paper.tab", &bad);
        let c = write(dir.path(), "x.DIRECTED.cites.tab", PUBMED_CITES);
        assert!(matches!(load_pubmed_files(&n, &c), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn unknown_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "notes.txt", "hello");
        assert!(detect_dataset(dir.path()).is_err());
    }
}
