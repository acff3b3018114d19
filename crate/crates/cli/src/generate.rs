use std::path::PathBuf;

use an2vec::synth::{generate_featured, save_featured_graph, FeatureConfig, GraphManifest, SbmConfig};
use anyhow::Result;
use clap::Args;
use serde_json::json;

use crate::manifest::RunRecorder;

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Number of communities (and colours).
    #[arg(long, default_value_t = 100)]
    pub m: usize,
    /// Nodes per community.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0.25)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    pub p_out: f64,
    /// Fraction of nodes whose colour stays equal to their community.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &GenerateArgs) -> Result<()> {
    let mut rec = RunRecorder::new("generate", &args.out);
    let outcome = execute(args, &mut rec);
    rec.finish(outcome)
}

fn execute(args: &GenerateArgs, rec: &mut RunRecorder) -> Result<()> {
    let sbm = SbmConfig { m: args.m, n: args.n, p_in: args.p_in, p_out: args.p_out };
    let fcfg = FeatureConfig { alpha: args.alpha, noise_sigma: args.noise_sigma };
    rec.config = json!({ "sbm": sbm, "features": fcfg });
    rec.seed = Some(args.seed);
    sbm.validate()?;
    fcfg.validate()?;

    let graph = generate_featured(&sbm, &fcfg, args.seed)?;
    let manifest = GraphManifest {
        schema_version: 1,
        nodes: graph.num_nodes(),
        features: graph.num_features(),
        edges: graph.adjacency.num_edges(),
        sbm: Some(sbm),
        feature_config: Some(fcfg),
        seed: Some(args.seed),
    };
    for path in save_featured_graph(&graph, &args.out, &manifest)? {
        rec.artifact(&path);
    }
    println!(
        "generated {} nodes, {} edges, {} features in {}",
        manifest.nodes,
        manifest.edges,
        manifest.features,
        args.out.display()
    );
    Ok(())
}
