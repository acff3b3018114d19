use std::path::PathBuf;

use an2vec::loss::{CheckInstance, DEFAULT_FD_STEP};
use anyhow::{bail, Result};
use clap::Args;
use serde_json::json;

use crate::manifest::RunRecorder;

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Random instances; they cycle through every decoder, head and overlap.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    pub step: f64,
    /// Exit with status 1 when the worst relative error reaches this.
    #[arg(long, default_value_t = 1e-5)]
    pub max_error: f64,
    /// Directory for grad_check.json and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &GradCheckArgs) -> Result<()> {
    match &args.out {
        Some(out) => {
            let mut rec = RunRecorder::new("grad-check", out);
            rec.seed = Some(args.seed);
            rec.config = json!({
                "instances": args.instances,
                "step": args.step,
                "max_error": args.max_error,
            });
            let outcome = execute(args, Some(&mut rec));
            rec.finish(outcome)
        }
        None => execute(args, None),
    }
}

fn execute(args: &GradCheckArgs, rec: Option<&mut RunRecorder>) -> Result<()> {
    if !(args.step > 0.0 && args.step.is_finite()) {
        return Err(crate::usage!("--step must be positive, got {}", args.step));
    }
    let started = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    let mut rows = Vec::with_capacity(args.instances);
    for inst in CheckInstance::suite(args.seed, args.instances)? {
        let r = inst.check(args.step)?;
        worst = worst.max(r.max_rel_error);
        let s = inst.config.split;
        rows.push(json!({
            "nodes": inst.data.n(),
            "features": inst.config.features,
            "decoder": inst.config.decoder,
            "head": inst.config.head,
            "f_a": s.f_a,
            "f_ax": s.f_ax,
            "f_x": s.f_x,
            "max_rel_error": r.max_rel_error,
            "checked": r.checked,
            "skipped": r.skipped,
            "worst": r.worst.map(|(name, idx)| json!({ "matrix": name, "index": idx })),
        }));
    }
    let passed = worst < args.max_error;
    let report = json!({
        "instances": rows,
        "max_rel_error": worst,
        "threshold": args.max_error,
        "step": args.step,
        "passed": passed,
        "seconds": started.elapsed().as_secs_f64(),
    });
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let (Some(rec), Some(out)) = (rec, &args.out) {
        std::fs::create_dir_all(out)?;
        let path = out.join("grad_check.json");
        std::fs::write(&path, &text)?;
        rec.artifact(&path);
    }
    if !passed {
        bail!("max relative error {worst:.3e} is not below {:e}", args.max_error);
    }
    Ok(())
}
