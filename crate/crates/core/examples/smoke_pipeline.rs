//! Run every pipeline stage on the small smoke config and print the report.
//! The smoke budgets only exercise the plumbing; success rates stay near zero.
//!
//! `cargo run --release --example smoke_pipeline -- /tmp/ffdc-smoke`

use std::path::PathBuf;

use ffdc::pipeline::{Pipeline, RunConfig};
use ffdc::verifier::Ablation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ffdc-smoke"));
    let cfg = RunConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json"))?;
    let p = Pipeline::new(cfg, Some(out.clone()), true)?;
    let demos = p.gen_demos()?;
    println!("{} demonstrations", demos.len());
    p.train_wam()?;
    let (ds, stats) = p.build_verdata()?;
    println!("{} verifier samples, grasp corruption fail rate {:.2}", ds.samples.len(), stats.fail_rate());
    let (_, r) = p.train_verifier(Ablation::Full)?;
    println!("held-out accuracy {:.3}", r.heldout.accuracy);
    p.benchmark(Ablation::Full, 1)?;
    print!("{}", p.report(Ablation::Full)?);
    println!("artifacts in {}", out.display());
    Ok(())
}
