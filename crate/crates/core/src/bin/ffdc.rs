use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ffdc::pipeline::{Pipeline, PipelineError, RunConfig, ENV_OUT, ENV_THREADS};
use ffdc::verifier::Ablation;

#[derive(Parser)]
#[command(name = "ffdc", about = "World-action-model execution with a future-reality verifier")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// JSON run config; defaults apply to omitted sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config and FFDC_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite finished stage outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Verifier variant to train or benchmark.
    #[arg(long, global = true, default_value = "full")]
    ablation: Ablation,
    /// Concurrent benchmark episodes.
    #[arg(long, global = true)]
    parallel_episodes: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    GenDemos,
    TrainWam,
    BuildVerdata,
    TrainVerifier,
    Benchmark,
    Report,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone().or_else(|| std::env::var_os(ENV_OUT).map(PathBuf::from));
    let threads = match std::env::var(ENV_THREADS) {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| PipelineError::Schema(format!("{ENV_THREADS}={v} is not a count")))?),
        Err(_) => None,
    };
    if let Some(n) = threads {
        // Ignored if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let p = Pipeline::new(cfg, out, cli.force)?;
    match cli.cmd {
        Cmd::GenDemos => {
            let d = p.gen_demos()?;
            println!("wrote {} demonstrations to {}", d.len(), p.demos_dir().display());
        }
        Cmd::TrainWam => {
            let (_, log) = p.train_wam()?;
            if let Some(l) = log.last() {
                println!("wam step {}: action loss {:.5}, latent loss {:.5}", l.step, l.loss_act, l.loss_vid);
            }
        }
        Cmd::BuildVerdata => {
            let (ds, stats) = p.build_verdata()?;
            println!(
                "{} samples ({} positive, {} held out); insert-hard grasp corruption fail rate {:.3}",
                ds.samples.len(),
                ds.manifest.positives,
                ds.manifest.heldout,
                stats.fail_rate()
            );
        }
        Cmd::TrainVerifier => {
            let (_, r) = p.train_verifier(cli.ablation)?;
            println!(
                "{}: held-out accuracy {:.3}, separation {:.3} ({} samples)",
                r.ablation,
                r.heldout.accuracy,
                r.heldout.separation(),
                r.heldout_samples
            );
        }
        Cmd::Benchmark => {
            let n = cli.parallel_episodes.or(threads).unwrap_or_else(rayon::current_num_threads);
            let rows = p.benchmark(cli.ablation, n)?;
            print!("{}", ffdc::exec::summary_table(&rows));
        }
        Cmd::Report => print!("{}", p.report(cli.ablation)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
