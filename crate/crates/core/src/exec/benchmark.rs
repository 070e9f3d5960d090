//! Seeded episode sweeps over policies and tasks.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_episode, CheckRecord, ChunkVerifier, ExecError, ExecPolicy};
use crate::sim::{EnvParams, TaskId, TaskSpec};
use crate::wam::WorldActionModel;

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub tasks: Vec<TaskId>,
    pub episodes_per_task: usize,
    /// Episode `i` of every task uses env seed `seed_base + i`.
    pub seed_base: u64,
    pub policies: Vec<ExecPolicy>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            tasks: TaskId::ALL.to_vec(),
            episodes_per_task: 100,
            seed_base: 1_000_000,
            policies: vec![
                ExecPolicy::Fixed { n: 4 },
                ExecPolicy::Fixed { n: 8 },
                ExecPolicy::Fixed { n: 16 },
                ExecPolicy::Fixed { n: 32 },
                ExecPolicy::Adaptive { tau: 0.5, k: 8, c: 4 },
            ],
        }
    }
}

/// Per-episode result as written to `episodes.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub policy: String,
    pub task: TaskId,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub wam_calls: usize,
    pub verifier_checks: usize,
    pub replans: usize,
    pub wam_flops: u64,
    pub verifier_flops: u64,
    pub checks: Vec<CheckRecord>,
}

/// Aggregate for one (policy, task) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub task: TaskId,
    pub episodes: usize,
    /// Success rate in percent.
    pub sr: f64,
    pub mean_steps: f64,
    pub mean_calls: f64,
    pub mean_checks: f64,
    pub mean_replans: f64,
    pub mean_flops: f64,
}

#[derive(Clone, Debug)]
pub struct BenchmarkOutput {
    pub episodes: Vec<EpisodeRow>,
    pub summary: Vec<SummaryRow>,
    /// Wall-clock seconds per (policy, task) cell, summed over episodes.
    pub wall_seconds: Vec<(String, TaskId, f64)>,
}

/// Run every (policy, task, seed) episode on a pool of `threads` workers;
/// rows come back in (policy, task, seed) order regardless of scheduling.
pub fn run_benchmark<W, V>(
    wam: &W,
    verifier: Option<&V>,
    params: &EnvParams,
    cfg: &BenchmarkConfig,
    threads: usize,
) -> Result<BenchmarkOutput, ExecError>
where
    W: WorldActionModel,
    V: ChunkVerifier,
{
    if cfg.policies.is_empty() || cfg.tasks.is_empty() {
        return Err(ExecError::Policy("benchmark needs at least one policy and one task".into()));
    }
    for p in &cfg.policies {
        p.validate(wam.horizon())?;
    }
    let jobs: Vec<(ExecPolicy, TaskId, u64)> = cfg
        .policies
        .iter()
        .flat_map(|p| cfg.tasks.iter().flat_map(move |&t| (0..cfg.episodes_per_task as u64).map(move |i| (*p, t, cfg.seed_base + i))))
        .collect();
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().map_err(|e| ExecError::Policy(format!("thread pool: {e}")))?;
    let results: Vec<(EpisodeRow, f64)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(policy, task, seed)| {
                let start = Instant::now();
                let spec = TaskSpec::new(task, seed, params);
                let tr = run_episode(&policy, &spec, wam, verifier)?;
                let row = EpisodeRow {
                    policy: policy.label(),
                    task,
                    seed,
                    success: tr.success,
                    steps: tr.steps,
                    wam_calls: tr.wam_calls,
                    verifier_checks: tr.verifier_checks,
                    replans: tr.replans,
                    wam_flops: tr.wam_flops,
                    verifier_flops: tr.verifier_flops,
                    checks: tr.checks,
                };
                Ok((row, start.elapsed().as_secs_f64()))
            })
            .collect::<Result<_, ExecError>>()
    })?;
    let mut wall_seconds: Vec<(String, TaskId, f64)> = Vec::new();
    for (row, secs) in &results {
        match wall_seconds.last_mut() {
            Some((p, t, s)) if *p == row.policy && *t == row.task => *s += secs,
            _ => wall_seconds.push((row.policy.clone(), row.task, *secs)),
        }
    }
    let episodes: Vec<EpisodeRow> = results.into_iter().map(|(r, _)| r).collect();
    let summary = summarize(&episodes);
    Ok(BenchmarkOutput { episodes, summary, wall_seconds })
}

/// Aggregate rows per (policy, task) in order of first appearance.
pub fn summarize(rows: &[EpisodeRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, TaskId)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(p, t)| *p == r.policy && *t == r.task) {
            keys.push((r.policy.clone(), r.task));
        }
    }
    keys.into_iter()
        .map(|(policy, task)| {
            let cell: Vec<&EpisodeRow> = rows.iter().filter(|r| r.policy == policy && r.task == task).collect();
            let n = cell.len() as f64;
            let mean = |f: &dyn Fn(&EpisodeRow) -> f64| cell.iter().map(|r| f(r)).sum::<f64>() / n;
            SummaryRow {
                episodes: cell.len(),
                sr: 100.0 * mean(&|r| r.success as u8 as f64),
                mean_steps: mean(&|r| r.steps as f64),
                mean_calls: mean(&|r| r.wam_calls as f64),
                mean_checks: mean(&|r| r.verifier_checks as f64),
                mean_replans: mean(&|r| r.replans as f64),
                mean_flops: mean(&|r| (r.wam_flops + r.verifier_flops) as f64),
                policy,
                task,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("policy,task,episodes,sr,mean_steps,mean_calls,mean_checks,mean_replans,mean_flops\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.2},{:.4},{:.4},{:.4},{:.4},{:.1}",
            r.policy,
            r.task.name(),
            r.episodes,
            r.sr,
            r.mean_steps,
            r.mean_calls,
            r.mean_checks,
            r.mean_replans,
            r.mean_flops
        );
    }
    out
}

/// Write `episodes.jsonl`, `summary.csv`, `frontier.svg` and `timing.json`
/// into `dir`.
pub fn write_benchmark(dir: &Path, out: &BenchmarkOutput) -> Result<(), ExecError> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(EPISODES_FILE))?);
    for row in &out.episodes {
        serde_json::to_writer(&mut f, row).map_err(|e| ExecError::Output(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    std::fs::write(dir.join(SUMMARY_FILE), summary_csv(&out.summary))?;
    std::fs::write(dir.join(super::FRONTIER_FILE), super::frontier_svg(&out.summary))?;
    let timing: Vec<serde_json::Value> =
        out.wall_seconds.iter().map(|(p, t, s)| serde_json::json!({ "policy": p, "task": t, "wall_seconds": s })).collect();
    std::fs::write(dir.join(TIMING_FILE), serde_json::to_string_pretty(&timing).map_err(|e| ExecError::Output(e.to_string()))?)?;
    Ok(())
}

pub fn read_episodes(r: impl BufRead) -> Result<Vec<EpisodeRow>, ExecError> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| ExecError::Output(format!("episode line {}: {e}", i + 1)))?);
    }
    Ok(rows)
}
