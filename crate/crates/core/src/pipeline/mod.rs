//! Stage driver: each stage reads its upstream artifacts, checks they were
//! produced under the current config by content hash, and writes its own
//! artifacts plus a manifest.

mod config;

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{DemoConfig, RunConfig, CONFIG_VERSION};

use crate::exec::{
    compare_report, read_episodes, run_benchmark, summarize, write_benchmark, ExecError, ExecPolicy, SummaryRow, EPISODES_FILE,
    FRONTIER_FILE,
};
use crate::nn::params::stream_seed;
use crate::nn::{Checkpoint, NnError};
use crate::sim::{generate_demo_with_miss, read_demos, write_demos, EpisodeRecord, SimError, TaskId, TaskSpec};
use crate::verdata::{build_dataset, grasp_segment_stats, read_dataset, write_dataset, CorruptionStats, Dataset, VerdataError};
use crate::verifier::{train_verifier, Ablation, Verifier, VerifierError, VerifierEval, VerifierInput, VerifierTrainLog};
use crate::wam::{train_wam, ToyWam, WamError, WamTrainLog};

pub const SNAPSHOT_FILE: &str = "config.snapshot.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEMOS_FILE: &str = "demos.jsonl";
pub const WAM_FILE: &str = "wam.ckpt";
pub const VERDATA_FILE: &str = "verdata.jsonl";
pub const VERIFIER_FILE: &str = "verifier.ckpt";
pub const REPORT_FILE: &str = "report.txt";

/// Environment variable that overrides the output directory.
pub const ENV_OUT: &str = "FFDC_OUT";
/// Environment variable that overrides the worker thread count.
pub const ENV_THREADS: &str = "FFDC_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Schema(String),
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("missing {what} at {path}; run `{stage}` first")]
    Missing { what: &'static str, path: PathBuf, stage: &'static str },
    #[error(
        "{stage} artifacts in {dir} were built for config hash {found}, the current config gives {expected}; rerun `{stage}` with --force"
    )]
    HashMismatch { stage: &'static str, dir: PathBuf, expected: String, found: String },
    #[error("{0} does not match the digest recorded in its manifest")]
    Tampered(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Wam(#[from] WamError),
    #[error(transparent)]
    Verdata(#[from] VerdataError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Provenance record written next to every stage's artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    /// SHA-256 of each artifact file, by file name.
    pub artifacts: BTreeMap<String, String>,
    pub details: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifierStageResult {
    pub ablation: Ablation,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub heldout: VerifierEval,
    pub train: VerifierEval,
    pub log: Vec<VerifierTrainLog>,
    pub seconds: f64,
}

pub struct Pipeline {
    cfg: RunConfig,
    out: PathBuf,
    force: bool,
}

fn sha_file(path: &Path) -> Result<String, PipelineError> {
    Ok(crate::sha256_hex(&std::fs::read(path)?))
}

impl Pipeline {
    /// `out` overrides the config's output directory.
    pub fn new(cfg: RunConfig, out: Option<PathBuf>, force: bool) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let out = out.unwrap_or_else(|| cfg.out.clone());
        Ok(Self { cfg: RunConfig { out: out.clone(), ..cfg }, out, force })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn demos_dir(&self) -> PathBuf {
        self.out.join("demos")
    }

    pub fn wam_dir(&self) -> PathBuf {
        self.out.join("wam")
    }

    pub fn verdata_dir(&self) -> PathBuf {
        self.out.join("verdata")
    }

    pub fn verifier_dir(&self, a: Ablation) -> PathBuf {
        self.out.join("verifier").join(a.name())
    }

    pub fn benchmark_dir(&self, a: Ablation) -> PathBuf {
        self.out.join("benchmark").join(a.name())
    }

    /// Create a stage directory, refusing to overwrite a finished stage
    /// unless forced.
    fn prepare_dir(&self, dir: &Path) -> Result<(), PipelineError> {
        if dir.join(MANIFEST_FILE).exists() && !self.force {
            return Err(PipelineError::Exists(dir.to_path_buf()));
        }
        std::fs::create_dir_all(dir)?;
        // A stale manifest must not vouch for half-written artifacts.
        let _ = std::fs::remove_file(dir.join(MANIFEST_FILE));
        Ok(())
    }

    fn finish(
        &self,
        dir: &Path,
        stage: &str,
        hash: String,
        files: &[&str],
        details: serde_json::Value,
    ) -> Result<StageManifest, PipelineError> {
        std::fs::write(dir.join(SNAPSHOT_FILE), self.cfg.to_json())?;
        let mut artifacts = BTreeMap::new();
        for f in files {
            artifacts.insert(f.to_string(), sha_file(&dir.join(f))?);
        }
        let m = StageManifest { stage: stage.to_string(), config_hash: hash, artifacts, details };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(m)
    }

    /// Load and verify an upstream stage's manifest.
    fn upstream(&self, dir: &Path, stage: &'static str, expected: String) -> Result<StageManifest, PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(PipelineError::Missing { what: "stage manifest", path, stage });
        }
        let m: StageManifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if m.config_hash != expected {
            return Err(PipelineError::HashMismatch { stage, dir: dir.to_path_buf(), expected, found: m.config_hash });
        }
        for (file, digest) in &m.artifacts {
            let p = dir.join(file);
            if sha_file(&p)? != *digest {
                return Err(PipelineError::Tampered(p));
            }
        }
        Ok(m)
    }

    pub fn gen_demos(&self) -> Result<Vec<EpisodeRecord>, PipelineError> {
        let dir = self.demos_dir();
        self.prepare_dir(&dir)?;
        let d = &self.cfg.demos;
        let specs: Vec<(TaskSpec, bool)> = d
            .tasks
            .iter()
            .flat_map(|&t| {
                (0..d.per_task).map(move |i| {
                    let miss = d.missed_grasp_every > 0 && i % d.missed_grasp_every == d.missed_grasp_every - 1;
                    (TaskSpec::new(t, d.seed_base + i as u64, &self.cfg.env), miss)
                })
            })
            .collect();
        let demos: Vec<EpisodeRecord> = specs
            .par_iter()
            .map(|(s, miss)| {
                let radius = miss.then(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(s.seed, &format!("demo.miss.{}", s.task_id)));
                    let [lo, hi] = d.missed_grasp_radius;
                    rng.random_range(lo..=hi)
                });
                generate_demo_with_miss(s, &self.cfg.expert, radius)
            })
            .collect::<Result<_, _>>()?;
        let mut w = BufWriter::new(std::fs::File::create(dir.join(DEMOS_FILE))?);
        write_demos(&mut w, &demos)?;
        w.flush()?;
        let successes = demos.iter().filter(|e| e.success).count();
        let mean_len = demos.iter().map(|e| e.len()).sum::<usize>() as f64 / demos.len() as f64;
        if successes < demos.len() {
            log::warn!("{} of {} demonstrations failed", demos.len() - successes, demos.len());
        }
        self.finish(
            &dir,
            "gen-demos",
            self.cfg.demos_hash(),
            &[DEMOS_FILE],
            serde_json::json!({ "episodes": demos.len(), "successes": successes, "mean_length": mean_len }),
        )?;
        Ok(demos)
    }

    pub fn load_demos(&self) -> Result<Vec<EpisodeRecord>, PipelineError> {
        let dir = self.demos_dir();
        self.upstream(&dir, "gen-demos", self.cfg.demos_hash())?;
        let f = std::fs::File::open(dir.join(DEMOS_FILE))?;
        Ok(read_demos(BufReader::new(f))?)
    }

    pub fn train_wam(&self) -> Result<(ToyWam, Vec<WamTrainLog>), PipelineError> {
        let demos = self.load_demos()?;
        let dir = self.wam_dir();
        self.prepare_dir(&dir)?;
        let start = Instant::now();
        let mut wam = ToyWam::new(self.cfg.wam.clone(), stream_seed(self.cfg.seed, "wam.init"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, "wam.train"));
        let log = train_wam(&mut wam, &demos, &self.cfg.wam_train, &mut rng)?;
        std::fs::write(dir.join(WAM_FILE), wam.to_checkpoint().to_bytes())?;
        let last = log.last().cloned();
        self.finish(
            &dir,
            "train-wam",
            self.cfg.wam_hash(),
            &[WAM_FILE],
            serde_json::json!({ "final": last, "log": log, "seconds": start.elapsed().as_secs_f64() }),
        )?;
        Ok((wam, log))
    }

    pub fn load_wam(&self) -> Result<ToyWam, PipelineError> {
        let dir = self.wam_dir();
        self.upstream(&dir, "train-wam", self.cfg.wam_hash())?;
        let ck = Checkpoint::from_bytes(&std::fs::read(dir.join(WAM_FILE))?)?;
        Ok(ToyWam::from_checkpoint(&ck)?)
    }

    pub fn build_verdata(&self) -> Result<(Dataset, CorruptionStats), PipelineError> {
        let demos = self.load_demos()?;
        let wam = self.load_wam()?;
        let dir = self.verdata_dir();
        self.prepare_dir(&dir)?;
        let start = Instant::now();
        let (k, seed) = (self.cfg.verifier.k, stream_seed(self.cfg.seed, "verdata"));
        let ds = build_dataset(&demos, &wam, &self.cfg.env, &self.cfg.expert, k, &self.cfg.verdata, seed, &self.cfg.verdata_hash())?;
        let hard: Vec<EpisodeRecord> = demos.iter().filter(|d| d.task_id == TaskId::InsertHard).cloned().collect();
        let stats = grasp_segment_stats(&hard, &self.cfg.env, &self.cfg.expert, k, &self.cfg.verdata, seed)?;
        let mut w = BufWriter::new(std::fs::File::create(dir.join(VERDATA_FILE))?);
        write_dataset(&mut w, &ds)?;
        w.flush()?;
        drop(w);
        log::info!(
            "dataset: {} samples ({} held out), insert-hard grasp corruption fail rate {:.3}",
            ds.samples.len(),
            ds.manifest.heldout,
            stats.fail_rate()
        );
        self.finish(
            &dir,
            "build-verdata",
            self.cfg.verdata_hash(),
            &[VERDATA_FILE],
            serde_json::json!({
                "dataset": ds.manifest,
                "grasp_fail_rate": stats.fail_rate(),
                "grasp_stats": stats,
                "seconds": start.elapsed().as_secs_f64(),
            }),
        )?;
        Ok((ds, stats))
    }

    pub fn load_verdata(&self) -> Result<Dataset, PipelineError> {
        let dir = self.verdata_dir();
        self.upstream(&dir, "build-verdata", self.cfg.verdata_hash())?;
        let f = std::fs::File::open(dir.join(VERDATA_FILE))?;
        Ok(read_dataset(BufReader::new(f), Some(&self.cfg.verdata_hash()))?)
    }

    pub fn train_verifier(&self, ablation: Ablation) -> Result<(Verifier, VerifierStageResult), PipelineError> {
        let ds = self.load_verdata()?;
        let dir = self.verifier_dir(ablation);
        self.prepare_dir(&dir)?;
        let start = Instant::now();
        let inputs: Vec<(VerifierInput, f64, bool)> =
            ds.samples.iter().map(|s| Ok((s.input()?, f64::from(s.label), s.heldout))).collect::<Result<_, VerifierError>>()?;
        let train: Vec<(&VerifierInput, f64)> = inputs.iter().filter(|x| !x.2).map(|x| (&x.0, x.1)).collect();
        let heldout: Vec<(&VerifierInput, f64)> = inputs.iter().filter(|x| x.2).map(|x| (&x.0, x.1)).collect();
        // Every variant starts from the same seed and sees the same batches.
        let mut v = Verifier::new(self.cfg.verifier_for(ablation), stream_seed(self.cfg.seed, "verifier.init"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, "verifier.train"));
        let log = train_verifier(&mut v, &train, &heldout, &self.cfg.verifier_train, &mut rng)?;
        let result = VerifierStageResult {
            ablation,
            train_samples: train.len(),
            heldout_samples: heldout.len(),
            heldout: v.evaluate(&heldout)?,
            train: v.evaluate(&train)?,
            log,
            seconds: start.elapsed().as_secs_f64(),
        };
        std::fs::write(dir.join(VERIFIER_FILE), v.to_checkpoint().to_bytes())?;
        self.finish(&dir, "train-verifier", self.cfg.verifier_hash(ablation), &[VERIFIER_FILE], serde_json::to_value(&result)?)?;
        Ok((v, result))
    }

    pub fn load_verifier(&self, ablation: Ablation) -> Result<Verifier, PipelineError> {
        let dir = self.verifier_dir(ablation);
        self.upstream(&dir, "train-verifier", self.cfg.verifier_hash(ablation))?;
        let ck = Checkpoint::from_bytes(&std::fs::read(dir.join(VERIFIER_FILE))?)?;
        Ok(Verifier::from_checkpoint(&ck)?)
    }

    /// Benchmark every configured policy; adaptive policies use the
    /// `ablation` verifier.
    pub fn benchmark(&self, ablation: Ablation, threads: usize) -> Result<Vec<SummaryRow>, PipelineError> {
        let wam = self.load_wam()?;
        let adaptive = self.cfg.benchmark.policies.iter().any(|p| matches!(p, ExecPolicy::Adaptive { .. }));
        let verifier = if adaptive { Some(self.load_verifier(ablation)?) } else { None };
        let dir = self.benchmark_dir(ablation);
        self.prepare_dir(&dir)?;
        let start = Instant::now();
        let out = run_benchmark(&wam, verifier.as_ref(), &self.cfg.env, &self.cfg.benchmark, threads)?;
        write_benchmark(&dir, &out)?;
        self.finish(
            &dir,
            "benchmark",
            self.cfg.benchmark_hash(ablation),
            &[EPISODES_FILE, crate::exec::SUMMARY_FILE],
            serde_json::json!({ "threads": threads, "seconds": start.elapsed().as_secs_f64() }),
        )?;
        Ok(out.summary)
    }

    /// Rebuild the table and scatter from stored episode metrics only.
    /// Nothing is written unless the metrics load.
    pub fn report(&self, ablation: Ablation) -> Result<String, PipelineError> {
        let dir = self.benchmark_dir(ablation);
        let path = dir.join(EPISODES_FILE);
        if !path.exists() {
            return Err(PipelineError::Missing { what: "episode metrics", path, stage: "benchmark" });
        }
        self.upstream(&dir, "benchmark", self.cfg.benchmark_hash(ablation))?;
        let rows = read_episodes(BufReader::new(std::fs::File::open(&path)?))?;
        if rows.is_empty() {
            return Err(PipelineError::Missing { what: "episode metrics", path, stage: "benchmark" });
        }
        let report = compare_report(&summarize(&rows));
        let out = self.out.join("report").join(ablation.name());
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join(REPORT_FILE), &report.table)?;
        std::fs::write(out.join(FRONTIER_FILE), &report.svg)?;
        Ok(report.table)
    }
}
