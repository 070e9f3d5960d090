//! Chunked execution with fixed or verifier-gated replanning, and the
//! benchmark harness built on it.

mod benchmark;
mod report;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use benchmark::{
    read_episodes, run_benchmark, summarize, summary_csv, write_benchmark, BenchmarkConfig, BenchmarkOutput, EpisodeRow, SummaryRow,
    EPISODES_FILE, SUMMARY_FILE, TIMING_FILE,
};
pub use report::{compare_report, frontier_svg, summary_table, Report, FRONTIER_FILE};

use crate::sim::{Action, Env, Latent, SimError, TaskId, TaskSpec};
use crate::verifier::{KvCache, Verifier, VerifierError};
use crate::wam::{PredictedRollout, WamError, WorldActionModel};

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("bad execution policy: {0}")]
    Policy(String),
    #[error("verifier checks {verifier} actions but the policy expects {policy}")]
    CheckHorizon { policy: usize, verifier: usize },
    #[error("benchmark output: {0}")]
    Output(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Wam(#[from] WamError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How many predicted actions run before the next model call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExecPolicy {
    /// Execute the first `n` actions of every chunk.
    Fixed { n: usize },
    /// Execute the whole chunk unless a check scores below `tau`. A check of
    /// the next `k` actions runs every `c` executed steps.
    Adaptive { tau: f64, k: usize, c: usize },
}

impl ExecPolicy {
    pub fn validate(&self, h: usize) -> Result<(), ExecError> {
        match *self {
            ExecPolicy::Fixed { n } if n == 0 || n > h => Err(ExecError::Policy(format!("fixed chunk {n} must lie in 1..={h}"))),
            ExecPolicy::Adaptive { tau, k, c } => {
                if !(tau > 0.0 && tau < 1.0) {
                    return Err(ExecError::Policy(format!("tau {tau} must lie in (0, 1)")));
                }
                if c == 0 || k == 0 || k > h {
                    return Err(ExecError::Policy(format!("need c >= 1 and 1 <= k={k} <= {h}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            ExecPolicy::Fixed { n } => format!("fixed-{n}"),
            ExecPolicy::Adaptive { .. } => "adaptive".to_string(),
        }
    }

    /// Actions executed from one chunk when no check rejects it.
    fn limit(&self, h: usize) -> usize {
        match *self {
            ExecPolicy::Fixed { n } => n,
            ExecPolicy::Adaptive { .. } => h,
        }
    }
}

/// Whether an adaptive policy checks before executing chunk action
/// `executed`: after every `c` executed steps while `k` actions remain.
pub fn check_due(executed: usize, h: usize, k: usize, c: usize) -> bool {
    executed >= c && executed.is_multiple_of(c) && executed + k <= h
}

/// A scorer of the next `k` actions of a chunk given the real observation.
pub trait ChunkVerifier: Sync {
    /// Per-chunk state built once after each model call.
    type Cache;
    fn k(&self) -> usize;
    fn prepare(&self, rollout: &PredictedRollout) -> Result<Self::Cache, ExecError>;
    fn score(&self, cache: &Self::Cache, rollout: &PredictedRollout, o_real: &Latent, t_off: usize) -> Result<f64, ExecError>;
    fn prepare_flops(&self, _horizon: usize) -> u64 {
        0
    }
    fn check_flops(&self) -> u64 {
        0
    }
}

impl ChunkVerifier for Verifier {
    type Cache = KvCache;

    fn k(&self) -> usize {
        self.config().k
    }

    fn prepare(&self, rollout: &PredictedRollout) -> Result<KvCache, ExecError> {
        Ok(self.cache_build(rollout)?)
    }

    fn score(&self, cache: &KvCache, rollout: &PredictedRollout, o_real: &Latent, t_off: usize) -> Result<f64, ExecError> {
        Ok(self.score_cached(cache, rollout.origin_step, o_real, t_off)?)
    }

    fn prepare_flops(&self, horizon: usize) -> u64 {
        self.cache_flops(horizon)
    }

    fn check_flops(&self) -> u64 {
        Verifier::check_flops(self)
    }
}

/// Returns the same score for every check.
#[derive(Clone, Copy, Debug)]
pub struct ConstVerifier {
    pub score: f64,
    pub k: usize,
}

impl ChunkVerifier for ConstVerifier {
    type Cache = ();

    fn k(&self) -> usize {
        self.k
    }

    fn prepare(&self, _: &PredictedRollout) -> Result<(), ExecError> {
        Ok(())
    }

    fn score(&self, _: &(), _: &PredictedRollout, _: &Latent, _: usize) -> Result<f64, ExecError> {
        Ok(self.score)
    }
}

/// Replays a fixed list of scores, one per check in call order (cycling).
#[derive(Debug)]
pub struct ScriptedVerifier {
    scores: Vec<f64>,
    k: usize,
    next: AtomicUsize,
}

impl ScriptedVerifier {
    pub fn new(scores: Vec<f64>, k: usize) -> Self {
        assert!(!scores.is_empty(), "scripted verifier needs scores");
        Self { scores, k, next: AtomicUsize::new(0) }
    }
}

impl ChunkVerifier for ScriptedVerifier {
    type Cache = ();

    fn k(&self) -> usize {
        self.k
    }

    fn prepare(&self, _: &PredictedRollout) -> Result<(), ExecError> {
        Ok(())
    }

    fn score(&self, _: &(), _: &PredictedRollout, _: &Latent, _: usize) -> Result<f64, ExecError> {
        let i = self.next.fetch_add(1, Ordering::Relaxed);
        Ok(self.scores[i % self.scores.len()])
    }
}

/// Counts `predict` calls of the wrapped model.
pub struct CountingWam<'a, W> {
    inner: &'a W,
    calls: AtomicUsize,
}

impl<'a, W: WorldActionModel> CountingWam<'a, W> {
    pub fn new(inner: &'a W) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<W: WorldActionModel> WorldActionModel for CountingWam<'_, W> {
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn ratio(&self) -> usize {
        self.inner.ratio()
    }

    fn predict(&self, obs: &Latent, task: TaskId, origin_step: usize) -> Result<PredictedRollout, WamError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(obs, task, origin_step)
    }

    fn semantic_tokens(&self, task: TaskId) -> Vec<Latent> {
        self.inner.semantic_tokens(task)
    }

    fn forward_flops(&self) -> u64 {
        self.inner.forward_flops()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: Action,
    /// Score of the check run before this step, if any.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    /// Episode step at which the check ran.
    pub step: usize,
    pub t_off: usize,
    pub score: f64,
    pub replan: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub records: Vec<StepRecord>,
    pub checks: Vec<CheckRecord>,
    pub success: bool,
    pub steps: usize,
    pub wam_calls: usize,
    pub verifier_checks: usize,
    /// Model calls triggered by a rejected check.
    pub replans: usize,
    pub wam_flops: u64,
    pub verifier_flops: u64,
}

/// Run one episode under `policy`. `verifier` is required for adaptive
/// policies and ignored by fixed ones.
pub fn run_episode<W, V>(policy: &ExecPolicy, spec: &TaskSpec, wam: &W, verifier: Option<&V>) -> Result<ExecutionTrace, ExecError>
where
    W: WorldActionModel + ?Sized,
    V: ChunkVerifier,
{
    let h = wam.horizon();
    policy.validate(h)?;
    let gate = match *policy {
        ExecPolicy::Adaptive { tau, k, c } => {
            let v = verifier.ok_or_else(|| ExecError::Policy("adaptive execution needs a verifier".into()))?;
            if v.k() != k {
                return Err(ExecError::CheckHorizon { policy: k, verifier: v.k() });
            }
            Some((v, tau, k, c))
        }
        ExecPolicy::Fixed { .. } => None,
    };
    let limit = policy.limit(h);
    let (mut env, mut obs) = Env::reset(spec)?;
    let mut trace = ExecutionTrace {
        records: Vec::new(),
        checks: Vec::new(),
        success: false,
        steps: 0,
        wam_calls: 0,
        verifier_checks: 0,
        replans: 0,
        wam_flops: 0,
        verifier_flops: 0,
    };
    let mut rejected = false;
    while !env.is_done() {
        let rollout = wam.predict(&obs, spec.task_id, env.state().step_index)?;
        if rollout.horizon() != h || rollout.actions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ExecError::Wam(WamError::Dimension(format!("model returned {} actions for horizon {h}", rollout.horizon()))));
        }
        trace.wam_calls += 1;
        trace.wam_flops += wam.forward_flops();
        trace.replans += rejected as usize;
        rejected = false;
        let cache = match gate {
            Some((v, ..)) => {
                trace.verifier_flops += v.prepare_flops(h);
                Some(v.prepare(&rollout)?)
            }
            None => None,
        };
        for executed in 0..limit {
            if env.is_done() {
                break;
            }
            let mut score = None;
            if let (Some((v, tau, k, c)), Some(cache)) = (gate, cache.as_ref()) {
                if check_due(executed, h, k, c) {
                    let e = v.score(cache, &rollout, &obs, executed)?;
                    trace.verifier_checks += 1;
                    trace.verifier_flops += v.check_flops();
                    // Inclusive gate: e == tau executes.
                    rejected = e < tau;
                    trace.checks.push(CheckRecord { step: env.state().step_index, t_off: executed, score: e, replan: rejected });
                    if rejected {
                        break;
                    }
                    score = Some(e);
                }
            }
            let action = rollout.actions[executed];
            obs = env.step(&action)?.latent;
            trace.records.push(StepRecord { action, score });
        }
    }
    trace.success = env.succeeded();
    trace.steps = env.state().step_index;
    Ok(trace)
}

/// Model calls of an abstract episode that runs exactly `steps` steps while
/// the i-th check receives `scores[i % len]`.
pub fn replay_gate(scores: &[f64], tau: f64, steps: usize, h: usize, k: usize, c: usize) -> usize {
    let mut calls = 0;
    let mut t = 0;
    let mut i = 0;
    while t < steps {
        calls += 1;
        let mut executed = 0;
        while executed < h && t < steps {
            if check_due(executed, h, k, c) {
                let e = scores[i % scores.len()];
                i += 1;
                if e < tau {
                    break;
                }
            }
            executed += 1;
            t += 1;
        }
    }
    calls
}

#[cfg(test)]
mod tests;
