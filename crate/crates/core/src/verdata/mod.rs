//! Binary verification dataset: demonstration and rollout windows paired
//! with the real observation at the check step, plus corrupted segments.

mod corrupt;
mod oracle;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use corrupt::{gripper_flip, late_noise, tail_scale, tail_scale_with, temporal_swap, temporal_swap_with, SwapPairs};
pub use oracle::{env_at, replay_segment, Replay};

use crate::nn::params::stream_seed;
use crate::sim::{Action, EnvParams, EpisodeRecord, ExpertGains, Latent, SimError, TaskId, TaskSpec, GRIPPER_DIM};
use crate::verifier::{assemble_input, VerifierError, VerifierInput};
use crate::wam::{PredictedRollout, TrainWindow, WamError, WorldActionModel};

#[derive(Debug, thiserror::Error)]
pub enum VerdataError {
    #[error("{op} needs at least {min} actions, got {len}")]
    TooShort { op: &'static str, len: usize, min: usize },
    #[error("action dimension {0} out of range")]
    Dimension(usize),
    #[error("bad dataset config: {0}")]
    Config(String),
    #[error("dataset archive: {0}")]
    Archive(String),
    #[error("dataset was built for config {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Wam(#[from] WamError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    DemoPos,
    RolloutPos,
    RolloutNeg,
    CorruptSwap,
    CorruptFlip,
    CorruptNoise,
    CorruptTail,
}

impl Provenance {
    pub const ALL: [Provenance; 7] = [
        Provenance::DemoPos,
        Provenance::RolloutPos,
        Provenance::RolloutNeg,
        Provenance::CorruptSwap,
        Provenance::CorruptFlip,
        Provenance::CorruptNoise,
        Provenance::CorruptTail,
    ];
    pub const CORRUPTIONS: [Provenance; 4] =
        [Provenance::CorruptSwap, Provenance::CorruptFlip, Provenance::CorruptNoise, Provenance::CorruptTail];

    pub fn label(self) -> u8 {
        matches!(self, Provenance::DemoPos | Provenance::RolloutPos) as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Provenance::DemoPos => "demo_pos",
            Provenance::RolloutPos => "rollout_pos",
            Provenance::RolloutNeg => "rollout_neg",
            Provenance::CorruptSwap => "corrupt_swap",
            Provenance::CorruptFlip => "corrupt_flip",
            Provenance::CorruptNoise => "corrupt_noise",
            Provenance::CorruptTail => "corrupt_tail",
        }
    }
}

/// One labeled check: a (pseudo-)rollout, the real observation reached
/// `offset` steps into it, and the `k`-step segment to judge.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifierSample {
    /// Source episode; demos come first, then rollouts.
    pub episode: usize,
    pub rollout: PredictedRollout,
    pub o_real: Latent,
    pub offset: usize,
    pub k: usize,
    pub label: u8,
    pub provenance: Provenance,
    pub heldout: bool,
}

impl VerifierSample {
    pub fn input(&self) -> Result<VerifierInput, VerifierError> {
        assemble_input(&self.rollout, &self.o_real, self.offset, self.k)
    }

    fn sort_key(&self) -> (usize, usize, usize, Provenance) {
        (self.episode, self.rollout.origin_step, self.offset, self.provenance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerdataConfig {
    /// Target dataset size before class balancing.
    pub samples: usize,
    /// Share of positives drawn from demonstrations (rest: successful rollouts).
    pub demo_pos_share: f64,
    /// Share of negatives drawn from failed rollouts (rest: corruptions).
    pub rollout_neg_share: f64,
    /// WAM rollouts per task.
    pub rollout_episodes: usize,
    /// First env seed used for rollouts.
    pub rollout_seed_base: u64,
    /// Candidate windows drawn per demonstration.
    pub windows_per_demo: usize,
    pub late_noise_sigma: f64,
    pub tail_scale_range: [f64; 2],
    /// Per-step agent distance under which a segment still tracks the expert.
    pub track_tol: f64,
    /// Every `heldout_every`-th source episode goes to the held-out split.
    pub heldout_every: usize,
}

impl Default for VerdataConfig {
    fn default() -> Self {
        Self {
            samples: 4000,
            demo_pos_share: 0.7,
            rollout_neg_share: 0.2,
            rollout_episodes: 60,
            rollout_seed_base: 500_000,
            windows_per_demo: 12,
            late_noise_sigma: 0.03,
            tail_scale_range: [0.1, 0.6],
            track_tol: 0.008,
            heldout_every: 5,
        }
    }
}

impl VerdataConfig {
    pub fn validate(&self) -> Result<(), VerdataError> {
        let share = |x: f64| (0.0..=1.0).contains(&x);
        if !share(self.demo_pos_share) || !share(self.rollout_neg_share) {
            return Err(VerdataError::Config("shares must lie in [0, 1]".into()));
        }
        if self.samples < 2 || self.heldout_every < 2 || self.windows_per_demo == 0 {
            return Err(VerdataError::Config("samples >= 2, heldout_every >= 2, windows_per_demo >= 1".into()));
        }
        if self.track_tol.is_nan() || self.track_tol <= 0.0 {
            return Err(VerdataError::Config("track_tol must be positive".into()));
        }
        Ok(())
    }

    fn tail_range(&self) -> (f64, f64) {
        (self.tail_scale_range[0], self.tail_scale_range[1])
    }
}

/// Apply one corruption operator to a segment.
pub fn corrupt_segment(op: Provenance, segment: &[Action], cfg: &VerdataConfig, rng: &mut impl Rng) -> Result<Vec<Action>, VerdataError> {
    match op {
        Provenance::CorruptSwap => Ok(temporal_swap(segment, rng)?.0),
        Provenance::CorruptFlip => gripper_flip(segment, &[GRIPPER_DIM]),
        Provenance::CorruptNoise => late_noise(segment, cfg.late_noise_sigma, rng),
        Provenance::CorruptTail => Ok(tail_scale(segment, cfg.tail_range(), rng)?.0),
        other => Err(VerdataError::Config(format!("{} is not a corruption", other.name()))),
    }
}

/// Counts and balance written as the first line of the archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub k: usize,
    pub counts: BTreeMap<Provenance, usize>,
    pub candidates: BTreeMap<Provenance, usize>,
    pub positives: usize,
    pub negatives: usize,
    pub positive_fraction: f64,
    pub heldout: usize,
    /// Corruption candidates rejected because they still tracked the expert.
    pub discarded_corruptions: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<VerifierSample>,
}

impl Dataset {
    pub fn split(&self) -> (Vec<&VerifierSample>, Vec<&VerifierSample>) {
        self.samples.iter().partition(|s| !s.heldout)
    }
}

struct Candidates {
    pos: Vec<VerifierSample>,
    neg: Vec<VerifierSample>,
    discarded: usize,
}

fn demo_spec(d: &EpisodeRecord, params: &EnvParams) -> TaskSpec {
    TaskSpec::new(d.task_id, d.seed, params)
}

/// Chunk predicted "perfectly" by the demonstration itself.
fn pseudo_rollout(wam: &impl WorldActionModel, e: usize, demo: &EpisodeRecord, origin: usize) -> Result<PredictedRollout, VerdataError> {
    let w = TrainWindow::from_episode(e, demo, origin + 1, wam.horizon(), wam.ratio())?;
    Ok(PredictedRollout {
        task: demo.task_id,
        origin_step: origin,
        ratio: wam.ratio(),
        conditioning: w.conditioning,
        actions: w.actions,
        latents: w.latents,
        semantic_tokens: wam.semantic_tokens(demo.task_id),
        kv_cache: None,
    })
}

fn check_offsets(h: usize, r: usize, k: usize) -> Vec<usize> {
    (1..).map(|i| i * r).take_while(|&t| t + k <= h).collect()
}

#[allow(clippy::too_many_arguments)]
fn demo_candidates(
    wam: &impl WorldActionModel,
    e: usize,
    demo: &EpisodeRecord,
    params: &EnvParams,
    gains: &ExpertGains,
    k: usize,
    cfg: &VerdataConfig,
    seed: u64,
) -> Result<Candidates, VerdataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &format!("verdata.demo.{e}")));
    let spec = demo_spec(demo, params);
    let offsets = check_offsets(wam.horizon(), wam.ratio(), k);
    let mut out = Candidates { pos: Vec::new(), neg: Vec::new(), discarded: 0 };
    let t = demo.len();
    if t == 0 || offsets.is_empty() {
        return Ok(out);
    }
    let heldout = e.is_multiple_of(cfg.heldout_every);
    for _ in 0..cfg.windows_per_demo {
        let t_off = offsets[rng.random_range(0..offsets.len())];
        if t_off >= t {
            continue;
        }
        // The check happens while the episode is still running.
        let origin = rng.random_range(0..t - t_off);
        let rollout = pseudo_rollout(wam, e, demo, origin)?;
        let o_real = demo.latents[origin + t_off].clone();
        let sample = |rollout: PredictedRollout, provenance: Provenance| VerifierSample {
            episode: e,
            rollout,
            o_real: o_real.clone(),
            offset: t_off,
            k,
            label: provenance.label(),
            provenance,
            heldout,
        };
        let op = Provenance::CORRUPTIONS[rng.random_range(0..4)];
        let segment = &rollout.actions[t_off..t_off + k];
        let bad = corrupt_segment(op, segment, cfg, &mut rng)?;
        let env = env_at(&spec, &demo.actions, origin + t_off)?;
        if replay_segment(&env, &bad, gains, cfg.track_tol)?.valid {
            out.discarded += 1;
        } else {
            let mut corrupted = rollout.clone();
            corrupted.actions[t_off..t_off + k].copy_from_slice(&bad);
            out.neg.push(sample(corrupted, op));
        }
        out.pos.push(sample(rollout, Provenance::DemoPos));
    }
    Ok(out)
}

/// Execute full chunks open-loop. Every aligned check window of a successful
/// episode is a positive; windows of failed episodes are negatives only when
/// the oracle also rejects them.
#[allow(clippy::too_many_arguments)]
fn rollout_candidates(
    wam: &impl WorldActionModel,
    e: usize,
    spec: &TaskSpec,
    gains: &ExpertGains,
    k: usize,
    cfg: &VerdataConfig,
) -> Result<Candidates, VerdataError> {
    let (mut env, mut obs) = crate::sim::Env::reset(spec)?;
    let (h, r) = (wam.horizon(), wam.ratio());
    let heldout = e.is_multiple_of(cfg.heldout_every);
    let mut windows = Vec::new();
    while !env.is_done() {
        let rollout = wam.predict(&obs, spec.task_id, env.state().step_index)?;
        for i in 0..h {
            if env.is_done() {
                break;
            }
            if i >= r && i % r == 0 && i + k <= h {
                windows.push((rollout.clone(), obs.clone(), i, env.clone()));
            }
            obs = env.step(&rollout.actions[i])?.latent;
        }
    }
    let success = env.succeeded();
    let mut out = Candidates { pos: Vec::new(), neg: Vec::new(), discarded: 0 };
    for (rollout, o_real, offset, snapshot) in windows {
        let provenance = if success {
            Provenance::RolloutPos
        } else if !replay_segment(&snapshot, &rollout.actions[offset..offset + k], gains, cfg.track_tol)?.valid {
            Provenance::RolloutNeg
        } else {
            continue;
        };
        let s = VerifierSample { episode: e, rollout, o_real, offset, k, label: provenance.label(), provenance, heldout };
        if success {
            out.pos.push(s);
        } else {
            out.neg.push(s);
        }
    }
    Ok(out)
}

/// Take `want` samples split `share : 1-share` between two pools, filling a
/// shortfall in one pool from the other.
fn draw_mix(a: &mut Vec<VerifierSample>, b: &mut Vec<VerifierSample>, want: usize, share: f64, rng: &mut impl Rng) -> Vec<VerifierSample> {
    a.shuffle(rng);
    b.shuffle(rng);
    let mut na = ((want as f64) * share).round() as usize;
    let mut nb = want - na;
    if a.len() < na {
        nb += na - a.len();
        na = a.len();
    }
    if b.len() < nb {
        na = (na + nb - b.len()).min(a.len());
        nb = b.len();
    }
    let mut out: Vec<VerifierSample> = a.drain(..na).collect();
    out.extend(b.drain(..nb));
    out
}

/// Build the dataset. Candidates are generated per source episode in
/// parallel from per-episode PRNG streams and merged in episode order.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    demos: &[EpisodeRecord],
    wam: &impl WorldActionModel,
    params: &EnvParams,
    gains: &ExpertGains,
    k: usize,
    cfg: &VerdataConfig,
    seed: u64,
    config_hash: &str,
) -> Result<Dataset, VerdataError> {
    cfg.validate()?;
    if k == 0 || !k.is_multiple_of(wam.ratio()) || k > wam.horizon() {
        return Err(VerdataError::Config(format!("k={k} must be a multiple of r={} within H={}", wam.ratio(), wam.horizon())));
    }
    let demo_parts: Vec<Candidates> =
        demos.par_iter().enumerate().map(|(e, d)| demo_candidates(wam, e, d, params, gains, k, cfg, seed)).collect::<Result<_, _>>()?;
    let specs: Vec<TaskSpec> = TaskId::ALL
        .iter()
        .flat_map(|&task| (0..cfg.rollout_episodes as u64).map(move |i| TaskSpec::new(task, cfg.rollout_seed_base + i, params)))
        .collect();
    let rollout_parts: Vec<Candidates> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| rollout_candidates(wam, demos.len() + i, spec, gains, k, cfg))
        .collect::<Result<_, _>>()?;

    let mut pools: BTreeMap<Provenance, Vec<VerifierSample>> = BTreeMap::new();
    let mut discarded = 0;
    for part in demo_parts.into_iter().chain(rollout_parts) {
        discarded += part.discarded;
        for s in part.pos.into_iter().chain(part.neg) {
            pools.entry(s.provenance).or_default().push(s);
        }
    }
    let candidates: BTreeMap<Provenance, usize> = pools.iter().map(|(p, v)| (*p, v.len())).collect();
    let mut take = |p: Provenance| pools.remove(&p).unwrap_or_default();
    let mut demo_pos = take(Provenance::DemoPos);
    let mut rollout_pos = take(Provenance::RolloutPos);
    let mut rollout_neg = take(Provenance::RolloutNeg);
    let mut corrupt: Vec<VerifierSample> = Provenance::CORRUPTIONS.iter().flat_map(|&p| take(p)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "verdata.balance"));
    let mut warnings = Vec::new();
    let half = cfg.samples / 2;
    let pos = draw_mix(&mut demo_pos, &mut rollout_pos, half, cfg.demo_pos_share, &mut rng);
    let neg = draw_mix(&mut rollout_neg, &mut corrupt, half, cfg.rollout_neg_share, &mut rng);
    if pos.len() < half || neg.len() < half {
        let msg = format!("requested {half}/{half} positives/negatives, got {}/{}", pos.len(), neg.len());
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mix = |v: &[VerifierSample], p: Provenance| v.iter().filter(|s| s.provenance == p).count();
    let rp = mix(&pos, Provenance::RolloutPos);
    let want_rp = half - ((half as f64) * cfg.demo_pos_share).round() as usize;
    if rp < want_rp {
        warnings.push(format!("only {rp} successful-rollout positives (wanted {want_rp})"));
    }
    let rn = mix(&neg, Provenance::RolloutNeg);
    let want_rn = ((half as f64) * cfg.rollout_neg_share).round() as usize;
    if rn < want_rn {
        warnings.push(format!("only {rn} failed-rollout negatives (wanted {want_rn})"));
    }

    let mut samples: Vec<VerifierSample> = pos.into_iter().chain(neg).collect();
    samples.sort_by_key(|s| s.sort_key());
    let mut counts = BTreeMap::new();
    for s in &samples {
        *counts.entry(s.provenance).or_insert(0) += 1;
    }
    let positives = samples.iter().filter(|s| s.label == 1).count();
    let manifest = DatasetManifest {
        config_hash: config_hash.to_string(),
        k,
        counts,
        candidates,
        positives,
        negatives: samples.len() - positives,
        positive_fraction: positives as f64 / samples.len().max(1) as f64,
        heldout: samples.iter().filter(|s| s.heldout).count(),
        discarded_corruptions: discarded,
        warnings,
    };
    Ok(Dataset { manifest, samples })
}

/// Per-operator oracle failure rate of corrupted segments that contain the
/// grasp step of each demonstration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionStats {
    pub attempts: BTreeMap<Provenance, usize>,
    pub failures: BTreeMap<Provenance, usize>,
}

impl CorruptionStats {
    pub fn fail_rate(&self) -> f64 {
        let a: usize = self.attempts.values().sum();
        let f: usize = self.failures.values().sum();
        f as f64 / a.max(1) as f64
    }
}

pub fn grasp_segment_stats(
    demos: &[EpisodeRecord],
    params: &EnvParams,
    gains: &ExpertGains,
    k: usize,
    cfg: &VerdataConfig,
    seed: u64,
) -> Result<CorruptionStats, VerdataError> {
    let mut stats = CorruptionStats::default();
    for (e, demo) in demos.iter().enumerate() {
        let Some(grasp) = demo.states.iter().position(|s| s.holding).map(|i| i - 1) else { continue };
        if demo.len() < k {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &format!("verdata.grasp.{e}")));
        let spec = demo_spec(demo, params);
        let lo = grasp.saturating_sub(k - 1);
        let hi = grasp.min(demo.len() - k);
        for start in lo..=hi {
            let env = env_at(&spec, &demo.actions, start)?;
            let segment = &demo.actions[start..start + k];
            for op in Provenance::CORRUPTIONS {
                let bad = corrupt_segment(op, segment, cfg, &mut rng)?;
                *stats.attempts.entry(op).or_insert(0) += 1;
                if !replay_segment(&env, &bad, gains, cfg.track_tol)?.valid {
                    *stats.failures.entry(op).or_insert(0) += 1;
                }
            }
        }
    }
    Ok(stats)
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    manifest: DatasetManifest,
}

pub fn write_dataset(mut w: impl Write, ds: &Dataset) -> Result<(), VerdataError> {
    serde_json::to_writer(&mut w, &ManifestLine { manifest: ds.manifest.clone() }).map_err(|e| VerdataError::Archive(e.to_string()))?;
    w.write_all(b"\n")?;
    for s in &ds.samples {
        serde_json::to_writer(&mut w, s).map_err(|e| VerdataError::Archive(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read an archive; with `expected_hash`, refuse a dataset built for a
/// different config.
pub fn read_dataset(r: impl BufRead, expected_hash: Option<&str>) -> Result<Dataset, VerdataError> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| VerdataError::Archive("empty archive".into()))??;
    let manifest = serde_json::from_str::<ManifestLine>(&first).map_err(|e| VerdataError::Archive(format!("manifest line: {e}")))?.manifest;
    if let Some(h) = expected_hash {
        if h != manifest.config_hash {
            return Err(VerdataError::HashMismatch { expected: h.to_string(), found: manifest.config_hash });
        }
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: VerifierSample = serde_json::from_str(&line).map_err(|e| VerdataError::Archive(format!("sample {i}: {e}")))?;
        if s.label != s.provenance.label() {
            return Err(VerdataError::Archive(format!("sample {i}: label {} contradicts {}", s.label, s.provenance.name())));
        }
        samples.push(s);
    }
    Ok(Dataset { manifest, samples })
}
