//! Mixture-of-horizon window sampling.
//!
//! Episode steps are 1-based: observation `o_s` precedes action `a_s`. For a
//! conditioning step `s` the targets are
//!
//! * actions `a_{τ_i}` with `τ_i = min(s + i, T)`, `i = 0..H`
//! * latents `o_{υ_j}` with `υ_j = min(s + (j+1)·r, T)`, `j = 0..H/r`
//!
//! Latent slot `j` therefore lines up with the frame reached after `(j+1)·r`
//! actions, the same convention [`PredictedRollout`](super::PredictedRollout)
//! uses at inference time.

use rand::Rng;

use super::WamError;
use crate::sim::{Action, EpisodeRecord, Latent, TaskId};

/// Chunk-relative timestep of latent slot `j` (0-based).
pub fn slot_time(j: usize, r: usize) -> usize {
    (j + 1) * r
}

/// Inverse of [`slot_time`]: the slot whose frame sits `dt` steps after the
/// chunk origin.
pub fn time_slot(dt: usize, r: usize) -> Option<usize> {
    if r == 0 || dt == 0 || !dt.is_multiple_of(r) {
        None
    } else {
        Some(dt / r - 1)
    }
}

pub fn check_horizon(h: usize, r: usize) -> Result<(), WamError> {
    if r == 0 || h == 0 || !h.is_multiple_of(r) {
        return Err(WamError::Horizon { h, r });
    }
    Ok(())
}

/// 1-based `(action indices, latent indices)` for conditioning step `s`.
pub fn window_indices(t: usize, s: usize, h: usize, r: usize) -> Result<(Vec<usize>, Vec<usize>), WamError> {
    check_horizon(h, r)?;
    if t == 0 || s == 0 || s > t {
        return Err(WamError::Window(format!("conditioning step {s} outside 1..={t}")));
    }
    let actions = (0..h).map(|i| (s + i).min(t)).collect();
    let latents = (0..h / r).map(|j| (s + slot_time(j, r)).min(t)).collect();
    Ok((actions, latents))
}

/// One supervised example for the world-action model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainWindow {
    pub episode: usize,
    pub task: TaskId,
    /// 1-based conditioning step.
    pub s: usize,
    pub conditioning: Latent,
    pub actions: Vec<Action>,
    pub latents: Vec<Latent>,
}

impl TrainWindow {
    pub fn from_episode(episode: usize, ep: &EpisodeRecord, s: usize, h: usize, r: usize) -> Result<Self, WamError> {
        let (ai, li) = window_indices(ep.len(), s, h, r)?;
        Ok(Self {
            episode,
            task: ep.task_id,
            s,
            conditioning: ep.latents[s - 1].clone(),
            actions: ai.iter().map(|&i| ep.actions[i - 1]).collect(),
            latents: li.iter().map(|&i| ep.latents[i - 1].clone()).collect(),
        })
    }
}

/// Draw `s ~ U{1..T}` and build the clamped, tail-padded window.
pub fn sample_training_window(episode: usize, ep: &EpisodeRecord, h: usize, r: usize, rng: &mut impl Rng) -> Result<TrainWindow, WamError> {
    check_horizon(h, r)?;
    if ep.is_empty() {
        return Err(WamError::Window("episode has no steps".into()));
    }
    let s = rng.random_range(1..=ep.len());
    TrainWindow::from_episode(episode, ep, s, h, r)
}
