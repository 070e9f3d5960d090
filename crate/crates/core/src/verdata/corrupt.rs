//! Action-segment corruptions used to synthesize negative samples.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::VerdataError;
use crate::sim::{Action, ACTION_DIM, GRIPPER_DIM};

/// Two disjoint index pairs exchanged by a temporal swap.
pub type SwapPairs = [(usize, usize); 2];

/// Exchange the actions of two disjoint index pairs drawn without
/// replacement. Returns the corrupted sequence and the pairs used.
pub fn temporal_swap(actions: &[Action], rng: &mut impl Rng) -> Result<(Vec<Action>, SwapPairs), VerdataError> {
    if actions.len() < 4 {
        return Err(VerdataError::TooShort { op: "temporal_swap", len: actions.len(), min: 4 });
    }
    let idx = index::sample(rng, actions.len(), 4).into_vec();
    let pairs = [(idx[0], idx[1]), (idx[2], idx[3])];
    Ok((temporal_swap_with(actions, pairs), pairs))
}

/// [`temporal_swap`] with fixed pairs.
pub fn temporal_swap_with(actions: &[Action], pairs: SwapPairs) -> Vec<Action> {
    let mut out = actions.to_vec();
    for (a, b) in pairs {
        out.swap(a, b);
    }
    out
}

/// Negate the listed coordinates of every action.
pub fn gripper_flip(actions: &[Action], dims: &[usize]) -> Result<Vec<Action>, VerdataError> {
    if let Some(&d) = dims.iter().find(|&&d| d >= ACTION_DIM) {
        return Err(VerdataError::Dimension(d));
    }
    Ok(actions
        .iter()
        .map(|a| {
            let mut a = *a;
            for &d in dims {
                a[d] = -a[d];
            }
            a
        })
        .collect())
}

/// Add i.i.d. `N(0, sigma^2)` noise to every coordinate of the actions at
/// indices `>= ceil(len / 2)`.
pub fn late_noise(actions: &[Action], sigma: f64, rng: &mut impl Rng) -> Result<Vec<Action>, VerdataError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(VerdataError::Config(format!("late-noise sigma {sigma} must be finite and non-negative")));
    }
    let mut out = actions.to_vec();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| VerdataError::Config(e.to_string()))?;
    for a in out.iter_mut().skip(actions.len().div_ceil(2)) {
        for v in a.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(out)
}

/// Scale the motion coordinates of a random suffix. The suffix start is
/// uniform over `1..len` and the factor uniform over `range`.
pub fn tail_scale(actions: &[Action], range: (f64, f64), rng: &mut impl Rng) -> Result<(Vec<Action>, usize, f64), VerdataError> {
    if actions.len() < 2 {
        return Err(VerdataError::TooShort { op: "tail_scale", len: actions.len(), min: 2 });
    }
    if !(0.0 <= range.0 && range.0 <= range.1 && range.1.is_finite()) {
        return Err(VerdataError::Config(format!("bad tail-scale range {range:?}")));
    }
    let start = rng.random_range(1..actions.len());
    let scale = rng.random_range(range.0..=range.1);
    Ok((tail_scale_with(actions, start, scale), start, scale))
}

/// [`tail_scale`] with a fixed suffix start and factor.
pub fn tail_scale_with(actions: &[Action], start: usize, scale: f64) -> Vec<Action> {
    let mut out = actions.to_vec();
    for a in out.iter_mut().skip(start) {
        for (d, v) in a.iter_mut().enumerate() {
            if d != GRIPPER_DIM {
                *v *= scale;
            }
        }
    }
    out
}
