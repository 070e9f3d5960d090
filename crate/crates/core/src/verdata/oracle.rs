//! Simulator oracle: does an action segment still track the expert?

use serde::{Deserialize, Serialize};

use crate::sim::{dist, expert_action, Action, Env, ExpertGains, SimError, TaskSpec};

/// Result of replaying a segment and the expert from one snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replay {
    pub valid: bool,
    pub segment_success: bool,
    pub expert_success: bool,
    /// Largest per-step agent distance between the two runs.
    pub max_deviation: f64,
    pub holding_mismatch: bool,
}

/// Execute `segment` open-loop and the expert closed-loop from clones of
/// `env` (same noise stream). The segment is valid when it reaches success,
/// or when the expert does not and every step agrees on holding with the
/// agents at most `tol` apart.
pub fn replay_segment(env: &Env, segment: &[Action], gains: &ExpertGains, tol: f64) -> Result<Replay, SimError> {
    let mut a = env.clone();
    let mut b = env.clone();
    let mut out = Replay { valid: true, segment_success: false, expert_success: false, max_deviation: 0.0, holding_mismatch: false };
    for act in segment {
        if a.is_done() {
            break;
        }
        out.segment_success |= a.step(act)?.success;
        if !b.is_done() {
            let e = expert_action(b.state(), gains);
            out.expert_success |= b.step(&e)?.success;
        }
        if out.segment_success {
            break;
        }
        if !out.expert_success {
            let (sa, sb) = (a.state(), b.state());
            out.holding_mismatch |= sa.holding != sb.holding;
            out.max_deviation = out.max_deviation.max(dist(sa.agent, sb.agent));
        }
    }
    out.valid = out.segment_success || (!out.expert_success && !out.holding_mismatch && out.max_deviation <= tol);
    Ok(out)
}

/// The environment of `spec` after executing `actions[..step]` from reset.
pub fn env_at(spec: &TaskSpec, actions: &[Action], step: usize) -> Result<Env, SimError> {
    let (mut env, _) = Env::reset(spec)?;
    for a in &actions[..step.min(actions.len())] {
        env.step(a)?;
    }
    Ok(env)
}
