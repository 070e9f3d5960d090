use serde::{Deserialize, Serialize};

use super::{dist, Action, EnvState};

/// Proportional controller gains for the scripted expert.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertGains {
    /// Fraction of the remaining offset commanded per step.
    pub gain: f64,
    /// Euclidean speed cap per step.
    pub max_speed: f64,
    /// Close the gripper once the object is this close.
    pub close_radius: f64,
    /// Open the gripper once the held object is this close to the goal.
    pub release_radius: f64,
}

impl Default for ExpertGains {
    fn default() -> Self {
        Self { gain: 0.25, max_speed: 0.015, close_radius: 0.015, release_radius: 0.02 }
    }
}

fn toward(from: [f64; 2], to: [f64; 2], g: &ExpertGains) -> [f64; 2] {
    let mut v = [(to[0] - from[0]) * g.gain, (to[1] - from[1]) * g.gain];
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n > g.max_speed {
        v = [v[0] * g.max_speed / n, v[1] * g.max_speed / n];
    }
    v
}

/// Approach the object, close, carry to the goal, release.
/// A gripper that is closed without holding anything is reopened first.
pub fn expert_action(s: &EnvState, g: &ExpertGains) -> Action {
    if !s.holding {
        if s.gripper > 0.0 {
            let v = toward(s.agent, s.object, g);
            [v[0], v[1], -1.0]
        } else if dist(s.agent, s.object) <= g.close_radius {
            let d = [s.object[0] - s.agent[0], s.object[1] - s.agent[1]];
            [d[0], d[1], 1.0]
        } else {
            let v = toward(s.agent, s.object, g);
            [v[0], v[1], -1.0]
        }
    } else if dist(s.agent, s.goal) <= g.release_radius {
        [s.goal[0] - s.agent[0], s.goal[1] - s.agent[1], -1.0]
    } else {
        let v = toward(s.agent, s.goal, g);
        [v[0], v[1], 1.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Phase;

    fn base() -> EnvState {
        EnvState {
            agent: [0.5, 0.5],
            object: [0.5, 0.5],
            goal: [0.85, 0.5],
            gripper: -1.0,
            holding: false,
            phase: Phase::Transport,
            step_index: 0,
        }
    }

    #[test]
    fn closes_at_object() {
        assert!(expert_action(&base(), &ExpertGains::default())[2] > 0.0);
    }

    #[test]
    fn reopens_failed_grasp() {
        let mut s = base();
        s.gripper = 1.0;
        assert!(expert_action(&s, &ExpertGains::default())[2] < 0.0);
    }

    #[test]
    fn releases_at_goal() {
        let mut s = base();
        s.holding = true;
        s.gripper = 1.0;
        s.agent = s.goal;
        s.object = s.goal;
        assert!(expert_action(&s, &ExpertGains::default())[2] < 0.0);
    }

    #[test]
    fn speed_is_capped() {
        let mut s = base();
        s.object = [0.9, 0.9];
        let a = expert_action(&s, &ExpertGains::default());
        assert!((a[0].hypot(a[1]) - 0.015).abs() < 1e-12);
        assert!(a[2] < 0.0);
    }
}
