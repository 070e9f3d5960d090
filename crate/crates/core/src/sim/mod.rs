//! Seeded 2D pick-and-place arena with an easy deterministic task and a hard
//! task whose contact phase perturbs the effected motion.
//!
//! Arena is the unit square. Start regions (all uniform):
//!
//! | entity | x range       | y range      |
//! |--------|---------------|--------------|
//! | agent  | [0.05, 0.10]  | [0.40, 0.60] |
//! | object | [0.42, 0.47]  | [0.30, 0.70] |
//! | goal   | [0.83, 0.88]  | [0.30, 0.70] |

mod demo;
mod expert;
mod latent;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use demo::{generate_demo, generate_demo_with_miss, read_demos, write_demos, EpisodeRecord};
pub use expert::{expert_action, ExpertGains};
pub use latent::{column_rank, encode_latent, projection, raw_features, Latent, LATENT_DIM, RAW_FEATURES};

pub const ACTION_DIM: usize = 3;
pub const GRIPPER_DIM: usize = 2;
/// Per-coordinate motion clip.
pub const MAX_DELTA: f64 = 0.05;
pub const GRASP_RADIUS: f64 = 0.03;
pub const CONTACT_RADIUS: f64 = 0.15;

pub const AGENT_REGION: Region = Region { x: (0.05, 0.10), y: (0.40, 0.60) };
pub const OBJECT_REGION: Region = Region { x: (0.42, 0.47), y: (0.30, 0.70) };
pub const GOAL_REGION: Region = Region { x: (0.83, 0.88), y: (0.30, 0.70) };

/// `(dx, dy, gripper command)`
pub type Action = [f64; ACTION_DIM];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Region {
    fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        [rng.random_range(self.x.0..self.x.1), rng.random_range(self.y.0..self.y.1)]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.x.0..=self.x.1).contains(&p[0]) && (self.y.0..=self.y.1).contains(&p[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "transport-easy")]
    TransportEasy,
    #[serde(rename = "insert-hard")]
    InsertHard,
}

impl TaskId {
    pub const ALL: [TaskId; 2] = [TaskId::TransportEasy, TaskId::InsertHard];

    pub fn index(self) -> usize {
        match self {
            TaskId::TransportEasy => 0,
            TaskId::InsertHard => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::TransportEasy => "transport-easy",
            TaskId::InsertHard => "insert-hard",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "transport-easy" => Ok(TaskId::TransportEasy),
            "insert-hard" => Ok(TaskId::InsertHard),
            other => Err(SimError::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("unknown task `{0}` (expected transport-easy or insert-hard)")]
    UnknownTask(String),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("action has non-finite entries: {0:?}")]
    NonFiniteAction(Action),
    #[error("episode already finished")]
    Finished,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Transport,
    Contact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub agent: [f64; 2],
    pub object: [f64; 2],
    pub goal: [f64; 2],
    /// -1 open, +1 closed; the sign of the last command
    pub gripper: f64,
    pub holding: bool,
    pub phase: Phase,
    pub step_index: usize,
}

impl EnvState {
    fn update_phase(&mut self) {
        self.phase = if self.holding && dist(self.agent, self.goal) < CONTACT_RADIUS { Phase::Contact } else { Phase::Transport };
    }
}

/// Environment constants shared by both tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    pub t_max: usize,
    /// Contact-phase motion noise for insert-hard.
    pub noise_sigma: f64,
    pub success_radius: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self { t_max: 120, noise_sigma: 0.015, success_radius: 0.04 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub seed: u64,
    pub noise_sigma: f64,
    pub success_radius: f64,
    pub t_max: usize,
}

impl TaskSpec {
    pub fn new(task_id: TaskId, seed: u64, params: &EnvParams) -> Self {
        let noise_sigma = match task_id {
            TaskId::TransportEasy => 0.0,
            TaskId::InsertHard => params.noise_sigma,
        };
        Self { task_id, seed, noise_sigma, success_radius: params.success_radius, t_max: params.t_max }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        match self.task_id {
            TaskId::TransportEasy if self.noise_sigma != 0.0 => {
                Err(SimError::InvalidSpec("transport-easy requires noise_sigma = 0".into()))
            }
            TaskId::InsertHard if self.noise_sigma <= 0.0 => Err(SimError::InvalidSpec("insert-hard requires noise_sigma > 0".into())),
            _ if self.success_radius <= 0.0 || self.t_max == 0 => {
                Err(SimError::InvalidSpec("success_radius and t_max must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub latent: Latent,
    pub done: bool,
    pub success: bool,
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clip01(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Deterministic part of one transition. `noise` supplies the motion
/// perturbation; it is only consulted in the contact phase.
pub fn transition(
    state: &EnvState,
    action: &Action,
    success_radius: f64,
    mut noise: impl FnMut() -> [f64; 2],
) -> Result<(EnvState, bool), SimError> {
    if action.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFiniteAction(*action));
    }
    let mut s = state.clone();
    let mut delta = [action[0].clamp(-MAX_DELTA, MAX_DELTA), action[1].clamp(-MAX_DELTA, MAX_DELTA)];
    if state.phase == Phase::Contact {
        let n = noise();
        delta[0] += n[0];
        delta[1] += n[1];
    }
    s.agent = clip01([s.agent[0] + delta[0], s.agent[1] + delta[1]]);
    if s.holding {
        s.object = s.agent;
    }
    let prev = state.gripper;
    let cmd = action[GRIPPER_DIM];
    // The gripper is either open or closed.
    s.gripper = if cmd > 0.0 { 1.0 } else { -1.0 };
    let mut success = false;
    if !s.holding && prev <= 0.0 && cmd > 0.0 && dist(s.agent, s.object) <= GRASP_RADIUS {
        s.holding = true;
        s.object = s.agent;
    } else if s.holding && cmd <= 0.0 {
        s.holding = false;
        success = dist(s.object, s.goal) <= success_radius;
    }
    s.step_index += 1;
    s.update_phase();
    Ok((s, success))
}

/// One owned episode: state plus its private PRNG stream.
#[derive(Clone, Debug)]
pub struct Env {
    spec: TaskSpec,
    state: EnvState,
    rng: ChaCha8Rng,
    done: bool,
    success: bool,
}

impl Env {
    pub fn reset(spec: &TaskSpec) -> Result<(Self, Latent), SimError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::nn::params::splitmix(spec.seed));
        let agent = AGENT_REGION.sample(&mut rng);
        let object = OBJECT_REGION.sample(&mut rng);
        let goal = GOAL_REGION.sample(&mut rng);
        let state = EnvState { agent, object, goal, gripper: -1.0, holding: false, phase: Phase::Transport, step_index: 0 };
        let latent = encode_latent(&state);
        Ok((Self { spec: spec.clone(), state, rng, done: false, success: false }, latent))
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn latent(&self) -> Latent {
        encode_latent(&self.state)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn succeeded(&self) -> bool {
        self.success
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome, SimError> {
        if self.done {
            return Err(SimError::Finished);
        }
        let sigma = self.spec.noise_sigma;
        let rng = &mut self.rng;
        let (next, success) = transition(&self.state, action, self.spec.success_radius, || {
            if sigma > 0.0 {
                let n = Normal::new(0.0, sigma).unwrap();
                [n.sample(rng), n.sample(rng)]
            } else {
                [0.0, 0.0]
            }
        })?;
        self.state = next;
        self.success = success;
        self.done = success || self.state.step_index >= self.spec.t_max;
        Ok(StepOutcome { latent: encode_latent(&self.state), done: self.done, success })
    }
}
