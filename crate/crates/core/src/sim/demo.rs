use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{dist, expert_action, Action, Env, EnvState, ExpertGains, Latent, SimError, TaskId, TaskSpec, GRIPPER_DIM};

/// One expert episode. `states` and `latents` hold `actions.len() + 1`
/// entries: the observation before every action plus the final one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: TaskId,
    pub seed: u64,
    pub states: Vec<EnvState>,
    pub actions: Vec<Action>,
    pub latents: Vec<Latent>,
    pub success: bool,
}

impl EpisodeRecord {
    /// Number of recorded actions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Run the scripted expert closed-loop until the episode ends.
pub fn generate_demo(spec: &TaskSpec, gains: &ExpertGains) -> Result<EpisodeRecord, SimError> {
    generate_demo_with_miss(spec, gains, None)
}

/// Like [`generate_demo`], but with `Some(radius)` the expert closes once
/// too early, as soon as the object is within `radius`. With `radius` above
/// the grasp radius plus one step of motion the grasp fails and the episode
/// shows the expert reopening and grasping again.
pub fn generate_demo_with_miss(spec: &TaskSpec, gains: &ExpertGains, miss_radius: Option<f64>) -> Result<EpisodeRecord, SimError> {
    let (mut env, latent) = Env::reset(spec)?;
    let mut states = vec![env.state().clone()];
    let mut latents = vec![latent];
    let mut actions = Vec::new();
    let mut miss = miss_radius;
    while !env.is_done() {
        let s = env.state();
        let mut a = expert_action(s, gains);
        if let Some(r) = miss {
            if !s.holding && s.gripper <= 0.0 && dist(s.agent, s.object) <= r {
                a[GRIPPER_DIM] = 1.0;
                miss = None;
            }
        }
        let out = env.step(&a)?;
        actions.push(a);
        states.push(env.state().clone());
        latents.push(out.latent);
    }
    Ok(EpisodeRecord { task_id: spec.task_id, seed: spec.seed, states, actions, latents, success: env.succeeded() })
}

pub fn write_demos(mut w: impl Write, demos: &[EpisodeRecord]) -> std::io::Result<()> {
    for d in demos {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_demos(r: impl BufRead) -> std::io::Result<Vec<EpisodeRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::EnvParams;

    #[test]
    fn expert_solves_easy_and_replays_open_loop() {
        let params = EnvParams::default();
        let spec = TaskSpec::new(TaskId::TransportEasy, 17, &params);
        let demo = generate_demo(&spec, &ExpertGains::default()).unwrap();
        assert!(demo.success);
        assert_eq!(demo.states.len(), demo.len() + 1);

        let (mut env, _) = Env::reset(&spec).unwrap();
        let mut ok = false;
        for a in &demo.actions {
            ok = env.step(a).unwrap().success;
        }
        assert!(ok);
    }

    #[test]
    fn missed_grasp_is_recovered() {
        let params = EnvParams::default();
        for task in TaskId::ALL {
            for seed in 0..20 {
                let spec = TaskSpec::new(task, seed, &params);
                let demo = generate_demo_with_miss(&spec, &ExpertGains::default(), Some(0.06)).unwrap();
                assert!(demo.success, "{task} seed {seed}");
                // Exactly one close command happens without a grasp.
                let closes = demo.actions.iter().zip(&demo.states).filter(|(a, s)| a[GRIPPER_DIM] > 0.0 && s.gripper <= 0.0).count();
                assert_eq!(closes, 2);
                assert!(demo.states.iter().any(|s| s.gripper > 0.0 && !s.holding));
            }
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let spec = TaskSpec::new(TaskId::InsertHard, 2, &EnvParams::default());
        let demo = generate_demo(&spec, &ExpertGains::default()).unwrap();
        let mut buf = Vec::new();
        write_demos(&mut buf, std::slice::from_ref(&demo)).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
        let back = read_demos(&buf[..]).unwrap();
        assert_eq!(back, vec![demo]);
    }
}
