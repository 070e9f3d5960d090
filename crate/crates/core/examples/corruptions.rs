//! Corrupt the grasp segment of an insert-hard demonstration with each
//! operator and replay it against the expert.

use ffdc::sim::{generate_demo, EnvParams, ExpertGains, TaskId, TaskSpec};
use ffdc::verdata::{corrupt_segment, env_at, replay_segment, Provenance, VerdataConfig};
use rand::SeedableRng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = EnvParams::default();
    let gains = ExpertGains::default();
    let cfg = VerdataConfig::default();
    let spec = TaskSpec::new(TaskId::InsertHard, 4, &params);
    let demo = generate_demo(&spec, &gains)?;
    let grasp = demo.states.iter().position(|s| s.holding).ok_or("demo never grasps")?;
    let start = grasp.saturating_sub(4);
    let segment = &demo.actions[start..start + 8];
    let env = env_at(&spec, &demo.actions, start)?;
    let clean = replay_segment(&env, segment, &gains, cfg.track_tol)?;
    println!("grasp at step {grasp}; clean segment valid: {}", clean.valid);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for op in Provenance::CORRUPTIONS {
        let bad = corrupt_segment(op, segment, &cfg, &mut rng)?;
        let r = replay_segment(&env, &bad, &gains, cfg.track_tol)?;
        println!("{:14} valid {:5}  max deviation {:.4}  holding mismatch {}", op.name(), r.valid, r.max_deviation, r.holding_mismatch);
    }
    Ok(())
}
