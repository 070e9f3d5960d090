//! Train the toy world-action model briefly and execute one predicted
//! chunk open-loop.

use ffdc::sim::{generate_demo, Env, EnvParams, ExpertGains, TaskId, TaskSpec};
use ffdc::wam::{train_wam, ToyWam, WamConfig, WamTrainConfig, WorldActionModel};
use rand::SeedableRng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = EnvParams::default();
    let demos = TaskId::ALL
        .iter()
        .flat_map(|&t| (0..20).map(move |s| TaskSpec::new(t, s, &params)))
        .map(|s| generate_demo(&s, &ExpertGains::default()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut wam = ToyWam::new(WamConfig::default(), 1)?;
    let cfg = WamTrainConfig { steps: 2000, log_every: 500, ..Default::default() };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    for l in train_wam(&mut wam, &demos, &cfg, &mut rng)? {
        println!("step {:5}: action loss {:.5}, latent loss {:.5}", l.step, l.loss_act, l.loss_vid);
    }
    let spec = TaskSpec::new(TaskId::TransportEasy, 99, &params);
    let (mut env, obs) = Env::reset(&spec)?;
    let chunk = wam.predict(&obs, spec.task_id, 0)?;
    println!("predicted {} actions and {} latents", chunk.actions.len(), chunk.latents.len());
    for a in &chunk.actions[..16] {
        env.step(a)?;
    }
    let s = env.state();
    println!("after 16 open-loop steps: agent ({:.3}, {:.3}), object ({:.3}, {:.3})", s.agent[0], s.agent[1], s.object[0], s.object[1]);
    Ok(())
}
