//! Run one episode with fixed chunks and with a gate driven by scripted
//! verifier scores, and print the checks.

use ffdc::exec::{run_episode, ConstVerifier, ExecPolicy, ScriptedVerifier};
use ffdc::sim::{EnvParams, TaskId, TaskSpec};
use ffdc::wam::{ToyWam, WamConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let wam = ToyWam::new(WamConfig::default(), 5)?;
    let spec = TaskSpec::new(TaskId::TransportEasy, 0, &EnvParams { t_max: 60, ..Default::default() });
    for n in [8, 32] {
        let t = run_episode(&ExecPolicy::Fixed { n }, &spec, &wam, None::<&ConstVerifier>)?;
        println!("fixed-{n}: {} steps, {} model calls", t.steps, t.wam_calls);
    }
    let v = ScriptedVerifier::new(vec![0.9, 0.8, 0.5, 0.3], 8);
    let t = run_episode(&ExecPolicy::Adaptive { tau: 0.5, k: 8, c: 4 }, &spec, &wam, Some(&v))?;
    println!("adaptive: {} steps, {} model calls, {} replans", t.steps, t.wam_calls, t.replans);
    for c in t.checks.iter().take(8) {
        println!("  step {:3} offset {:2} score {:.2} replan {}", c.step, c.t_off, c.score, c.replan);
    }
    Ok(())
}
