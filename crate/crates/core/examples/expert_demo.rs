//! Roll out the scripted expert on both tasks and print the phase changes.

use ffdc::sim::{generate_demo, EnvParams, ExpertGains, TaskId, TaskSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = EnvParams::default();
    for task in TaskId::ALL {
        let spec = TaskSpec::new(task, 0, &params);
        let demo = generate_demo(&spec, &ExpertGains::default())?;
        println!("{task}: {} steps, success {}", demo.len(), demo.success);
        for w in demo.states.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if a.holding != b.holding || a.phase != b.phase {
                println!(
                    "  step {:3}: agent ({:.3}, {:.3}) holding {} phase {:?}",
                    b.step_index, b.agent[0], b.agent[1], b.holding, b.phase
                );
            }
        }
    }
    Ok(())
}
