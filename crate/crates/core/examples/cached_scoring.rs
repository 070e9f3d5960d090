//! Score every check offset of one chunk through the KV cache and compare
//! with full scoring, counting attention dot products.

use ffdc::nn::kernels::{attention_dots, reset_attention_dots};
use ffdc::sim::{Env, EnvParams, TaskId, TaskSpec};
use ffdc::verifier::{assemble_input, Verifier, VerifierConfig};
use ffdc::wam::{ToyWam, WamConfig, WorldActionModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let wam = ToyWam::new(WamConfig::default(), 3)?;
    let v = Verifier::new(VerifierConfig::default(), 4)?;
    let spec = TaskSpec::new(TaskId::InsertHard, 0, &EnvParams::default());
    let (_, obs) = Env::reset(&spec)?;
    let chunk = wam.predict(&obs, spec.task_id, 0)?;
    let cache = v.cache_build(&chunk)?;
    println!("cache rows per layer: {}, offsets {:?}", cache.rows_per_layer(), cache.offsets());
    for t_off in cache.offsets() {
        reset_attention_dots();
        let cached = v.score_cached(&cache, 0, &obs, t_off)?;
        let c = attention_dots();
        reset_attention_dots();
        let full = v.score_full(&assemble_input(&chunk, &obs, t_off, v.config().k)?)?;
        let f = attention_dots();
        println!("t_off {t_off:2}: cached {cached:.12} full {full:.12}  dots {c} vs {f}");
    }
    Ok(())
}
