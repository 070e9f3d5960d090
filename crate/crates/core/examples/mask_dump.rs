//! Print the verifier's visibility mask for a small layout.
//!
//! `cargo run --example mask_dump -- 8 4 8 cache_compatible`

use ffdc::verifier::{build_mask, Ablation, MaskMode, VerifierLayout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let num = |i: usize, d: usize| args.get(i).map_or(Ok(d), |s| s.parse());
    let (k, r, w) = (num(0, 4)?, num(1, 2)?, num(2, 4)?);
    let mode = match args.get(3).map(String::as_str) {
        Some("full_fidelity") => MaskMode::FullFidelity,
        _ => MaskMode::CacheCompatible,
    };
    let layout = VerifierLayout::new(2, k, r, Ablation::Full)?;
    print!("{}", build_mask(&layout, w, mode)?.dump());
    Ok(())
}
