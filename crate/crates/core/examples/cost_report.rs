// Analytic sparsity and FLOP estimates for the video presets.

use vmonarch::video::PRESETS;
use vmonarch::{flops_estimate, VMonarchConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = VMonarchConfig::default();
    println!("{:<9} {:>7} {:>9} {:>9} {:>9} {:>9}", "preset", "N", "sparsity", "approx", "reported", "speedup");
    for p in PRESETS {
        let c = flops_estimate(&p.grid, &cfg)?;
        let reported = p.reported_sparsity.map(|s| format!("{:.1}%", s * 100.0)).unwrap_or_else(|| "-".into());
        println!(
            "{:<9} {:>7} {:>8.2}% {:>8.2}% {:>9} {:>8.1}x",
            p.name,
            p.grid.tokens(),
            c.sparsity * 100.0,
            c.sparsity_approx * 100.0,
            reported,
            c.reduction_ratio
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
