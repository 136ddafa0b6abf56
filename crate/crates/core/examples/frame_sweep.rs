// Wall time of video Monarch attention against dense attention as the
// number of frames grows.

use vmonarch::bench::{sweep, sweep_csv, Mode, RunSpec};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = RunSpec {
        mode: Mode::Vmonarch,
        frames_hw: Some((1, 8, 8)),
        d: 32,
        repeats: 3,
        ..Default::default()
    };
    let frames = std::env::var("SWEEP_MAX_FRAMES").ok().and_then(|s| s.parse().ok()).unwrap_or(8);
    let rows = sweep(&spec, (2..=frames).step_by(2))?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
