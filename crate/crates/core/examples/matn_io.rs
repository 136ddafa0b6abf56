// Writing Q/K/V to a MATN file and running the benchmark harness on it.

use vmonarch::bench::{run, Mode, RunSpec};
use vmonarch::matn::{self, MatnTensor};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("vmonarch-matn-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let (input, output) = (dir.join("qkv.matn"), dir.join("out.matn"));

    let (n, d) = (48, 8);
    let data: Vec<f32> = (0..3 * n * d).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    matn::write(&input, &MatnTensor::new(vec![3, n as u64, d as u64], data)?)?;

    let report = run(&RunSpec {
        mode: Mode::Monarch,
        m: Some(6),
        b: Some(8),
        verify: true,
        input: Some(input.clone()),
        output: Some(output.clone()),
        ..Default::default()
    })?;
    println!("{}", report.to_json());

    let out = matn::read(&output)?;
    println!("output dims {:?}, dtype {}", out.dims, out.dtype().name());
    assert_eq!(out.dims, vec![n as u64, d as u64]);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
