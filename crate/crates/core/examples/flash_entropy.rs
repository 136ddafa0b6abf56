// Tiled attention that also returns each row's entropy, checked against
// the dense oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmonarch::workload::{random_mat, Dist};
use vmonarch::{flash_entropy_fwd, oracle, Mat, TileConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d) = (256, 32);
    let q: Mat<f32> = random_mat(&mut rng, n, d, Dist::Normal);
    let k: Mat<f32> = random_mat(&mut rng, n, d, Dist::Normal);
    let v: Mat<f32> = random_mat(&mut rng, n, d, Dist::Normal);

    let dense = oracle::dense_attention(&q, &k, &v, false)?;
    for (br, bc) in [(16, 16), (64, 32), (256, 256)] {
        let r = flash_entropy_fwd(&q, &k, &v, TileConfig::new(br, bc)?)?;
        let h_err = r
            .entropy
            .iter()
            .zip(&dense.entropy)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        println!(
            "tiles {br:>3}x{bc:<3}  output err {:.2e}  entropy err {:.2e}",
            r.out.max_abs_diff(&dense.output),
            h_err
        );
        assert!(h_err < 1e-4);
    }
    let mean_h = dense.entropy.iter().sum::<f64>() / n as f64;
    println!("mean entropy {mean_h:.3} nats (max {:.3})", (n as f64).ln());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
