// Video Monarch attention on a small latent grid. Queries of the first
// frame attend to every key exactly; the rest use the Monarch factors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmonarch::oracle::dense_attention;
use vmonarch::workload::{random_mat, Dist};
use vmonarch::{vmonarch_attention_head, Mat, TokenGrid, VMonarchConfig};

fn frame_err(a: &Mat<f32>, b: &Mat<f64>, rows: std::ops::Range<usize>) -> f64 {
    rows.flat_map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (*x as f64 - y).abs()))
        .fold(0.0, f64::max)
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let grid = TokenGrid::new(6, 4, 6, 16)?;
    let (n, hw, d) = (grid.tokens(), grid.frame_tokens(), grid.head_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q: Mat<f32> = random_mat(&mut rng, n, d, Dist::Normal);
    let k: Mat<f32> = random_mat(&mut rng, n, d, Dist::Normal);
    let v: Mat<f32> = random_mat(&mut rng, n, d, Dist::Normal);
    let exact = dense_attention(&q, &k, &v, true)?.output;

    for recompute in [false, true] {
        let cfg = VMonarchConfig {
            recompute_first_frame: recompute,
            ..Default::default()
        };
        let o = vmonarch_attention_head(&q, &k, &v, &grid, &cfg)?;
        println!(
            "recompute={recompute:<5}  first-frame err {:.2e}  later-frame err {:.2e}",
            frame_err(&o, &exact, 0..hw),
            frame_err(&o, &exact, hw..n)
        );
        if recompute {
            assert!(frame_err(&o, &exact, 0..hw) < 1e-4);
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
