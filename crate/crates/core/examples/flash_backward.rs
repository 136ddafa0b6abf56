// Gradients through tiled attention, with and without the entropy term,
// compared to the dense analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmonarch::oracle::dense_attention_backward;
use vmonarch::workload::{random_mat, Dist};
use vmonarch::{flash_entropy_bwd, flash_entropy_fwd, Mat, TileConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d) = (96, 16);
    let q: Mat<f64> = random_mat(&mut rng, n, d, Dist::Normal).scale(0.25);
    let k: Mat<f64> = random_mat(&mut rng, n, d, Dist::Normal);
    let v: Mat<f64> = random_mat(&mut rng, n, d, Dist::Normal);
    let d_out: Mat<f64> = random_mat(&mut rng, n, d, Dist::Normal);
    let d_h: Vec<f64> = random_mat::<f64, _>(&mut rng, 1, n, Dist::Normal).into_vec();

    let tiles = TileConfig::new(32, 16)?;
    let fwd = flash_entropy_fwd(&q, &k, &v, tiles)?;
    for entropy_grad in [false, true] {
        let g = flash_entropy_bwd(
            &q, &k, &v, &fwd.out, &d_out, &fwd.lse, &fwd.entropy, &d_h, entropy_grad, tiles,
        )?;
        let want = dense_attention_backward(&q, &k, &v, &d_out, &d_h, entropy_grad)?;
        let err = g
            .dq
            .max_abs_diff(&want.dq)
            .max(g.dk.max_abs_diff(&want.dk))
            .max(g.dv.max_abs_diff(&want.dv));
        println!("entropy_grad={entropy_grad:<5}  max |grad - dense| = {err:.2e}");
        assert!(err < 1e-9);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
