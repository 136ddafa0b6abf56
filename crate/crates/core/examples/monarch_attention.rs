// Monarch attention: more iterations raise the variational objective and
// move the output toward exact attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmonarch::oracle::{dense_attention, monarch_objective};
use vmonarch::workload::{random_mat, Dist};
use vmonarch::{mac, monarch_attention, Mat, MonarchConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (m, b, d) = (8, 32, 16);
    let n = m * b;
    let q: Mat<f64> = random_mat(&mut rng, n, d, Dist::Normal);
    let k: Mat<f64> = random_mat(&mut rng, n, d, Dist::Normal);
    let v: Mat<f64> = random_mat(&mut rng, n, d, Dist::Normal);
    let exact = dense_attention(&q, &k, &v, true)?.output;

    let mut last = f64::NEG_INFINITY;
    for t in 1..=4 {
        let cfg = MonarchConfig::new(m, b).with_iters(t).exact();
        let (res, macs) = mac::measure(|| monarch_attention(&q, &k, &v, &cfg));
        let (o, f) = res?;
        let j = monarch_objective(&f, &q, &k, true)?;
        println!(
            "t={t}  objective {j:10.4}  err vs exact {:.3e}  MACs {macs} (dense {})",
            o.max_abs_diff(&exact),
            2 * n * n * d
        );
        assert!(j >= last - 1e-6 * j.abs());
        last = j;
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
