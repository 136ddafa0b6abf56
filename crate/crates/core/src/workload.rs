//! Seeded synthetic inputs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::tensor::{Element, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dist {
    /// Standard normal.
    #[default]
    Normal,
    /// Uniform on `[0, 1)`.
    Uniform,
}

/// A `rows × cols` matrix of draws. Values are drawn in f64 and then cast,
/// so f32 and f64 runs with the same seed see the same inputs.
pub fn random_mat<T: Element, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, dist: Dist) -> Mat<T> {
    let uniform = Uniform::new(0.0f64, 1.0);
    Mat::from_fn(rows, cols, |_, _| {
        let x: f64 = match dist {
            Dist::Normal => StandardNormal.sample(rng),
            Dist::Uniform => uniform.sample(rng),
        };
        T::of_f64(x)
    })
}
