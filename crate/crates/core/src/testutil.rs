use rand::Rng;

use crate::monarch::MonarchFactors;
use crate::tensor::{row_softmax, Element, Mat, Tensor3};
use crate::workload::{random_mat, Dist};

pub(crate) fn normal_mat<T: Element>(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat<T> {
    random_mat(rng, rows, cols, Dist::Normal)
}

/// Factors whose block rows are softmaxes of random logits.
pub(crate) fn stochastic_factors<T: Element>(rng: &mut impl Rng, m: usize, b: usize) -> MonarchFactors<T> {
    let mut block_rows = |count: usize, width: usize| -> Vec<T> {
        let logits: Mat<f64> = random_mat(rng, count, width, Dist::Normal);
        (0..count)
            .flat_map(|r| row_softmax(logits.row(r)).unwrap())
            .map(T::of_f64)
            .collect()
    };
    let l = Tensor3::from_vec(b, m, m, block_rows(b * m, m)).unwrap();
    let r = Tensor3::from_vec(m, b, b, block_rows(m * b, b)).unwrap();
    MonarchFactors::new(l, r).unwrap()
}
