//! Small row-oriented helpers over `ndarray` matrices.

use ndarray::{Array2, ArrayView1, ArrayViewMut1, Axis};
use rayon::prelude::*;

#[inline]
pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either side has zero norm.
#[inline]
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Scale `row` to unit length in place. Returns false (leaving it zero) for a
/// zero or non-finite row.
pub fn normalize_row(mut row: ArrayViewMut1<f64>) -> bool {
    let n = norm(row.view());
    if n > 0.0 && n.is_finite() {
        row.mapv_inplace(|x| x / n);
        true
    } else {
        row.fill(0.0);
        false
    }
}

/// Normalise every row in place, returning the per-row validity mask.
pub fn normalize_rows(m: &mut Array2<f64>) -> Vec<bool> {
    m.axis_iter_mut(Axis(0))
        .into_par_iter()
        .map(normalize_row)
        .collect()
}

/// `a · bᵀ / scale`.
pub fn scaled_gram(a: &Array2<f64>, b: &Array2<f64>, scale: f64) -> Array2<f64> {
    let mut out = a.dot(&b.t());
    out.mapv_inplace(|x| x / scale);
    out
}

/// Largest `| ‖row‖ - 1 |` over rows flagged valid.
pub fn unit_norm_deviation(m: &Array2<f64>, valid: &[bool]) -> f64 {
    m.rows()
        .into_iter()
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|(r, _)| (norm(r) - 1.0).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_rows_stay_zero_and_invalid() {
        let mut m = array![[3.0, 4.0], [0.0, 0.0]];
        assert_eq!(normalize_rows(&mut m), vec![true, false]);
        assert_eq!(m, array![[0.6, 0.8], [0.0, 0.0]]);
        assert_eq!(cosine(m.row(0), m.row(1)), 0.0);
    }
}
