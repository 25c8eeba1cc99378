use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// In-batch sampled softmax: row `i`'s positive is column `i`; every other
/// column is a negative. Columns past the batch size are appended negatives.
///
/// Returns `−(1/B) Σ_i log softmax(τ·s_i)[i]` and its gradient wrt the scores.
pub fn inbatch_softmax_loss<T: Scalar>(scores: &Array2<T>, temperature: T) -> Result<(T, Array2<T>)> {
    let mask = Array2::from_elem(scores.raw_dim(), true);
    masked_softmax_loss(scores, &mask, temperature)
}

/// As [`inbatch_softmax_loss`], with entries whose mask is `false` removed
/// from the softmax (their gradient is zero). Diagonal entries must be kept.
pub fn masked_softmax_loss<T: Scalar>(
    scores: &Array2<T>,
    mask: &Array2<bool>,
    temperature: T,
) -> Result<(T, Array2<T>)> {
    let (b, cols) = scores.dim();
    if b == 0 || cols < b || mask.dim() != (b, cols) {
        return Err(Error::Shape(format!(
            "scores {b}x{cols} with mask {:?}",
            mask.dim()
        )));
    }
    if let Some(((row, col), _)) = scores.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { row, col });
    }
    if (0..b).any(|i| !mask[[i, i]]) {
        return Err(Error::Shape("positive entry masked out".into()));
    }
    let inv_b = T::one() / T::of(b as f64);
    let mut loss = T::zero();
    let mut grad = Array2::zeros((b, cols));
    for i in 0..b {
        let row = scores.row(i);
        let keep = mask.row(i);
        let max = row
            .iter()
            .zip(keep.iter())
            .filter(|(_, &k)| k)
            .map(|(&s, _)| temperature * s)
            .fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (j, &s) in row.iter().enumerate() {
            if keep[j] {
                let e = (temperature * s - max).exp();
                grad[[i, j]] = e;
                z += e;
            }
        }
        loss += z.ln() + max - temperature * row[i];
        let mut g = grad.row_mut(i);
        g.mapv_inplace(|e| e / z);
        g[i] -= T::one();
        g.mapv_inplace(|v| v * temperature * inv_b);
    }
    Ok((loss * inv_b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn worked_values() {
        let (l, g) = inbatch_softmax_loss(&array![[0.3f64]], 20.0).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g[[0, 0]], 0.0);

        let (l, _) = inbatch_softmax_loss(&Array2::<f64>::from_elem((5, 5), 0.4), 3.0).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);

        let (l, _) = inbatch_softmax_loss(&array![[1.0f64, 0.0], [0.0, 1.0]], 1.0).unwrap();
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn non_finite_rejected() {
        let s = array![[1.0f64, f64::NAN], [0.0, 1.0]];
        assert!(matches!(
            inbatch_softmax_loss(&s, 1.0),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn masked_entries_ignored() {
        let s = array![[1.0f64, 5.0, 0.0], [0.0, 1.0, 7.0]];
        let mask = array![[true, false, true], [true, true, false]];
        let (l, g) = masked_softmax_loss(&s, &mask, 1.0).unwrap();
        let reduced = array![[1.0f64, 0.0], [0.0, 1.0]];
        let (lr, _) = inbatch_softmax_loss(&reduced, 1.0).unwrap();
        assert!((l - lr).abs() < 1e-12);
        assert_eq!(g[[0, 1]], 0.0);
        assert_eq!(g[[1, 2]], 0.0);
    }

    #[test]
    fn gradient_matches_differences() {
        let s = array![[0.2f64, -0.4, 0.9, 0.1], [0.5, 0.3, -0.2, 0.7], [-0.6, 0.1, 0.4, 0.0]];
        let (_, g) = inbatch_softmax_loss(&s, 2.5).unwrap();
        let eps = 1e-5;
        for ((i, j), &a) in g.indexed_iter() {
            let mut p = s.clone();
            p[[i, j]] += eps;
            let mut m = s.clone();
            m[[i, j]] -= eps;
            let num = (inbatch_softmax_loss(&p, 2.5).unwrap().0 - inbatch_softmax_loss(&m, 2.5).unwrap().0)
                / (2.0 * eps);
            assert!((a - num).abs() < 1e-8, "({i},{j}) {a} vs {num}");
        }
    }
}
