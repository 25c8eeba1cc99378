//! Row-wise kernels with hand-written derivatives.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, Zip};

use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct LayerNormCache<T> {
    pub xhat: Array2<T>,
    pub inv_std: Array1<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &Array2<T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
) -> (Array2<T>, LayerNormCache<T>) {
    let n = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / n;
        *inv = T::one() / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * gamma + beta;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns the input gradient; accumulates the affine parameter gradients.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LayerNormCache<T>,
    gamma: &Array1<T>,
    dgamma: &mut Array1<T>,
    dbeta: &mut Array1<T>,
) -> Array2<T> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let n = T::of(dy.ncols() as f64);
    let mut dx = dy * gamma;
    for ((mut row, xhat), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum = row.sum();
        let dot = row.dot(&xhat);
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|d, &h| *d = inv * (*d - sum / n - h * dot / n));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's `tanh` is several times slower.
fn tanh<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

#[cfg(test)]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    gelu_with_grad(x).0
}

#[cfg(test)]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_with_grad(x).1
}

/// GELU and its derivative sharing one `tanh` evaluation.
pub(crate) fn gelu_with_grad<T: Scalar>(x: T) -> (T, T) {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = tanh(c * (x + a * x * x * x));
    let value = half * x * (T::one() + t);
    let grad = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x);
    (value, grad)
}

pub(crate) fn softmax_rows_inplace<T: Scalar>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        softmax_inplace(&mut row);
    }
}

pub(crate) fn softmax_inplace<T: Scalar>(row: &mut ArrayViewMut1<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    row.mapv_inplace(|v| (v - max).exp());
    let sum = row.sum();
    row.mapv_inplace(|v| v / sum);
}

/// Gradient through a row softmax: `p ∘ (dp − <dp, p>)`.
pub(crate) fn softmax_rows_backward<T: Scalar>(p: ArrayView2<T>, dp: &Array2<T>) -> Array2<T> {
    let mut ds = dp.clone();
    for (mut d, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
        let dot = d.dot(&pr);
        Zip::from(&mut d).and(&pr).for_each(|d, &p| *d = p * (*d - dot));
    }
    ds
}

pub(crate) fn l2_norm<T: Scalar>(v: ArrayView1<T>) -> T {
    v.dot(&v).sqrt()
}

/// Unit-normalizes every row; returns the normalized rows and the original norms.
pub fn normalize_rows<T: Scalar>(x: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let norms: Array1<T> = x.rows().into_iter().map(|r| l2_norm(r)).collect();
    let mut out = x.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    (out, norms)
}

/// Backward of [`normalize_rows`]: `(d − u <d, u>) / ‖x‖` per row.
pub fn normalize_rows_backward<T: Scalar>(
    unit: &Array2<T>,
    norms: &Array1<T>,
    d_unit: &Array2<T>,
) -> Array2<T> {
    let mut dx = d_unit.clone();
    for ((mut d, u), &n) in dx.rows_mut().into_iter().zip(unit.rows()).zip(norms.iter()) {
        let dot = d.dot(&u);
        Zip::from(&mut d).and(&u).for_each(|d, &u| *d = (*d - u * dot) / n);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let n = numeric_grad(gelu::<f64>, x);
            assert!((gelu_grad(x) - n).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x: Array2<f64> = array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.0, 5.0]];
        let (y, _) = layer_norm(&x, &Array1::ones(4), &Array1::zeros(4));
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.dot(&row) / 4.0 - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn normalization_gradient_is_orthogonal_to_direction() {
        let x: Array2<f64> = array![[3.0, 4.0]];
        let (u, n) = normalize_rows(&x);
        let dx = normalize_rows_backward(&u, &n, &array![[1.0, 1.0]]);
        assert!((dx.row(0).dot(&x.row(0))).abs() < 1e-12);
    }
}
