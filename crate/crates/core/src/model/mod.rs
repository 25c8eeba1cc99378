//! Dual-encoder towers, the Model E embedding table, and cosine scoring.

mod dual;
mod encoder;
pub(crate) mod ops;
mod table;

use ndarray::Array1;

pub use dual::{DualEncoder, EntityModel, EntityTower, DUAL_ENCODER_KIND};
pub use encoder::{Encoder, ForwardCache, LayerParams, TransformerConfig};
pub(crate) use encoder::{take_matrix, take_vector};
pub use ops::{normalize_rows, normalize_rows_backward};
pub use table::EntityEmbeddingTable;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Output of an encoder tower or an embedding-table row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingVector<T>(pub Array1<T>);

impl<T: Scalar> EncodingVector<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> T {
        self.0.dot(&self.0).sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == T::zero() {
            return Err(Error::ZeroVector);
        }
        Ok(EncodingVector(self.0.mapv(|v| v / n)))
    }
}

/// Cosine similarity `uᵀv / (‖u‖‖v‖)`.
pub fn score<T: Scalar>(u: &EncodingVector<T>, v: &EncodingVector<T>) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::ZeroVector);
    }
    let cos = u.0.dot(&v.0) / (nu * nv);
    Ok(cos.max(-T::one()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_examples() {
        let u = EncodingVector(array![0.3f64, -1.2, 2.0]);
        assert!((score(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        let e1 = EncodingVector(array![1.0f64, 0.0]);
        let e2 = EncodingVector(array![0.0, 1.0]);
        assert_eq!(score(&e1, &e2).unwrap(), 0.0);
        let diag = EncodingVector(array![1.0, 1.0]);
        assert!((score(&e1, &diag).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        let z = EncodingVector(array![0.0f64, 0.0]);
        let u = EncodingVector(array![1.0, 0.0]);
        assert!(matches!(score(&z, &u), Err(Error::ZeroVector)));
        assert!(matches!(
            score(&u, &EncodingVector(array![1.0])),
            Err(Error::Shape(_))
        ));
    }
}
