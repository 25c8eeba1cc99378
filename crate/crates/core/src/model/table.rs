use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{take_matrix, EncodingVector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Model E's entity side: one trainable vector per qid.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityEmbeddingTable<T> {
    qids: Vec<String>,
    rows: HashMap<String, usize>,
    pub vectors: Array2<T>,
    pub seed: u64,
}

impl<T: Scalar> EntityEmbeddingTable<T> {
    /// Rows ~ N(0, init_std²), drawn in qid order from `seed`.
    pub fn new(qids: impl IntoIterator<Item = String>, d_enc: usize, init_std: f64, seed: u64) -> Self {
        let qids: Vec<String> = qids.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = Array2::from_shape_simple_fn((qids.len(), d_enc), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(z * init_std)
        });
        Self::from_parts(qids, vectors, seed)
    }

    fn from_parts(qids: Vec<String>, vectors: Array2<T>, seed: u64) -> Self {
        let rows = qids.iter().enumerate().map(|(i, q)| (q.clone(), i)).collect();
        EntityEmbeddingTable {
            qids,
            rows,
            vectors,
            seed,
        }
    }

    pub fn d_enc(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn qids(&self) -> &[String] {
        &self.qids
    }

    pub fn row_of(&self, qid: &str) -> Option<usize> {
        self.rows.get(qid).copied()
    }

    pub fn lookup(&self, qid: &str) -> Result<EncodingVector<T>> {
        let row = self
            .row_of(qid)
            .ok_or_else(|| Error::UnknownEntity(qid.to_string()))?;
        Ok(EncodingVector(self.vectors.row(row).to_owned()))
    }

    pub(crate) fn from_tensors(
        qids: Vec<String>,
        seed: u64,
        store: &mut BTreeMap<String, ArrayD<T>>,
        name: &str,
    ) -> Result<Self> {
        let vectors = take_matrix(store, name)?;
        if vectors.nrows() != qids.len() {
            return Err(Error::Checkpoint(format!(
                "{} table rows for {} qids",
                vectors.nrows(),
                qids.len()
            )));
        }
        Ok(Self::from_parts(qids, vectors, seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_contract() {
        let table = EntityEmbeddingTable::<f64>::new(["Q1".to_string(), "Q2".to_string()], 8, 1.0, 3);
        let a = table.lookup("Q1").unwrap();
        assert_eq!(a, table.lookup("Q1").unwrap());
        assert_ne!(a, table.lookup("Q2").unwrap());
        assert!(matches!(table.lookup("Q3"), Err(Error::UnknownEntity(q)) if q == "Q3"));
    }
}
