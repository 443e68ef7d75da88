use super::intervention::InterventionSpec;
use super::model::TransformerModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> TransformerModel<T> {
    /// Appends `max_new` argmax tokens to `prefix`.
    pub fn greedy_decode(
        &self,
        prefix: &[u32],
        max_new: usize,
        spec: &InterventionSpec,
    ) -> Result<Vec<u32>> {
        if prefix.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut seq = prefix.to_vec();
        for _ in 0..max_new {
            let out = self.forward(&seq, spec)?;
            let last = out.logits.row(out.logits.rows() - 1);
            seq.push(argmax(last) as u32);
        }
        Ok(seq)
    }
}
