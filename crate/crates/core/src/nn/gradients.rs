//! Teacher-forced sequence likelihood `P(Y | X)` and its gradient with
//! respect to FFN activations.

use super::config::ModelConfig;
use super::intervention::{ActivationHook, NeuronRef};
use super::model::TransformerModel;
use super::tensor::{log_softmax, Matrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `∂P(Y|X)/∂w` for every FFN activation `w` at every position, evaluated
/// under some hook.
#[derive(Debug, Clone)]
pub struct NeuronGradients<T> {
    pub likelihood: T,
    pub log_likelihood: T,
    /// Per block, `positions × d_ff`.
    pub per_position: Vec<Matrix<T>>,
    /// Hooked activations at the evaluation point.
    pub activations: Vec<Matrix<T>>,
}

impl<T: Scalar> NeuronGradients<T> {
    /// Sum over positions: derivative for a shift applied at every position.
    pub fn total(&self, n: NeuronRef) -> T {
        let g = &self.per_position[n.layer];
        (0..g.rows()).map(|p| g.get(p, n.index)).sum()
    }

    /// `Σ_p β_p · ∂P/∂w_p`, the derivative along the ray `α ↦ α·β`.
    pub fn along(&self, n: NeuronRef, baseline: &[Matrix<T>]) -> T {
        let g = &self.per_position[n.layer];
        let b = &baseline[n.layer];
        (0..g.rows()).map(|p| g.get(p, n.index) * b.get(p, n.index)).sum()
    }

    /// `along` for every neuron, flattened in `(layer, index)` order.
    pub fn along_all(&self, baseline: &[Matrix<T>]) -> Vec<T> {
        let mut out = Vec::new();
        for (g, b) in self.per_position.iter().zip(baseline) {
            let d_ff = g.cols();
            let mut acc = vec![T::zero(); d_ff];
            for p in 0..g.rows() {
                for ((a, &gv), &bv) in acc.iter_mut().zip(g.row(p)).zip(b.row(p)) {
                    *a += gv * bv;
                }
            }
            out.extend(acc);
        }
        out
    }
}

/// Input sequence for teacher forcing: `X ‖ Y` without the last target.
pub(crate) fn teacher_forced(config: &ModelConfig, x: &[u32], y: &[u32]) -> Result<Vec<u32>> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut seq = Vec::with_capacity(x.len() + y.len() - 1);
    seq.extend_from_slice(x);
    seq.extend_from_slice(&y[..y.len() - 1]);
    if seq.len() > config.context_len {
        return Err(Error::SequenceTooLong {
            len: seq.len(),
            context: config.context_len,
        });
    }
    Ok(seq)
}

impl<T: Scalar> TransformerModel<T> {
    /// `log P(Y | X) = Σ_i log P(y_i | X, y_<i)` under a hook.
    pub fn sequence_log_prob<H: ActivationHook<T> + ?Sized>(
        &self,
        x: &[u32],
        y: &[u32],
        hook: &H,
    ) -> Result<T> {
        let seq = teacher_forced(self.config(), x, y)?;
        self.check_tokens(y)?;
        let cache = self.forward_cached(&seq, hook, x.len() - 1)?;
        let mut lp = T::zero();
        for (r, &t) in y.iter().enumerate() {
            lp += log_softmax(cache.logits.row(r))[t as usize];
        }
        if !lp.is_finite() {
            return Err(Error::NonFinite("sequence log-probability".into()));
        }
        Ok(lp)
    }

    /// Gradient of `P(Y | X)` (a product of teacher-forced token
    /// probabilities) with respect to every hooked FFN activation.
    pub fn neuron_gradients<H: ActivationHook<T> + ?Sized>(
        &self,
        x: &[u32],
        y: &[u32],
        hook: &H,
    ) -> Result<NeuronGradients<T>> {
        let seq = teacher_forced(self.config(), x, y)?;
        self.check_tokens(y)?;
        let cache = self.forward_cached(&seq, hook, x.len() - 1)?;
        let mut log_p = T::zero();
        let mut dlogits = Matrix::zeros(y.len(), self.config().vocab_size);
        for (r, &t) in y.iter().enumerate() {
            let ls = log_softmax(cache.logits.row(r));
            log_p += ls[t as usize];
            let row = dlogits.row_mut(r);
            for (g, l) in row.iter_mut().zip(&ls) {
                *g = -l.exp();
            }
            row[t as usize] += T::one();
        }
        let p = log_p.exp();
        if !p.is_finite() || !log_p.is_finite() {
            return Err(Error::NonFinite("privacy likelihood".into()));
        }
        for g in dlogits.as_mut_slice() {
            *g *= p;
        }
        let per_position = self.backward(&cache, &dlogits, hook, None);
        if !per_position.iter().all(Matrix::all_finite) {
            return Err(Error::NonFinite("neuron gradients".into()));
        }
        Ok(NeuronGradients {
            likelihood: p,
            log_likelihood: log_p,
            per_position,
            activations: cache.trace.ffn_acts,
        })
    }
}
