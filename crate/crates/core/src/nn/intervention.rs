//! Neuron addressing and activation interventions on FFN units.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::tensor::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One FFN intermediate unit: `index` in `[0, d_ff)` of block `layer`.
///
/// Ordered by layer, then index. Serializes as `[layer, index]`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct NeuronRef {
    pub layer: usize,
    pub index: usize,
}

impl NeuronRef {
    pub const fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers || self.index >= config.d_ff {
            return Err(Error::NeuronOutOfRange {
                layer: self.layer,
                index: self.index,
                layers: config.n_layers,
                d_ff: config.d_ff,
            });
        }
        Ok(())
    }

    /// Position in a flat `L · d_ff` enumeration.
    pub fn flat(&self, d_ff: usize) -> usize {
        self.layer * d_ff + self.index
    }

    pub fn from_flat(flat: usize, d_ff: usize) -> Self {
        Self::new(flat / d_ff, flat % d_ff)
    }

    /// All neurons of a model in `(layer, index)` order.
    pub fn all(config: &ModelConfig) -> impl Iterator<Item = NeuronRef> {
        let d_ff = config.d_ff;
        (0..config.n_layers * d_ff).map(move |i| Self::from_flat(i, d_ff))
    }
}

impl From<(usize, usize)> for NeuronRef {
    fn from((layer, index): (usize, usize)) -> Self {
        Self { layer, index }
    }
}

impl From<NeuronRef> for (usize, usize) {
    fn from(n: NeuronRef) -> Self {
        (n.layer, n.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "value", rename_all = "snake_case")]
pub enum Action {
    Zero,
    /// Multiply the activation by `α ∈ [0, 1]`.
    Scale(f64),
    /// Replace the activation by a constant.
    Patch(f64),
}

/// Per-neuron actions applied to FFN post-activations at every position.
/// The empty spec is the identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    actions: BTreeMap<NeuronRef, Action>,
}

impl InterventionSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, neuron: NeuronRef, action: Action) -> Result<()> {
        match action {
            Action::Scale(a) if !(0.0..=1.0).contains(&a) => {
                return Err(Error::InvalidIntervention(format!(
                    "scale {a} outside [0, 1]"
                )))
            }
            Action::Patch(v) if !v.is_finite() => {
                return Err(Error::InvalidIntervention("non-finite patch value".into()))
            }
            _ => {}
        }
        if self.actions.contains_key(&neuron) {
            return Err(Error::DuplicateNeuron {
                layer: neuron.layer,
                index: neuron.index,
            });
        }
        self.actions.insert(neuron, action);
        Ok(())
    }

    /// Zero every neuron in `neurons`; duplicates are an error.
    pub fn zeroing<I: IntoIterator<Item = NeuronRef>>(neurons: I) -> Result<Self> {
        let mut spec = Self::new();
        for n in neurons {
            spec.insert(n, Action::Zero)?;
        }
        Ok(spec)
    }

    pub fn scaling<I: IntoIterator<Item = NeuronRef>>(neurons: I, alpha: f64) -> Result<Self> {
        let mut spec = Self::new();
        for n in neurons {
            spec.insert(n, Action::Scale(alpha))?;
        }
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, neuron: &NeuronRef) -> Option<Action> {
        self.actions.get(neuron).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NeuronRef, &Action)> {
        self.actions.iter()
    }

    pub fn neurons(&self) -> impl Iterator<Item = NeuronRef> + '_ {
        self.actions.keys().copied()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.actions.keys().try_for_each(|n| n.check(config))
    }

    fn layer_actions(&self, layer: usize) -> impl Iterator<Item = (&NeuronRef, &Action)> {
        self.actions
            .range(NeuronRef::new(layer, 0)..NeuronRef::new(layer + 1, 0))
    }
}

/// Hook over FFN post-activations (`positions × d_ff`) of one block.
///
/// `backward` maps the gradient with respect to the hooked activation onto
/// the gradient with respect to the raw activation.
pub trait ActivationHook<T: Scalar> {
    fn forward(&self, layer: usize, acts: &mut Matrix<T>);
    fn backward(&self, layer: usize, grad: &mut Matrix<T>);
}

impl<T: Scalar> ActivationHook<T> for InterventionSpec {
    fn forward(&self, layer: usize, acts: &mut Matrix<T>) {
        for (n, action) in self.layer_actions(layer) {
            let k = n.index;
            for p in 0..acts.rows() {
                let v = acts.get(p, k);
                let new = match *action {
                    Action::Zero => T::zero(),
                    Action::Scale(a) => v * T::of(a),
                    Action::Patch(c) => T::of(c),
                };
                acts.set(p, k, new);
            }
        }
    }

    fn backward(&self, layer: usize, grad: &mut Matrix<T>) {
        for (n, action) in self.layer_actions(layer) {
            let k = n.index;
            for p in 0..grad.rows() {
                let g = grad.get(p, k);
                let new = match *action {
                    Action::Zero | Action::Patch(_) => T::zero(),
                    Action::Scale(a) => g * T::of(a),
                };
                grad.set(p, k, new);
            }
        }
    }
}

/// Replaces every FFN activation of every block by `alpha · baseline`.
///
/// Activations become free inputs, so gradients with respect to them do not
/// flow into earlier blocks through later FFNs.
pub struct PatchAll<'a, T> {
    pub baseline: &'a [Matrix<T>],
    pub alpha: T,
}

impl<T: Scalar> ActivationHook<T> for PatchAll<'_, T> {
    fn forward(&self, layer: usize, acts: &mut Matrix<T>) {
        let base = &self.baseline[layer];
        for (a, &b) in acts.as_mut_slice().iter_mut().zip(base.as_slice()) {
            *a = self.alpha * b;
        }
    }

    fn backward(&self, _layer: usize, grad: &mut Matrix<T>) {
        grad.fill(T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neuron_order_is_layer_major() {
        let mut v = vec![
            NeuronRef::new(1, 0),
            NeuronRef::new(0, 5),
            NeuronRef::new(0, 2),
        ];
        v.sort();
        assert_eq!(
            v,
            vec![NeuronRef::new(0, 2), NeuronRef::new(0, 5), NeuronRef::new(1, 0)]
        );
        assert_eq!(serde_json::to_string(&v[0]).unwrap(), "[0,2]");
    }

    #[test]
    fn duplicate_and_invalid_actions_rejected() {
        let mut s = InterventionSpec::new();
        s.insert(NeuronRef::new(0, 1), Action::Zero).unwrap();
        assert!(matches!(
            s.insert(NeuronRef::new(0, 1), Action::Scale(0.5)),
            Err(Error::DuplicateNeuron { .. })
        ));
        assert!(s.insert(NeuronRef::new(0, 2), Action::Scale(1.5)).is_err());
        assert!(s.insert(NeuronRef::new(0, 3), Action::Patch(f64::NAN)).is_err());
    }

    #[test]
    fn validate_catches_out_of_range() {
        let cfg = ModelConfig::desk(10);
        let s = InterventionSpec::zeroing([NeuronRef::new(2, 0)]).unwrap();
        assert!(s.validate(&cfg).is_err());
        let s = InterventionSpec::zeroing([NeuronRef::new(1, 256)]).unwrap();
        assert!(s.validate(&cfg).is_err());
    }
}
