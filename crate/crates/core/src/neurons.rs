//! Integrated-gradient attribution of the privacy likelihood to FFN neurons,
//! threshold selection of privacy neurons, and the universal/specific split.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Prompt;
use crate::error::{Error, Result};
use crate::lens::PromptKey;
use crate::metrics::write_csv;
use crate::nn::{InterventionSpec, Matrix, ModelConfig, NeuronRef, PatchAll, TransformerModel};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Per-prompt threshold as a fraction of the prompt's top score.
    pub tau1: f64,
    /// Frequency threshold as a fraction of the language's dataset size.
    pub tau2: f64,
    /// Integration steps.
    pub m: usize,
    /// Compare `|a_i|` against `τ1 · max |a_j|` instead of raw scores.
    pub absolute: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tau1: 0.1,
            tau2: 0.5,
            m: 20,
            absolute: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau1 < 1.0) || !(self.tau2 > 0.0 && self.tau2 < 1.0) {
            return Err(Error::InvalidConfig("tau1 and tau2 must lie in (0, 1)".into()));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        Ok(())
    }
}

/// How the path integral is discretised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// `α_j = j/m` for `j = 1..=m`, each weighted `1/m`.
    #[default]
    RightRiemann,
    /// `α_j = j/m` for `j = 0..=m` with halved end weights.
    Trapezoid,
}

impl Quadrature {
    /// `(α_j, weight_j)` pairs for `m` intervals.
    pub fn points(self, m: usize) -> Vec<(f64, f64)> {
        let h = 1.0 / m as f64;
        match self {
            Quadrature::RightRiemann => (1..=m).map(|j| (j as f64 * h, h)).collect(),
            Quadrature::Trapezoid => (0..=m)
                .map(|j| {
                    let w = if j == 0 || j == m { h / 2.0 } else { h };
                    (j as f64 * h, w)
                })
                .collect(),
        }
    }
}

/// Integrated gradient of a scalar function along `0 → β` given its
/// derivative: `β · Σ_j w_j · f'(α_j β)`.
pub fn path_integral(derivative: impl Fn(f64) -> f64, beta: f64, m: usize, q: Quadrature) -> f64 {
    beta * q
        .points(m)
        .into_iter()
        .map(|(a, w)| w * derivative(a * beta))
        .sum::<f64>()
}

/// Attribution score of every FFN neuron for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub key: PromptKey,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Flattened in `(layer, index)` order.
    pub scores: Vec<f64>,
    /// `P(Y|X)` on the clean pass.
    pub likelihood: f64,
}

impl AttributionMap {
    pub fn get(&self, n: NeuronRef) -> f64 {
        self.scores[n.flat(self.d_ff)]
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.n_layers == other.n_layers && self.d_ff == other.d_ff
    }
}

impl<T: Scalar> TransformerModel<T> {
    /// Clean-pass FFN activations over the teacher-forced `Q ‖ E` input.
    pub fn clean_activations(&self, prompt: &Prompt) -> Result<Vec<Matrix<T>>> {
        let g = self.neuron_gradients(&prompt.q, &prompt.e, &InterventionSpec::new())?;
        Ok(g.activations)
    }

    /// Integrated-gradient attribution of `P(E | Q)` to every neuron.
    ///
    /// At each grid point `α_j` every FFN activation of every block is set
    /// to `α_j` times its clean value, so one forward and one backward pass
    /// give every neuron's path derivative at once.
    pub fn attribute(&self, prompt: &Prompt, m: usize) -> Result<AttributionMap> {
        if m == 0 {
            return Err(Error::InvalidArgument("m must be at least 1".into()));
        }
        let cfg = *self.config();
        let clean = self.neuron_gradients(&prompt.q, &prompt.e, &InterventionSpec::new())?;
        let baseline = clean.activations;
        let mut scores = vec![0.0; cfg.neuron_count()];
        for (alpha, w) in Quadrature::RightRiemann.points(m) {
            let hook = PatchAll {
                baseline: &baseline,
                alpha: T::of(alpha),
            };
            let g = self.neuron_gradients(&prompt.q, &prompt.e, &hook)?;
            for (s, d) in scores.iter_mut().zip(g.along_all(&baseline)) {
                *s += w * d.f64();
            }
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("attribution scores".into()));
        }
        Ok(AttributionMap {
            key: PromptKey::of(prompt),
            n_layers: cfg.n_layers,
            d_ff: cfg.d_ff,
            scores,
            likelihood: clean.likelihood.f64(),
        })
    }

    /// Attribution of one neuron along its own path: only that neuron is
    /// scaled, every other activation is computed normally.
    pub fn attribute_neuron(
        &self,
        prompt: &Prompt,
        neuron: NeuronRef,
        m: usize,
        quadrature: Quadrature,
    ) -> Result<f64> {
        if m == 0 {
            return Err(Error::InvalidArgument("m must be at least 1".into()));
        }
        neuron.check(self.config())?;
        let baseline = self.clean_activations(prompt)?;
        let mut att = 0.0;
        for (alpha, w) in quadrature.points(m) {
            let hook = InterventionSpec::scaling([neuron], alpha)?;
            let g = self.neuron_gradients(&prompt.q, &prompt.e, &hook)?;
            att += w * g.along(neuron, &baseline).f64();
        }
        Ok(att)
    }
}

/// Per-prompt active set: neurons with `a_i > τ1 · max_j a_j`.
pub fn active_set(scores: &[f64], tau1: f64, absolute: bool) -> Vec<usize> {
    let value = |x: f64| if absolute { x.abs() } else { x };
    let Some(max) = scores.iter().map(|&x| value(x)).max_by(f64::total_cmp) else {
        return Vec::new();
    };
    let threshold = tau1 * max;
    scores
        .iter()
        .enumerate()
        .filter(|&(_, &x)| value(x) > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Privacy neurons of one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSelection {
    pub language: String,
    pub dataset_size: usize,
    /// Per neuron, number of prompts whose active set holds it.
    pub frequencies: Vec<u32>,
    /// Per neuron, summed attribution over the dataset.
    pub attribution_sum: Vec<f64>,
    pub selected: BTreeSet<NeuronRef>,
}

impl LanguageSelection {
    /// `selected` ordered by frequency, then attribution sum, both
    /// descending, then by neuron.
    pub fn ranked(&self, d_ff: usize) -> Vec<NeuronRef> {
        let mut v: Vec<NeuronRef> = self.selected.iter().copied().collect();
        v.sort_by(|a, b| {
            let (i, j) = (a.flat(d_ff), b.flat(d_ff));
            self.frequencies[j]
                .cmp(&self.frequencies[i])
                .then(self.attribution_sum[j].total_cmp(&self.attribution_sum[i]))
                .then(a.cmp(b))
        });
        v
    }
}

/// Applies the per-prompt and frequency thresholds over a language's maps.
pub fn select_privacy_neurons(
    language: &str,
    maps: &[AttributionMap],
    cfg: &SelectionConfig,
) -> Result<LanguageSelection> {
    cfg.validate()?;
    let Some(first) = maps.first() else {
        return Err(Error::InvalidArgument(format!(
            "no attribution maps for `{language}`"
        )));
    };
    let n = first.scores.len();
    let mut frequencies = vec![0u32; n];
    let mut attribution_sum = vec![0.0; n];
    for m in maps {
        if !m.same_shape(first) || m.scores.len() != n {
            return Err(Error::InvalidArgument(
                "attribution maps from different model shapes".into(),
            ));
        }
        for i in active_set(&m.scores, cfg.tau1, cfg.absolute) {
            frequencies[i] += 1;
        }
        for (s, &x) in attribution_sum.iter_mut().zip(&m.scores) {
            *s += x;
        }
    }
    let cut = cfg.tau2 * maps.len() as f64;
    let selected = frequencies
        .iter()
        .enumerate()
        .filter(|&(_, &f)| f as f64 > cut)
        .map(|(i, _)| NeuronRef::from_flat(i, first.d_ff))
        .collect();
    Ok(LanguageSelection {
        language: language.to_string(),
        dataset_size: maps.len(),
        frequencies,
        attribution_sum,
        selected,
    })
}

/// Universal neurons (shared by every language) and each language's rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronSets {
    pub universal: BTreeSet<NeuronRef>,
    pub specific: BTreeMap<String, BTreeSet<NeuronRef>>,
}

impl NeuronSets {
    /// `P_uni ∪ P_lang^spec`, which equals that language's selected set.
    pub fn language_set(&self, language: &str) -> Result<BTreeSet<NeuronRef>> {
        let spec = self.specific.get(language).ok_or_else(|| {
            Error::UnknownLanguage(format!("no neuron set for `{language}`"))
        })?;
        Ok(self.universal.union(spec).copied().collect())
    }

    pub fn union_all(&self) -> BTreeSet<NeuronRef> {
        let mut all = self.universal.clone();
        for s in self.specific.values() {
            all.extend(s);
        }
        all
    }

    pub fn counts(&self) -> Vec<NeuronCount> {
        self.specific
            .iter()
            .map(|(l, s)| NeuronCount {
                language: l.clone(),
                universal: self.universal.len(),
                specific: s.len(),
                total: self.universal.len() + s.len(),
            })
            .collect()
    }
}

/// Splits per-language sets into their intersection and the remainders.
pub fn partition(sets: &BTreeMap<String, BTreeSet<NeuronRef>>) -> Result<NeuronSets> {
    if sets.len() < 2 {
        return Err(Error::InvalidArgument(
            "partition needs at least two languages".into(),
        ));
    }
    let mut iter = sets.values();
    let mut universal = iter.next().cloned().unwrap_or_default();
    for s in iter {
        universal.retain(|n| s.contains(n));
    }
    let specific = sets
        .iter()
        .map(|(l, s)| (l.clone(), s.difference(&universal).copied().collect()))
        .collect();
    Ok(NeuronSets {
        universal,
        specific,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronCount {
    pub language: String,
    pub universal: usize,
    pub specific: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionThresholds {
    pub tau1: f64,
    pub tau2: f64,
    pub m: usize,
}

/// On-disk form of a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSetFile {
    pub model_id: String,
    pub config: SelectionThresholds,
    pub universal: BTreeSet<NeuronRef>,
    pub specific: BTreeMap<String, BTreeSet<NeuronRef>>,
}

impl NeuronSetFile {
    pub fn new(model_id: &str, cfg: &SelectionConfig, sets: &NeuronSets) -> Self {
        Self {
            model_id: model_id.to_string(),
            config: SelectionThresholds {
                tau1: cfg.tau1,
                tau2: cfg.tau2,
                m: cfg.m,
            },
            universal: sets.universal.clone(),
            specific: sets.specific.clone(),
        }
    }

    pub fn sets(&self) -> NeuronSets {
        NeuronSets {
            universal: self.universal.clone(),
            specific: self.specific.clone(),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for n in self.universal.iter().chain(self.specific.values().flatten()) {
            n.check(config)?;
        }
        Ok(())
    }
}

pub fn write_counts_csv(path: &Path, sets: &NeuronSets) -> Result<()> {
    write_csv(path, &sets.counts())
}
