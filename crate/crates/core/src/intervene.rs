//! Neuron-editing strategies (MPNC and baselines) and their evaluation by
//! leakage MRR and validation perplexity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PiiType, Prompt};
use crate::error::{Error, Result};
use crate::metrics::{mean, prompt_mrrs, write_csv};
use crate::neurons::{LanguageSelection, NeuronSets};
use crate::nn::{Action, InterventionSpec, ModelConfig, NeuronRef, TransformerModel};
use crate::scalar::Scalar;

/// An editing strategy. Strategies that depend on a language resolve it
/// against the probe language at evaluation time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    /// No edit.
    None,
    /// Zero the universal set and the probe language's specific set,
    /// optionally only the `budget` highest-ranked of them.
    Mpnc {
        #[serde(default)]
        budget: Option<usize>,
    },
    /// Zero the language-unaware reference set.
    Depn,
    /// Patch the reference set to mean clean activations.
    ApneapLike,
    /// Zero a seeded uniform sample; `None` matches the probe language's
    /// MPNC size.
    Random {
        #[serde(default)]
        budget: Option<usize>,
        seed: u64,
    },
    /// Zero the universal set only.
    Universal,
    /// Zero the probe language's specific set.
    OwnSpecific,
    /// Zero every other language's specific set.
    OtherSpecific,
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::None => "none".into(),
            Strategy::Mpnc { budget: None } => "mpnc".into(),
            Strategy::Mpnc { budget: Some(b) } => format!("mpnc-{b}"),
            Strategy::Depn => "depn".into(),
            Strategy::ApneapLike => "apneap_like".into(),
            Strategy::Random { budget: None, seed } => format!("random-matched-s{seed}"),
            Strategy::Random {
                budget: Some(b),
                seed,
            } => format!("random-{b}-s{seed}"),
            Strategy::Universal => "universal".into(),
            Strategy::OwnSpecific => "own_specific".into(),
            Strategy::OtherSpecific => "other_specific".into(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Everything a strategy may draw on.
#[derive(Debug, Clone, Copy)]
pub struct EditInputs<'a> {
    pub sets: &'a NeuronSets,
    /// Per-language selections, used to rank neurons under a budget.
    pub selections: &'a BTreeMap<String, LanguageSelection>,
    /// Reference set for the language-unaware baselines.
    pub reference: &'a BTreeSet<NeuronRef>,
    /// Mean clean activation per neuron, flattened in `(layer, index)` order.
    pub mean_activations: Option<&'a [f64]>,
}

/// Builds the intervention a strategy applies when probing `language`.
pub fn make_spec(
    strategy: &Strategy,
    language: &str,
    inputs: &EditInputs<'_>,
    config: &ModelConfig,
) -> Result<InterventionSpec> {
    let sets = inputs.sets;
    let own_specific = || {
        sets.specific.get(language).ok_or_else(|| {
            Error::UnknownLanguage(format!("no specific neurons for `{language}`"))
        })
    };
    let spec = match strategy {
        Strategy::None => InterventionSpec::new(),
        Strategy::Mpnc { budget: None } => InterventionSpec::zeroing(sets.language_set(language)?)?,
        Strategy::Mpnc { budget: Some(b) } => {
            let sel = inputs.selections.get(language).ok_or_else(|| {
                Error::UnknownLanguage(format!("no selection for `{language}`"))
            })?;
            let mut ranked = sel.ranked(config.d_ff);
            ranked.retain(|n| sets.universal.contains(n) || sets.specific[language].contains(n));
            ranked.truncate(*b);
            InterventionSpec::zeroing(ranked)?
        }
        Strategy::Depn => InterventionSpec::zeroing(inputs.reference.iter().copied())?,
        Strategy::ApneapLike => {
            let means = inputs.mean_activations.ok_or_else(|| {
                Error::InvalidArgument("apneap_like needs mean activations".into())
            })?;
            if means.len() != config.neuron_count() {
                return Err(Error::InvalidArgument("mean activations of wrong length".into()));
            }
            let mut spec = InterventionSpec::new();
            for &n in inputs.reference {
                spec.insert(n, Action::Patch(means[n.flat(config.d_ff)]))?;
            }
            spec
        }
        Strategy::Random { budget, seed } => {
            let k = match budget {
                Some(b) => *b,
                None => sets.language_set(language)?.len(),
            };
            random_spec(k, *seed, config)?
        }
        Strategy::Universal => InterventionSpec::zeroing(sets.universal.iter().copied())?,
        Strategy::OwnSpecific => InterventionSpec::zeroing(own_specific()?.iter().copied())?,
        Strategy::OtherSpecific => {
            own_specific()?;
            let others: BTreeSet<NeuronRef> = sets
                .specific
                .iter()
                .filter(|(l, _)| l.as_str() != language)
                .flat_map(|(_, s)| s.iter().copied())
                .collect();
            InterventionSpec::zeroing(others)?
        }
    };
    spec.validate(config)?;
    Ok(spec)
}

/// Zeroes `k` neurons drawn uniformly without replacement.
pub fn random_spec(k: usize, seed: u64, config: &ModelConfig) -> Result<InterventionSpec> {
    let total = config.neuron_count();
    if k > total {
        return Err(Error::InvalidArgument(format!(
            "budget {k} exceeds the {total} neurons available"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, k).into_iter().map(|i| NeuronRef::from_flat(i, config.d_ff));
    InterventionSpec::zeroing(picks)
}

/// Mean clean activation of every neuron over all positions of `texts`.
pub fn mean_activations<T: Scalar>(model: &TransformerModel<T>, texts: &[Vec<u32>]) -> Result<Vec<f64>> {
    let cfg = model.config();
    let mut sums = vec![0.0; cfg.neuron_count()];
    let mut count = 0usize;
    let hook = InterventionSpec::new();
    for t in texts.iter().filter(|t| !t.is_empty()) {
        let out = model.forward(t, &hook)?;
        for (l, acts) in out.trace.ffn_acts.iter().enumerate() {
            for p in 0..acts.rows() {
                for (k, &a) in acts.row(p).iter().enumerate() {
                    sums[l * cfg.d_ff + k] += a.f64();
                }
            }
        }
        count += t.len();
    }
    if count == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrrCell {
    pub strategy: String,
    pub language: String,
    pub pii_type: PiiType,
    pub mrr: f64,
    pub prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplCell {
    pub strategy: String,
    pub language: String,
    pub valid_ppl: f64,
    pub neurons: usize,
}

/// Mean MRR per (strategy, probe language, PII type) and Valid-PPL per
/// (strategy, probe language).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: Vec<MrrCell>,
    pub ppl: Vec<PplCell>,
}

impl EvalReport {
    /// Mean over PII types of the per-type mean MRR.
    pub fn language_mrr(&self, strategy: &str, language: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .mrr
            .iter()
            .filter(|c| c.strategy == strategy && c.language == language)
            .map(|c| c.mrr)
            .collect();
        (!v.is_empty()).then(|| mean(&v))
    }

    pub fn valid_ppl(&self, strategy: &str, language: &str) -> Option<f64> {
        self.ppl
            .iter()
            .find(|c| c.strategy == strategy && c.language == language)
            .map(|c| c.valid_ppl)
    }

    pub fn write_csv(&self, mrr_path: &Path, ppl_path: &Path) -> Result<()> {
        write_csv(mrr_path, &self.mrr)?;
        write_csv(ppl_path, &self.ppl)
    }
}

/// Prompt sets keyed by (probe language, PII type).
pub type PromptSets = BTreeMap<(String, PiiType), Vec<Prompt>>;

/// Evaluates every strategy on every prompt set, plus Valid-PPL on `valid`.
pub fn evaluate<T: Scalar>(
    model: &TransformerModel<T>,
    strategies: &[Strategy],
    prompts: &PromptSets,
    valid: &[Vec<u32>],
    inputs: &EditInputs<'_>,
) -> Result<EvalReport> {
    let languages: BTreeSet<&String> = prompts.keys().map(|(l, _)| l).collect();
    let mut report = EvalReport::default();
    let mut ppl_cache: BTreeMap<Vec<(NeuronRef, String)>, f64> = BTreeMap::new();
    for s in strategies {
        for &lang in &languages {
            let spec = make_spec(s, lang, inputs, model.config())?;
            for ((l, pii), ps) in prompts.range((lang.clone(), PiiType::Job)..) {
                if l != lang {
                    break;
                }
                let mrrs = prompt_mrrs(model, ps, &spec)?;
                report.mrr.push(MrrCell {
                    strategy: s.label(),
                    language: lang.clone(),
                    pii_type: *pii,
                    mrr: mean(&mrrs),
                    prompts: ps.len(),
                });
            }
            let key: Vec<(NeuronRef, String)> = spec.iter().map(|(n, a)| (*n, format!("{a:?}"))).collect();
            let valid_ppl = match ppl_cache.get(&key) {
                Some(&v) => v,
                None => {
                    let v = model.valid_ppl(valid, &spec)?.value;
                    ppl_cache.insert(key, v);
                    v
                }
            };
            report.ppl.push(PplCell {
                strategy: s.label(),
                language: lang.clone(),
                valid_ppl,
                neurons: spec.len(),
            });
        }
    }
    Ok(report)
}
