//! Logit-lens traces, high-risk instance selection and cross-language
//! hidden-state similarity.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{PiiType, Prompt};
use crate::error::{Error, Result};
use crate::metrics::{reciprocal_rank, write_csv, MrrScore};
use crate::nn::{teacher_forced, ActivationHook, TransformerModel};
use crate::scalar::Scalar;

/// Identifies a probe within a prompt table.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PromptKey {
    pub record_id: u32,
    pub language: String,
    pub pii_type: PiiType,
}

impl PromptKey {
    pub fn of(p: &Prompt) -> Self {
        Self {
            record_id: p.record_id,
            language: p.language.clone(),
            pii_type: p.pii_type,
        }
    }
}

/// Per-layer reciprocal ranks of one prompt's secret tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub key: PromptKey,
    /// Index `ℓ` holds the readout of `h_ℓ`, for `ℓ = 0..=L`.
    pub layers: Vec<MrrScore>,
}

impl LayerTrace {
    pub fn mrr(&self) -> Vec<f64> {
        self.layers.iter().map(|s| s.value).collect()
    }
}

impl<T: Scalar> TransformerModel<T> {
    /// Reads every layer's hidden state at the positions that predict the
    /// secret through the final norm and unembedding.
    pub fn layer_trace<H: ActivationHook<T> + ?Sized>(
        &self,
        prompt: &Prompt,
        hook: &H,
    ) -> Result<LayerTrace> {
        let seq = teacher_forced(self.config(), &prompt.q, &prompt.e)?;
        self.check_tokens(&prompt.e)?;
        let from = prompt.q.len() - 1;
        let cache = self.forward_cached(&seq, hook, seq.len() - 1)?;
        let layers = cache
            .trace
            .hidden
            .iter()
            .map(|h| {
                let ranks = prompt
                    .e
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| reciprocal_rank(&self.project(h.row(from + i)), t))
                    .collect::<Result<Vec<_>>>()?;
                MrrScore::from_ranks(ranks)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerTrace {
            key: PromptKey::of(prompt),
            layers,
        })
    }

    /// Hidden state `h_ℓ` at the last question position, for every layer.
    pub fn prompt_states<H: ActivationHook<T> + ?Sized>(
        &self,
        q: &[u32],
        hook: &H,
    ) -> Result<Vec<Vec<T>>> {
        if q.is_empty() {
            return Err(Error::EmptySequence);
        }
        let cache = self.forward_cached(q, hook, q.len() - 1)?;
        let last = q.len() - 1;
        Ok(cache
            .trace
            .hidden
            .iter()
            .map(|h| h.row(last).to_vec())
            .collect())
    }
}

/// Dataset-level trace: the mean of per-prompt layer MRRs.
pub fn mean_trace(traces: &[LayerTrace]) -> Result<Vec<f64>> {
    let Some(first) = traces.first() else {
        return Err(Error::InvalidArgument("no traces to average".into()));
    };
    let mut acc = vec![0.0; first.layers.len()];
    for t in traces {
        if t.layers.len() != acc.len() {
            return Err(Error::InvalidArgument("traces of different depth".into()));
        }
        for (a, s) in acc.iter_mut().zip(&t.layers) {
            *a += s.value;
        }
    }
    Ok(acc.into_iter().map(|a| a / traces.len() as f64).collect())
}

/// Which selected prompts a high-risk set keeps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskGroup {
    All,
    /// Prompts in this language (the "English-risk" group for `en`).
    In(String),
    /// Prompts in any other language.
    NotIn(String),
}

impl RiskGroup {
    pub fn admits(&self, language: &str) -> bool {
        match self {
            RiskGroup::All => true,
            RiskGroup::In(l) => l == language,
            RiskGroup::NotIn(l) => l != language,
        }
    }

    pub fn label(&self) -> String {
        match self {
            RiskGroup::All => "all".into(),
            RiskGroup::In(l) => format!("{l}-risk"),
            RiskGroup::NotIn(l) => format!("non-{l}-risk"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighRiskSet {
    pub fraction: f64,
    pub group: RiskGroup,
    /// Sorted.
    pub selected: Vec<PromptKey>,
}

/// Takes the top `⌈fraction · N⌉` rows by MRR (ties to the smaller record
/// id), then keeps those admitted by `group`.
pub fn select_high_risk(
    table: &[(PromptKey, f64)],
    fraction: f64,
    group: RiskGroup,
) -> Result<HighRiskSet> {
    if table.is_empty() {
        return Err(Error::InvalidArgument("empty MRR table".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let k = ((fraction * table.len() as f64).ceil() as usize).min(table.len());
    let mut order: Vec<&(PromptKey, f64)> = table.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut selected: Vec<PromptKey> = order[..k]
        .iter()
        .filter(|(key, _)| group.admits(&key.language))
        .map(|(key, _)| key.clone())
        .collect();
    selected.sort();
    Ok(HighRiskSet {
        fraction,
        group,
        selected,
    })
}

/// Cosine similarity, `None` when either vector has zero norm.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.f64(), y.f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean per-layer cosine between parallel prompts in two languages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTrace {
    pub pair: (String, String),
    /// `None` where every instance had a zero-norm state.
    pub values: Vec<Option<f64>>,
    pub instances: usize,
}

impl SimilarityTrace {
    /// First layer holding the maximum value.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (l, v) in self.values.iter().enumerate() {
            if let Some(v) = *v {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((l, v));
                }
            }
        }
        best.map(|(l, _)| l)
    }
}

/// Averages per-layer cosine over `(A-prompt, B-prompt)` pairs of the same
/// record, each at its own last question position.
pub fn similarity_trace<T: Scalar, H: ActivationHook<T> + ?Sized>(
    model: &TransformerModel<T>,
    pairs: &[(&Prompt, &Prompt)],
    hook: &H,
) -> Result<SimilarityTrace> {
    let Some((a0, b0)) = pairs.first() else {
        return Err(Error::InvalidArgument("no prompt pairs".into()));
    };
    let pair = (a0.language.clone(), b0.language.clone());
    let depth = model.config().n_layers + 1;
    let mut sums = vec![0.0; depth];
    let mut counts = vec![0usize; depth];
    for (a, b) in pairs {
        if a.record_id != b.record_id || (a.language.as_str(), b.language.as_str()) != (&pair.0, &pair.1) {
            return Err(Error::InvalidArgument(
                "similarity pairs must share record and language pair".into(),
            ));
        }
        let ha = model.prompt_states(&a.q, hook)?;
        let hb = model.prompt_states(&b.q, hook)?;
        for l in 0..depth {
            if let Some(c) = cosine(&ha[l], &hb[l]) {
                sums[l] += c;
                counts[l] += 1;
            }
        }
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(SimilarityTrace {
        pair,
        values,
        instances: pairs.len(),
    })
}

/// One row of a trace export, shaped for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub layer: usize,
    pub language_or_pair: String,
    pub group: String,
    pub metric: String,
    pub value: Option<f64>,
}

impl TraceRow {
    pub fn series(
        values: impl IntoIterator<Item = Option<f64>>,
        language_or_pair: &str,
        group: &str,
        metric: &str,
    ) -> Vec<Self> {
        values
            .into_iter()
            .enumerate()
            .map(|(layer, value)| Self {
                layer,
                language_or_pair: language_or_pair.to_string(),
                group: group.to_string(),
                metric: metric.to_string(),
                value,
            })
            .collect()
    }
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_csv(path, rows)
}
