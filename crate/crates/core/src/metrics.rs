//! Token-level leakage (mean reciprocal rank) and utility (base-2
//! perplexity) metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{PiiType, Prompt};
use crate::error::{Error, Result};
use crate::nn::{log_softmax, teacher_forced, ActivationHook, TransformerModel};
use crate::scalar::Scalar;

/// Rank of one target token within a logit vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub target: u32,
    /// 1-based rank; ties go to the smaller token id.
    pub rank: usize,
    pub reciprocal: f64,
}

/// Rank of `target`: one plus the number of strictly larger logits plus the
/// number of equal logits at smaller ids.
pub fn reciprocal_rank<T: Scalar>(logits: &[T], target: u32) -> Result<RankResult> {
    let t = target as usize;
    let Some(&lt) = logits.get(t) else {
        return Err(Error::TokenOutOfRange {
            id: target,
            vocab: logits.len(),
        });
    };
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits passed to reciprocal_rank".into()));
    }
    let above = logits
        .iter()
        .enumerate()
        .filter(|&(v, &x)| x > lt || (x == lt && v < t))
        .count();
    let rank = above + 1;
    Ok(RankResult {
        target,
        rank,
        reciprocal: 1.0 / rank as f64,
    })
}

/// MRR of one secret: the mean reciprocal rank over its tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrrScore {
    pub value: f64,
    pub ranks: Vec<RankResult>,
}

impl MrrScore {
    pub fn from_ranks(ranks: Vec<RankResult>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::EmptySequence);
        }
        let value = ranks.iter().map(|r| r.reciprocal).sum::<f64>() / ranks.len() as f64;
        Ok(Self { value, ranks })
    }

    pub fn n_tokens(&self) -> usize {
        self.ranks.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplScore {
    pub value: f64,
    pub n_tokens: usize,
}

impl<T: Scalar> TransformerModel<T> {
    /// Ranks each `e_i` from the logits at the position before it under
    /// teacher forcing on `Q ‖ e_<i`.
    pub fn mrr<H: ActivationHook<T> + ?Sized>(&self, prompt: &Prompt, hook: &H) -> Result<MrrScore> {
        let seq = teacher_forced(self.config(), &prompt.q, &prompt.e)?;
        self.check_tokens(&prompt.e)?;
        let cache = self.forward_cached(&seq, hook, prompt.q.len() - 1)?;
        let ranks = prompt
            .e
            .iter()
            .enumerate()
            .map(|(r, &t)| reciprocal_rank(cache.logits.row(r), t))
            .collect::<Result<Vec<_>>>()?;
        MrrScore::from_ranks(ranks)
    }

    /// Base-2 perplexity over every next-token prediction in `texts`.
    pub fn valid_ppl<H: ActivationHook<T> + ?Sized>(
        &self,
        texts: &[Vec<u32>],
        hook: &H,
    ) -> Result<PplScore> {
        let mut bits = 0.0;
        let mut n = 0usize;
        for t in texts.iter().filter(|t| t.len() >= 2) {
            let cache = self.forward_cached(&t[..t.len() - 1], hook, 0)?;
            for (r, &y) in t[1..].iter().enumerate() {
                bits -= log_softmax(cache.logits.row(r))[y as usize].f64() / std::f64::consts::LN_2;
            }
            n += t.len() - 1;
        }
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        let value = (bits / n as f64).exp2();
        if !value.is_finite() {
            return Err(Error::NonFinite("validation perplexity".into()));
        }
        Ok(PplScore { value, n_tokens: n })
    }
}

/// Per-prompt MRR under one hook, in the order given.
pub fn prompt_mrrs<T: Scalar, H: ActivationHook<T> + ?Sized>(
    model: &TransformerModel<T>,
    prompts: &[Prompt],
    hook: &H,
) -> Result<Vec<f64>> {
    prompts.iter().map(|p| Ok(model.mrr(p, hook)?.value)).collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// One row of a per-prompt MRR dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrrRow {
    pub record_id: u32,
    pub language: String,
    pub pii_type: PiiType,
    pub method: String,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplRow {
    pub split: String,
    pub method: String,
    pub valid_ppl: f64,
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<R: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
    Ok(rows)
}
