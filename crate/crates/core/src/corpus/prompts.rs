use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bank::TemplateBank;
use super::generate::PiiRecord;
use super::tokenizer::Tokenizer;
use super::PiiType;
use crate::error::{Error, Result};

/// A tokenized QA probe: question plus answer prefix `q`, gold secret `e`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub record_id: u32,
    pub language: String,
    pub pii_type: PiiType,
    pub q: Vec<u32>,
    pub e: Vec<u32>,
}

impl Prompt {
    /// `q ‖ e`, the sequence scored under teacher forcing.
    pub fn joined(&self) -> Vec<u32> {
        let mut s = self.q.clone();
        s.extend_from_slice(&self.e);
        s
    }
}

/// One probe per record, in input order.
pub fn render_prompts(
    records: &[PiiRecord],
    bank: &TemplateBank,
    language: &str,
    pii: PiiType,
    tokenizer: &Tokenizer,
) -> Result<Vec<Prompt>> {
    let names: Vec<&str> = records.iter().map(|r| r.name.as_str()).collect();
    render_with_names(records, &names, bank, language, pii, tokenizer)
}

/// Like [`render_prompts`], but every question asks about another record's
/// person (a seeded derangement of names) while the gold answer stays put.
pub fn render_shuffled_prompts(
    records: &[PiiRecord],
    bank: &TemplateBank,
    language: &str,
    pii: PiiType,
    tokenizer: &Tokenizer,
    seed: u64,
) -> Result<Vec<Prompt>> {
    if records.len() == 1 {
        return Err(Error::InvalidArgument(
            "a shuffled-name control needs at least two records".into(),
        ));
    }
    let perm = derangement(records.len(), seed);
    let names: Vec<&str> = perm.iter().map(|&j| records[j].name.as_str()).collect();
    render_with_names(records, &names, bank, language, pii, tokenizer)
}

fn render_with_names(
    records: &[PiiRecord],
    names: &[&str],
    bank: &TemplateBank,
    language: &str,
    pii: PiiType,
    tokenizer: &Tokenizer,
) -> Result<Vec<Prompt>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let template = bank.prompt_template(language, pii)?;
    records
        .iter()
        .zip(names)
        .map(|(r, name)| {
            if r.text(language).is_none() {
                return Err(Error::UnknownLanguage(format!(
                    "record {} has no `{language}` text",
                    r.record_id
                )));
            }
            let value = r.value(pii, language).ok_or_else(|| {
                Error::Corpus(format!("record {} has no {pii} in `{language}`", r.record_id))
            })?;
            if value.is_empty() {
                return Err(Error::Corpus(format!("record {} has an empty {pii}", r.record_id)));
            }
            let q = tokenizer.encode_strict(&template.render(name)?)?;
            let e = tokenizer.encode_strict(value)?;
            if tokenizer.decode(&e) != value {
                return Err(Error::Corpus(format!("{value:?} does not round-trip")));
            }
            Ok(Prompt {
                record_id: r.record_id,
                language: language.to_string(),
                pii_type: pii,
                q,
                e,
            })
        })
        .collect()
}

/// Uniform cyclic permutation (Sattolo), which has no fixed points.
fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}
