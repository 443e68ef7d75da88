use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bank::TemplateBank;
use super::pools::{EMAIL_DOMAINS, FIRST_NAMES, LAST_NAMES, NAME_POOL};
use super::tokenizer::Tokenizer;
use super::PiiType;
use crate::error::{Error, Result};

/// One person's PII and the parallel narratives that embed it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiRecord {
    pub record_id: u32,
    pub name: String,
    pub email: String,
    pub phone: String,
    /// Job title per language.
    pub jobs: BTreeMap<String, String>,
    /// Narrative per language.
    pub texts: BTreeMap<String, String>,
}

impl PiiRecord {
    pub fn job(&self, lang: &str) -> Option<&str> {
        self.jobs.get(lang).map(String::as_str)
    }

    pub fn text(&self, lang: &str) -> Option<&str> {
        self.texts.get(lang).map(String::as_str)
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.texts.keys().map(String::as_str)
    }

    /// Gold value of `pii` as it appears in `lang`.
    pub fn value(&self, pii: PiiType, lang: &str) -> Option<&str> {
        match pii {
            PiiType::Job => self.job(lang),
            PiiType::Email => Some(&self.email),
            PiiType::Phone => Some(&self.phone),
        }
    }
}

/// One line of the corpus file: a record rendered in one language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub record_id: u32,
    pub language: String,
    pub name: String,
    pub job: String,
    pub email: String,
    pub phone: String,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub languages: Vec<String>,
    pub records: Vec<PiiRecord>,
    pub tokenizer: Tokenizer,
    pub bank: TemplateBank,
}

impl Corpus {
    pub fn record(&self, id: u32) -> Option<&PiiRecord> {
        self.records.iter().find(|r| r.record_id == id)
    }

    pub fn lines(&self) -> Vec<CorpusLine> {
        to_lines(&self.records, &self.languages)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for line in self.lines() {
            s.push_str(&serde_json::to_string(&line).expect("line serializes"));
            s.push('\n');
        }
        s
    }
}

/// Generates `n_records` synthetic people rendered in every language.
///
/// Names, emails and phone numbers are unique across records; jobs come
/// from the bank's closed vocabulary. Deterministic in `seed`.
pub fn generate_corpus(
    bank: &TemplateBank,
    n_records: usize,
    languages: &[String],
    seed: u64,
) -> Result<Corpus> {
    if n_records == 0 {
        return Err(Error::Corpus("n_records must be at least 1".into()));
    }
    if languages.is_empty() {
        return Err(Error::Corpus("at least one language is required".into()));
    }
    let distinct: BTreeSet<&String> = languages.iter().collect();
    if distinct.len() != languages.len() {
        return Err(Error::Corpus("duplicate language code".into()));
    }
    for l in languages {
        bank.language(l)?;
    }
    if n_records > NAME_POOL {
        return Err(Error::Corpus(format!(
            "{n_records} records exceed the {NAME_POOL} unique names available"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut name_ids: Vec<usize> = (0..NAME_POOL).collect();
    name_ids.shuffle(&mut rng);
    let mut phones = BTreeSet::new();
    let mut records = Vec::with_capacity(n_records);
    for (i, &nid) in name_ids.iter().take(n_records).enumerate() {
        let first = FIRST_NAMES[nid / LAST_NAMES.len()];
        let last = LAST_NAMES[nid % LAST_NAMES.len()];
        let name = format!("{first} {last}");
        let job_index = rng.random_range(0..bank.job_count());
        let domain = EMAIL_DOMAINS[rng.random_range(0..EMAIL_DOMAINS.len())];
        let email = format!("{}_{}@{domain}", first.to_lowercase(), last.to_lowercase());
        let phone = loop {
            let p = format!(
                "{:03}-{:04}-{:04}",
                rng.random_range(0..1000),
                rng.random_range(0..10000),
                rng.random_range(0..10000)
            );
            if phones.insert(p.clone()) {
                break p;
            }
        };
        let variant = rng.random_range(0..bank.narrative_count());
        let mut jobs = BTreeMap::new();
        let mut texts = BTreeMap::new();
        for l in languages {
            let job = bank.job(job_index, l)?.to_string();
            let text = bank.render_narrative(l, variant, &name, &job, &email, &phone)?;
            jobs.insert(l.clone(), job);
            texts.insert(l.clone(), text);
        }
        records.push(PiiRecord {
            record_id: i as u32,
            name,
            email,
            phone,
            jobs,
            texts,
        });
    }

    let tokenizer = fit_tokenizer(bank, &records, languages)?;
    Ok(Corpus {
        seed,
        languages: languages.to_vec(),
        records,
        tokenizer,
        bank: bank.clone(),
    })
}

/// Vocabulary over every narrative and every rendered probe (with its gold
/// answer). Job titles are split so each one spans at least two tokens.
fn fit_tokenizer(bank: &TemplateBank, records: &[PiiRecord], languages: &[String]) -> Result<Tokenizer> {
    let mut texts: Vec<String> = vec!["\n".to_string()];
    for r in records {
        for l in languages {
            texts.push(r.texts[l].clone());
            for pii in PiiType::ALL {
                let q = bank.prompt_template(l, pii)?.render(&r.name)?;
                texts.push(q);
                texts.push(r.value(pii, l).expect("rendered").to_string());
            }
        }
    }
    let mut split = BTreeSet::new();
    for i in 0..bank.job_count() {
        for l in languages {
            let job = bank.job(i, l)?;
            if !job.contains(' ') {
                split.insert(job.to_string());
            }
        }
    }
    Ok(Tokenizer::build(
        texts.iter().map(String::as_str),
        &split,
        std::iter::empty(),
    ))
}

fn to_lines(records: &[PiiRecord], languages: &[String]) -> Vec<CorpusLine> {
    let mut out = Vec::new();
    for r in records {
        for l in languages {
            if let Some(text) = r.text(l) {
                out.push(CorpusLine {
                    record_id: r.record_id,
                    language: l.clone(),
                    name: r.name.clone(),
                    job: r.job(l).unwrap_or_default().to_string(),
                    email: r.email.clone(),
                    phone: r.phone.clone(),
                    text: text.to_string(),
                });
            }
        }
    }
    out
}

pub fn write_corpus_jsonl(path: &Path, corpus: &Corpus) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(corpus.to_jsonl().as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads records back from a corpus file, in record-id order.
pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<PiiRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records: BTreeMap<u32, PiiRecord> = BTreeMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: CorpusLine = serde_json::from_str(&line)?;
        let rec = records.entry(l.record_id).or_insert_with(|| PiiRecord {
            record_id: l.record_id,
            name: l.name.clone(),
            email: l.email.clone(),
            phone: l.phone.clone(),
            jobs: BTreeMap::new(),
            texts: BTreeMap::new(),
        });
        if rec.name != l.name || rec.email != l.email || rec.phone != l.phone {
            return Err(Error::Corpus(format!(
                "record {} has inconsistent fields across languages",
                l.record_id
            )));
        }
        rec.jobs.insert(l.language.clone(), l.job);
        rec.texts.insert(l.language, l.text);
    }
    Ok(records.into_values().collect())
}

/// Record-level partition of a corpus.
///
/// `valid` is held out for perplexity; `pretrain` records are seen in every
/// language during pretraining; `memorize` records are only seen during the
/// single-language memorization fine-tune.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub pretrain: Vec<u32>,
    pub memorize: Vec<u32>,
    pub valid: Vec<u32>,
}

impl CorpusSplit {
    pub fn new(ids: &[u32], seed: u64, valid_fraction: f64, memorize_fraction: f64) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Corpus("cannot split an empty corpus".into()));
        }
        for f in [valid_fraction, memorize_fraction] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!("split fraction {f} outside [0, 1)")));
            }
        }
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        // Too few records to partition: every role uses all of them.
        if sorted.len() < 3 {
            return Ok(Self {
                pretrain: sorted.clone(),
                memorize: sorted.clone(),
                valid: sorted,
            });
        }
        let mut shuffled = sorted;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
        let n = shuffled.len();
        let n_valid = ((n as f64 * valid_fraction).round() as usize).clamp(1, n - 2);
        let rest = n - n_valid;
        let n_mem = ((rest as f64 * memorize_fraction).round() as usize).clamp(1, rest - 1);
        let mut valid = shuffled[..n_valid].to_vec();
        let mut memorize = shuffled[n_valid..n_valid + n_mem].to_vec();
        let mut pretrain = shuffled[n_valid + n_mem..].to_vec();
        valid.sort_unstable();
        memorize.sort_unstable();
        pretrain.sort_unstable();
        Ok(Self {
            pretrain,
            memorize,
            valid,
        })
    }
}

const SPLIT_SALT: u64 = 0x5eed_5011;
