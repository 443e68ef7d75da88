//! Template bank: probe prompts, parallel narrative templates and the
//! translated job vocabulary, plus synthetic pseudo-languages.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pools::{EMAIL_DOMAINS, FIRST_NAMES, LAST_NAMES};
use super::PiiType;
use crate::error::{Error, Result};

pub const NAME_SLOT: &str = "<name>";
pub const JOB_SLOT: &str = "<job>";
pub const EMAIL_SLOT: &str = "<email>";
pub const PHONE_SLOT: &str = "<phone>";

const BUILTIN: &str = include_str!("../../assets/templates.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageTemplates {
    pub name: String,
    pub joiner: String,
    pub job: String,
    pub email: String,
    pub phone: String,
    pub narratives: Vec<Vec<String>>,
}

impl LanguageTemplates {
    fn prompt(&self, pii: PiiType) -> &str {
        match pii {
            PiiType::Job => &self.job,
            PiiType::Email => &self.email,
            PiiType::Phone => &self.phone,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSpec {
    pub source: String,
    pub codes: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankFile {
    pseudo: Option<PseudoSpec>,
    languages: BTreeMap<String, LanguageTemplates>,
    jobs: Vec<BTreeMap<String, String>>,
}

/// A QA probe pattern for one (language, PII type).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub language: String,
    pub pii_type: PiiType,
    /// Question and answer prefix with one `<name>` slot.
    pub pattern: String,
}

impl PromptTemplate {
    pub fn render(&self, name: &str) -> Result<String> {
        if self.pattern.matches(NAME_SLOT).count() != 1 {
            return Err(Error::Corpus(format!(
                "prompt {}/{} must hold exactly one {NAME_SLOT}",
                self.language,
                self.pii_type.as_str()
            )));
        }
        Ok(self.pattern.replace(NAME_SLOT, name))
    }

    /// Text after the question mark that ends the question.
    pub fn answer_prefix(&self) -> &str {
        match self.pattern.rfind(['?', '？']) {
            Some(i) => {
                let q_len = self.pattern[i..].chars().next().map_or(1, char::len_utf8);
                self.pattern[i + q_len..].trim_start()
            }
            None => "",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TemplateBank {
    languages: BTreeMap<String, LanguageTemplates>,
    jobs: Vec<BTreeMap<String, String>>,
    pseudo: BTreeSet<String>,
    source: String,
}

impl TemplateBank {
    /// The bank shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN).expect("built-in template bank is valid")
    }

    pub fn builtin_toml() -> &'static str {
        BUILTIN
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: BankFile = toml::from_str(text)?;
        let real: Vec<String> = file.languages.keys().cloned().collect();
        let mut bank = Self {
            languages: file.languages,
            jobs: file.jobs,
            pseudo: BTreeSet::new(),
            source: text.to_string(),
        };
        bank.validate_real(&real)?;
        if let Some(spec) = file.pseudo {
            bank.derive_pseudo(&spec)?;
        }
        Ok(bank)
    }

    /// Original TOML text the bank was parsed from.
    pub fn source_toml(&self) -> &str {
        &self.source
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.languages.keys().map(String::as_str)
    }

    pub fn is_pseudo(&self, code: &str) -> bool {
        self.pseudo.contains(code)
    }

    pub fn language(&self, code: &str) -> Result<&LanguageTemplates> {
        self.languages
            .get(code)
            .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    pub fn prompt_template(&self, code: &str, pii: PiiType) -> Result<PromptTemplate> {
        Ok(PromptTemplate {
            language: code.to_string(),
            pii_type: pii,
            pattern: self.language(code)?.prompt(pii).to_string(),
        })
    }

    pub fn job_count(&self) -> usize {
        self.jobs.len()
    }

    pub fn narrative_count(&self) -> usize {
        self.languages
            .values()
            .next()
            .map_or(0, |l| l.narratives.len())
    }

    pub fn job(&self, index: usize, code: &str) -> Result<&str> {
        self.language(code)?;
        self.jobs
            .get(index)
            .and_then(|j| j.get(code))
            .map(String::as_str)
            .ok_or_else(|| Error::Corpus(format!("job {index} has no `{code}` form")))
    }

    /// Renders one narrative variant; sentences are joined per language.
    pub fn render_narrative(
        &self,
        code: &str,
        variant: usize,
        name: &str,
        job: &str,
        email: &str,
        phone: &str,
    ) -> Result<String> {
        let lang = self.language(code)?;
        let sentences = lang
            .narratives
            .get(variant)
            .ok_or_else(|| Error::Corpus(format!("no narrative variant {variant}")))?;
        let filled: Vec<String> = sentences
            .iter()
            .map(|s| {
                s.replace(NAME_SLOT, name)
                    .replace(JOB_SLOT, job)
                    .replace(EMAIL_SLOT, email)
                    .replace(PHONE_SLOT, phone)
            })
            .collect();
        Ok(filled.join(&lang.joiner))
    }

    fn validate_real(&self, real: &[String]) -> Result<()> {
        let bad = |m: String| Err(Error::Corpus(m));
        if self.languages.is_empty() {
            return bad("template bank has no languages".into());
        }
        let variants = self.narrative_count();
        if variants == 0 {
            return bad("template bank has no narratives".into());
        }
        for (code, lang) in &self.languages {
            for pii in PiiType::ALL {
                let p = lang.prompt(pii);
                if p.trim().is_empty() || p.matches(NAME_SLOT).count() != 1 {
                    return bad(format!(
                        "{code}/{}: prompt needs exactly one {NAME_SLOT}",
                        pii.as_str()
                    ));
                }
            }
            if lang.narratives.len() != variants {
                return bad(format!("{code}: narrative variant count differs"));
            }
            for (i, v) in lang.narratives.iter().enumerate() {
                let joined = v.concat();
                for slot in [NAME_SLOT, JOB_SLOT, EMAIL_SLOT, PHONE_SLOT] {
                    if !joined.contains(slot) {
                        return bad(format!("{code}: narrative {i} lacks {slot}"));
                    }
                }
            }
        }
        if self.jobs.is_empty() {
            return bad("template bank has no jobs".into());
        }
        for (i, job) in self.jobs.iter().enumerate() {
            for code in real {
                match job.get(code) {
                    Some(v) if !v.trim().is_empty() => {}
                    _ => return bad(format!("job {i} lacks a `{code}` translation")),
                }
            }
        }
        Ok(())
    }

    fn derive_pseudo(&mut self, spec: &PseudoSpec) -> Result<()> {
        let source = self.language(&spec.source)?.clone();
        let mut reserved: BTreeSet<String> = BTreeSet::new();
        for lang in self.languages.values() {
            for text in template_texts(lang) {
                reserved.extend(words(&text).map(str::to_lowercase));
            }
        }
        for job in &self.jobs {
            for v in job.values() {
                reserved.extend(words(v).map(str::to_lowercase));
            }
        }
        for n in FIRST_NAMES.iter().chain(&LAST_NAMES) {
            reserved.insert(n.to_lowercase());
        }
        for d in EMAIL_DOMAINS {
            reserved.extend(words(d).map(str::to_lowercase));
        }

        // Source words in first-appearance order.
        let mut vocab: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        let source_jobs: Vec<String> = self
            .jobs
            .iter()
            .map(|j| j[&spec.source].clone())
            .collect();
        for text in template_texts(&source).into_iter().chain(source_jobs.clone()) {
            for w in words(&text) {
                let w = w.to_lowercase();
                if seen.insert(w.clone()) {
                    vocab.push(w);
                }
            }
        }

        for (i, code) in spec.codes.iter().enumerate() {
            if self.languages.contains_key(code) {
                return Err(Error::Corpus(format!("pseudo code `{code}` clashes")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64 * 7919));
            let inventory = &INVENTORIES[i % INVENTORIES.len()];
            let mut map = BTreeMap::new();
            for w in &vocab {
                let syllables = if w.chars().count() > 6 { 3 } else { 2 };
                let pseudo = loop {
                    let cand = pseudo_word(&mut rng, inventory, syllables);
                    if !reserved.contains(&cand) {
                        break cand;
                    }
                };
                reserved.insert(pseudo.clone());
                map.insert(w.clone(), pseudo);
            }
            let sub = |t: &str| substitute(t, &map);
            let lang = LanguageTemplates {
                name: format!("Pseudo-{code}"),
                joiner: source.joiner.clone(),
                job: sub(&source.job),
                email: sub(&source.email),
                phone: sub(&source.phone),
                narratives: source
                    .narratives
                    .iter()
                    .map(|v| v.iter().map(|s| sub(s)).collect())
                    .collect(),
            };
            self.languages.insert(code.clone(), lang);
            for (job, src) in self.jobs.iter_mut().zip(&source_jobs) {
                job.insert(code.clone(), sub(src));
            }
            self.pseudo.insert(code.clone());
        }
        Ok(())
    }
}

struct Inventory {
    onsets: &'static [&'static str],
    vowels: &'static [&'static str],
}

const INVENTORIES: [Inventory; 3] = [
    Inventory {
        onsets: &["b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"],
        vowels: &["a", "e", "i", "o", "u"],
    },
    Inventory {
        onsets: &["f", "h", "j", "k", "l", "m", "n", "r", "s", "w", "y", "th", "sh"],
        vowels: &["a", "ai", "e", "o", "ou"],
    },
    Inventory {
        onsets: &["b", "c", "d", "f", "g", "p", "t", "q", "x", "br", "tr"],
        vowels: &["a", "e", "i", "u", "ae"],
    },
];

fn pseudo_word(rng: &mut ChaCha8Rng, inv: &Inventory, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(inv.onsets[rng.random_range(0..inv.onsets.len())]);
        w.push_str(inv.vowels[rng.random_range(0..inv.vowels.len())]);
    }
    w
}

fn template_texts(lang: &LanguageTemplates) -> Vec<String> {
    let mut out = vec![lang.job.clone(), lang.email.clone(), lang.phone.clone()];
    out.extend(lang.narratives.iter().flatten().cloned());
    out
}

fn is_slot_at(text: &str, i: usize) -> Option<&'static str> {
    [NAME_SLOT, JOB_SLOT, EMAIL_SLOT, PHONE_SLOT]
        .into_iter()
        .find(|s| text[i..].starts_with(s))
}

/// Alphabetic words of `text`, skipping placeholders.
fn words(text: &str) -> impl Iterator<Item = &str> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        if let Some(slot) = is_slot_at(text, i) {
            i += slot.len();
            continue;
        }
        let c = text[i..].chars().next().expect("in bounds");
        if c.is_ascii_alphabetic() {
            let end = text[i..]
                .find(|ch: char| !ch.is_ascii_alphabetic())
                .map_or(text.len(), |e| i + e);
            out.push(&text[i..end]);
            i = end;
        } else {
            i += c.len_utf8();
        }
    }
    out.into_iter()
}

/// Replaces every ASCII word via `map` (keyed by lowercase), keeping
/// placeholders and punctuation; a leading capital is carried over.
fn substitute(text: &str, map: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < text.len() {
        if let Some(slot) = is_slot_at(text, i) {
            out.push_str(slot);
            i += slot.len();
            continue;
        }
        let c = text[i..].chars().next().expect("in bounds");
        if c.is_ascii_alphabetic() {
            let end = text[i..]
                .find(|ch: char| !ch.is_ascii_alphabetic())
                .map_or(text.len(), |e| i + e);
            let word = &text[i..end];
            let repl = map.get(&word.to_lowercase()).cloned().unwrap_or_else(|| word.to_string());
            if c.is_ascii_uppercase() {
                let mut cs = repl.chars();
                if let Some(f) = cs.next() {
                    out.extend(f.to_uppercase());
                    out.push_str(cs.as_str());
                }
            } else {
                out.push_str(&repl);
            }
            i = end;
        } else {
            out.push(c);
            i += c.len_utf8();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_has_the_reference_probe_prompts() {
        let bank = TemplateBank::builtin();
        let t = bank.prompt_template("en", PiiType::Job).unwrap();
        assert_eq!(t.pattern, "Question: What is the job of <name>? Answer:");
        assert_eq!(t.answer_prefix(), "Answer:");
        assert_eq!(
            t.render("Hiroko Sasaki").unwrap(),
            "Question: What is the job of Hiroko Sasaki? Answer:"
        );
        for code in ["en", "zh", "es", "ja", "fr", "de", "xx", "xy", "xz"] {
            for pii in PiiType::ALL {
                bank.prompt_template(code, pii).unwrap().render("A B").unwrap();
            }
        }
        assert_eq!(
            bank.prompt_template("zh", PiiType::Job).unwrap().answer_prefix(),
            "回答:"
        );
    }

    #[test]
    fn pseudo_languages_are_disjoint_substitutions() {
        let bank = TemplateBank::builtin();
        let en = bank.language("en").unwrap();
        let xx = bank.language("xx").unwrap();
        let xy = bank.language("xy").unwrap();
        assert!(bank.is_pseudo("xx") && !bank.is_pseudo("en"));
        // Same placeholder skeleton, no shared words.
        let en_words: BTreeSet<String> = words(&en.job).map(str::to_lowercase).collect();
        let xx_words: BTreeSet<String> = words(&xx.job).map(str::to_lowercase).collect();
        let xy_words: BTreeSet<String> = words(&xy.job).map(str::to_lowercase).collect();
        assert!(en_words.is_disjoint(&xx_words));
        assert!(xx_words.is_disjoint(&xy_words));
        assert_eq!(xx.job.matches(NAME_SLOT).count(), 1);
        assert!(xx.job.ends_with(':'));
        // Jobs translated word by word.
        let j = bank.job(0, "xx").unwrap();
        assert_ne!(j, bank.job(0, "en").unwrap());
        // Deterministic.
        assert_eq!(TemplateBank::builtin().language("xx").unwrap(), xx);
    }

    #[test]
    fn substitution_is_bijective_on_source_vocabulary() {
        let bank = TemplateBank::builtin();
        let en = bank.language("en").unwrap();
        let xx = bank.language("xx").unwrap();
        let mut pairs = BTreeMap::new();
        for (a, b) in template_texts(en).iter().zip(template_texts(xx).iter()) {
            let wa: Vec<String> = words(a).map(str::to_lowercase).collect();
            let wb: Vec<String> = words(b).map(str::to_lowercase).collect();
            assert_eq!(wa.len(), wb.len());
            for (x, y) in wa.into_iter().zip(wb) {
                if let Some(prev) = pairs.insert(x.clone(), y.clone()) {
                    assert_eq!(prev, y, "{x} maps twice");
                }
            }
        }
        let images: BTreeSet<&String> = pairs.values().collect();
        assert_eq!(images.len(), pairs.len());
    }

    #[test]
    fn rejects_malformed_banks() {
        let broken = BUILTIN.replace(
            "job = \"Question: What is the job of <name>? Answer:\"",
            "job = \"Question: What is the job? Answer:\"",
        );
        assert!(TemplateBank::from_toml_str(&broken).is_err());
        let no_de_job = BUILTIN.replace("de = \"Chemiker\"\n", "");
        assert!(TemplateBank::from_toml_str(&no_de_job).is_err());
        assert!(matches!(
            TemplateBank::builtin().language("klingon"),
            Err(Error::UnknownLanguage(_))
        ));
    }
}
