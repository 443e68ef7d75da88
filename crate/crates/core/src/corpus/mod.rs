//! Synthetic multilingual PII corpus: parallel narratives, QA probes and the
//! tokenizer fitted to them.

mod bank;
mod generate;
mod pools;
mod prompts;
mod tokenizer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bank::{LanguageTemplates, PromptTemplate, PseudoSpec, TemplateBank, NAME_SLOT};
pub use generate::{generate_corpus, read_corpus_jsonl, write_corpus_jsonl, Corpus, CorpusLine, CorpusSplit, PiiRecord};
pub use pools::{EMAIL_DOMAINS, FIRST_NAMES, LAST_NAMES, NAME_POOL};
pub use prompts::{render_prompts, render_shuffled_prompts, Prompt};
pub use tokenizer::{Tokenizer, UNK};

use crate::error::Error;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum PiiType {
    Job,
    Email,
    Phone,
}

impl PiiType {
    pub const ALL: [PiiType; 3] = [PiiType::Job, PiiType::Email, PiiType::Phone];

    pub fn as_str(&self) -> &'static str {
        match self {
            PiiType::Job => "job",
            PiiType::Email => "email",
            PiiType::Phone => "phone",
        }
    }
}

impl fmt::Display for PiiType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PiiType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "job" => Ok(PiiType::Job),
            "email" => Ok(PiiType::Email),
            "phone" => Ok(PiiType::Phone),
            other => Err(Error::InvalidArgument(format!("unknown PII type `{other}`"))),
        }
    }
}
