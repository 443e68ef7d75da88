use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::intervene::Strategy;
use crate::neurons::SelectionConfig;
use crate::nn::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub n_records: usize,
    pub languages: Vec<String>,
    pub valid_fraction: f64,
    /// Share of the non-validation records held back for memorization.
    pub memorize_fraction: f64,
    /// Template bank to use instead of the built-in one.
    pub templates: Option<PathBuf>,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            n_records: 200,
            languages: vec!["en".into(), "zh".into()],
            valid_fraction: 0.1,
            memorize_fraction: 0.5,
            templates: None,
        }
    }
}

/// Model shape; the vocabulary size is taken from the fitted tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelParams {
    fn default() -> Self {
        let d = ModelConfig::desk(2);
        Self {
            n_layers: d.n_layers,
            d_model: d.d_model,
            d_ff: d.d_ff,
            n_heads: d.n_heads,
            context_len: d.context_len,
            tie_embeddings: d.tie_embeddings,
        }
    }
}

impl ModelParams {
    pub fn resolve(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            vocab_size,
            context_len: self.context_len,
            seed,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisParams {
    /// Share of probes kept as high-risk instances.
    pub high_risk_fraction: f64,
    /// Seed of the shuffled-name control.
    pub shuffle_seed: u64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            high_risk_fraction: 0.03,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterveneParams {
    pub strategies: Vec<Strategy>,
}

impl Default for InterveneParams {
    fn default() -> Self {
        Self {
            strategies: vec![
                Strategy::None,
                Strategy::Mpnc { budget: None },
                Strategy::Depn,
                Strategy::ApneapLike,
                Strategy::Random {
                    budget: None,
                    seed: 0,
                },
                Strategy::Random {
                    budget: None,
                    seed: 1,
                },
                Strategy::Random {
                    budget: None,
                    seed: 2,
                },
                Strategy::Universal,
                Strategy::OwnSpecific,
                Strategy::OtherSpecific,
            ],
        }
    }
}

/// One declarative description of a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; every stage seed is derived from it.
    pub seed: u64,
    pub precision: Precision,
    /// Root of the stage directories; not part of any stage key.
    pub output_dir: PathBuf,
    pub corpus: CorpusParams,
    pub model: ModelParams,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub analysis: AnalysisParams,
    pub selection: SelectionConfig,
    pub intervene: InterveneParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            output_dir: PathBuf::from("runs"),
            corpus: CorpusParams::default(),
            model: ModelParams::default(),
            pretrain: TrainConfig {
                epochs: 8,
                learning_rate: 3e-3,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 10,
                batch_size: 4,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            analysis: AnalysisParams::default(),
            selection: SelectionConfig {
                tau2: 0.4,
                ..SelectionConfig::default()
            },
            intervene: InterveneParams::default(),
        }
    }
}

/// Stage seeds derived from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub corpus: u64,
    pub split: u64,
    pub model: u64,
    pub pretrain: u64,
    pub finetune: u64,
    pub shuffle: u64,
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets a dotted key such as `finetune.epochs` from a TOML literal;
    /// bare words are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::InvalidConfig(format!("`{key}` does not name a config entry")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed);
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let next: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("`{key}`: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.n_records == 0 {
            return Err(Error::InvalidConfig("corpus.n_records must be at least 1".into()));
        }
        if c.languages.len() < 2 {
            return Err(Error::InvalidConfig("a run needs at least two languages".into()));
        }
        if !c.languages.contains(&self.finetune.language) {
            return Err(Error::InvalidConfig(format!(
                "fine-tune language `{}` is not a corpus language",
                self.finetune.language
            )));
        }
        self.model.resolve(2, 0).validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.selection.validate()?;
        let f = self.analysis.high_risk_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidConfig("analysis.high_risk_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            corpus: derive_seed(self.seed, "corpus"),
            split: derive_seed(self.seed, "split"),
            model: derive_seed(self.seed, "model"),
            pretrain: derive_seed(self.seed, "pretrain"),
            finetune: derive_seed(self.seed, "finetune"),
            shuffle: derive_seed(self.seed ^ self.analysis.shuffle_seed, "shuffle"),
        }
    }

    pub fn language(&self) -> &str {
        &self.finetune.language
    }
}
