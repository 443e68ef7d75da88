//! The run summary written by the final stage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::run::Stage;
use super::stages::{leakage_summary, InterveneResult, LensResult, Selection};
use crate::corpus::{Corpus, CorpusSplit, PiiType};
use crate::lens::SimilarityTrace;
use crate::metrics::{MrrRow, PplRow};
use crate::neurons::NeuronCount;
use crate::nn::ModelConfig;
use crate::train::TrainLog;

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub records: usize,
    pub pretrain: usize,
    pub memorize: usize,
    pub valid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub pretrain: Vec<f64>,
    pub pretrain_valid: Vec<f64>,
    pub finetune: Vec<f64>,
}

/// Mean MRR over memorized records, `pii_type = None` for all types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageRow {
    pub language: String,
    pub pii_type: Option<PiiType>,
    pub pretrained: Option<f64>,
    pub finetuned: Option<f64>,
    pub shuffled: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensSummary {
    /// Selected instances per high-risk group.
    pub high_risk: BTreeMap<String, usize>,
    pub group_traces: BTreeMap<String, Vec<f64>>,
    pub language_traces: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub pair: (String, String),
    pub values: Vec<Option<f64>>,
    pub argmax: Option<usize>,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSummary {
    pub total: usize,
    pub universal: usize,
    pub reference: usize,
    pub counts: Vec<NeuronCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub strategy: String,
    pub language: String,
    pub mrr: Option<f64>,
    pub valid_ppl: Option<f64>,
    pub neurons: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub languages: Vec<String>,
    pub finetune_language: String,
    pub model: ModelConfig,
    pub split: SplitSizes,
    pub losses: Losses,
    pub valid_ppl: BTreeMap<String, f64>,
    pub leakage: Vec<LeakageRow>,
    pub lens: LensSummary,
    pub similarity: Vec<SimilaritySummary>,
    pub neurons: NeuronSummary,
    pub interventions: Vec<InterventionRow>,
    /// Per probe language, per condition, the layer trace.
    pub condition_traces: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    /// Key of each stage the report was built from.
    pub artifacts: BTreeMap<Stage, String>,
}

impl Report {
    pub fn leakage(&self, language: &str, pii: Option<PiiType>) -> Option<&LeakageRow> {
        self.leakage
            .iter()
            .find(|r| r.language == language && r.pii_type == pii)
    }

    pub fn intervention(&self, strategy: &str, language: &str) -> Option<&InterventionRow> {
        self.interventions
            .iter()
            .find(|r| r.strategy == strategy && r.language == language)
    }

    /// Probe languages other than the fine-tuning language.
    pub fn transfer_languages(&self) -> impl Iterator<Item = &str> {
        self.languages
            .iter()
            .map(String::as_str)
            .filter(move |l| *l != self.finetune_language)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn build_report(
    cfg: &PipelineConfig,
    model: &ModelConfig,
    corpus: &Corpus,
    split: &CorpusSplit,
    rows: &[MrrRow],
    ppl: &[PplRow],
    logs: [&TrainLog; 2],
    lens: &LensResult,
    similarity: &[SimilarityTrace],
    selection: &Selection,
    intervene: &InterveneResult,
    artifacts: BTreeMap<Stage, String>,
) -> Report {
    let leakage = leakage_summary(rows, &corpus.languages)
        .into_iter()
        .map(|s| LeakageRow {
            language: s.language,
            pii_type: s.pii_type,
            pretrained: finite(s.pretrained),
            finetuned: finite(s.finetuned),
            shuffled: finite(s.shuffled),
        })
        .collect();
    let mut interventions = Vec::new();
    for cell in &intervene.report.ppl {
        interventions.push(InterventionRow {
            strategy: cell.strategy.clone(),
            language: cell.language.clone(),
            mrr: intervene
                .report
                .language_mrr(&cell.strategy, &cell.language)
                .and_then(finite),
            valid_ppl: finite(cell.valid_ppl),
            neurons: cell.neurons,
        });
    }
    let mut condition_traces: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in &intervene.condition_traces {
        condition_traces
            .entry(r.language_or_pair.clone())
            .or_default()
            .entry(r.group.clone())
            .or_default()
            .push(r.value.unwrap_or(f64::NAN));
    }
    Report {
        seed: cfg.seed,
        languages: corpus.languages.clone(),
        finetune_language: cfg.language().to_string(),
        model: *model,
        split: SplitSizes {
            records: corpus.records.len(),
            pretrain: split.pretrain.len(),
            memorize: split.memorize.len(),
            valid: split.valid.len(),
        },
        losses: Losses {
            pretrain: logs[0].losses("pretrain"),
            pretrain_valid: logs[0].losses("valid"),
            finetune: logs[1].losses("finetune"),
        },
        valid_ppl: ppl.iter().map(|p| (p.method.clone(), p.valid_ppl)).collect(),
        leakage,
        lens: LensSummary {
            high_risk: lens
                .groups
                .iter()
                .map(|g| (g.group.label(), g.selected.len()))
                .collect(),
            group_traces: lens.group_traces.clone(),
            language_traces: lens.language_traces.clone(),
        },
        similarity: similarity
            .iter()
            .map(|s| SimilaritySummary {
                pair: s.pair.clone(),
                values: s.values.clone(),
                argmax: s.argmax(),
                instances: s.instances,
            })
            .collect(),
        neurons: NeuronSummary {
            total: model.n_layers * model.d_ff,
            universal: selection.sets.universal.len(),
            reference: selection.reference.selected.len(),
            counts: selection.sets.counts(),
        },
        interventions,
        condition_traces,
        artifacts,
    }
}
