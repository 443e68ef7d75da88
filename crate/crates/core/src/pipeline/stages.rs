//! In-memory computation of every pipeline stage.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, PipelineConfig};
use crate::corpus::{
    generate_corpus, render_prompts, render_shuffled_prompts, Corpus, CorpusSplit, PiiRecord, PiiType,
    Prompt, TemplateBank,
};
use crate::error::{Error, Result};
use crate::intervene::{evaluate, mean_activations, make_spec, EditInputs, EvalReport, PromptSets, Strategy};
use crate::lens::{
    mean_trace, select_high_risk, similarity_trace, HighRiskSet, PromptKey, RiskGroup, SimilarityTrace,
    TraceRow,
};
use crate::metrics::{mean, prompt_mrrs, MrrRow};
use crate::neurons::{
    partition, select_privacy_neurons, AttributionMap, LanguageSelection, NeuronSets,
};
use crate::nn::{InterventionSpec, NeuronRef, TransformerModel};
use crate::scalar::Scalar;
use crate::train::{finetune_memorize, pretrain, TrainConfig, TrainLog, TrainingSets};

/// Label of the language-unaware reference selection.
pub const REFERENCE: &str = "reference";

pub fn load_bank(cfg: &PipelineConfig) -> Result<TemplateBank> {
    match &cfg.corpus.templates {
        Some(p) => TemplateBank::load(p),
        None => Ok(TemplateBank::builtin()),
    }
}

pub fn gen_corpus(cfg: &PipelineConfig) -> Result<(Corpus, CorpusSplit)> {
    let seeds = cfg.seeds();
    let bank = load_bank(cfg)?;
    let corpus = generate_corpus(&bank, cfg.corpus.n_records, &cfg.corpus.languages, seeds.corpus)?;
    let ids: Vec<u32> = corpus.records.iter().map(|r| r.record_id).collect();
    let split = CorpusSplit::new(
        &ids,
        seeds.split,
        cfg.corpus.valid_fraction,
        cfg.corpus.memorize_fraction,
    )?;
    Ok((corpus, split))
}

pub fn init_model<T: Scalar>(cfg: &PipelineConfig, corpus: &Corpus) -> Result<TransformerModel<T>> {
    let mc = cfg.model.resolve(corpus.tokenizer.vocab_size(), cfg.seeds().model);
    TransformerModel::new(mc)
}

pub fn pretrain_stage<T: Scalar>(
    cfg: &PipelineConfig,
    model: &mut TransformerModel<T>,
    sets: &TrainingSets,
) -> Result<TrainLog> {
    let tc = TrainConfig {
        seed: cfg.seeds().pretrain,
        ..cfg.pretrain.clone()
    };
    pretrain(model, &sets.pretrain, &sets.valid, &tc)
}

pub fn finetune_stage<T: Scalar>(
    cfg: &PipelineConfig,
    model: &mut TransformerModel<T>,
    sets: &TrainingSets,
) -> Result<TrainLog> {
    let tc = TrainConfig {
        seed: cfg.seeds().finetune,
        ..cfg.finetune.clone()
    };
    finetune_memorize(model, &sets.finetune, &tc)
}

pub fn memorized<'a>(corpus: &'a Corpus, split: &CorpusSplit) -> Result<Vec<&'a PiiRecord>> {
    split
        .memorize
        .iter()
        .map(|&id| {
            corpus
                .record(id)
                .ok_or_else(|| Error::Corpus(format!("split names missing record {id}")))
        })
        .collect()
}

/// Probes of the memorized records, per (language, PII type).
pub fn probe_sets(corpus: &Corpus, split: &CorpusSplit) -> Result<PromptSets> {
    let records: Vec<PiiRecord> = memorized(corpus, split)?.into_iter().cloned().collect();
    let mut out = BTreeMap::new();
    for l in &corpus.languages {
        for pii in PiiType::ALL {
            let ps = render_prompts(&records, &corpus.bank, l, pii, &corpus.tokenizer)?;
            out.insert((l.clone(), pii), ps);
        }
    }
    Ok(out)
}

/// Same probes with names deranged across records.
pub fn shuffled_sets(corpus: &Corpus, split: &CorpusSplit, seed: u64) -> Result<PromptSets> {
    let records: Vec<PiiRecord> = memorized(corpus, split)?.into_iter().cloned().collect();
    let mut out = BTreeMap::new();
    if records.len() < 2 {
        return Ok(out);
    }
    for l in &corpus.languages {
        for pii in PiiType::ALL {
            let ps = render_shuffled_prompts(&records, &corpus.bank, l, pii, &corpus.tokenizer, seed)?;
            out.insert((l.clone(), pii), ps);
        }
    }
    Ok(out)
}

/// Per-prompt MRR rows for one model and method label.
pub fn mrr_rows<T: Scalar>(model: &TransformerModel<T>, sets: &PromptSets, method: &str) -> Result<Vec<MrrRow>> {
    let hook = InterventionSpec::new();
    let mut rows = Vec::new();
    for ((lang, pii), ps) in sets {
        for (p, mrr) in ps.iter().zip(prompt_mrrs(model, ps, &hook)?) {
            rows.push(MrrRow {
                record_id: p.record_id,
                language: lang.clone(),
                pii_type: *pii,
                method: method.to_string(),
                mrr,
            });
        }
    }
    Ok(rows)
}

/// Mean MRR over rows matching a method and language, optionally one type.
pub fn mean_mrr(rows: &[MrrRow], method: &str, language: &str, pii: Option<PiiType>) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.language == language && pii.is_none_or(|p| p == r.pii_type))
        .map(|r| r.mrr)
        .collect();
    mean(&v)
}

/// Leakage summary of one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageSummary {
    pub language: String,
    pub pii_type: Option<PiiType>,
    pub pretrained: f64,
    pub finetuned: f64,
    pub shuffled: f64,
}

pub fn leakage_summary(rows: &[MrrRow], languages: &[String]) -> Vec<LeakageSummary> {
    let mut out = Vec::new();
    for l in languages {
        for pii in std::iter::once(None).chain(PiiType::ALL.map(Some)) {
            out.push(LeakageSummary {
                language: l.clone(),
                pii_type: pii,
                pretrained: mean_mrr(rows, "pretrained", l, pii),
                finetuned: mean_mrr(rows, "finetuned", l, pii),
                shuffled: mean_mrr(rows, "shuffled", l, pii),
            });
        }
    }
    out
}

fn all_prompts(sets: &PromptSets) -> impl Iterator<Item = &Prompt> {
    sets.values().flatten()
}

/// High-risk selection and layer traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensResult {
    pub groups: Vec<HighRiskSet>,
    /// Mean trace per group label; empty groups are skipped.
    pub group_traces: BTreeMap<String, Vec<f64>>,
    /// Mean trace over all probes of each language.
    pub language_traces: BTreeMap<String, Vec<f64>>,
}

pub fn lens_stage<T: Scalar>(
    cfg: &PipelineConfig,
    model: &TransformerModel<T>,
    sets: &PromptSets,
    finetuned_rows: &[MrrRow],
) -> Result<LensResult> {
    let hook = InterventionSpec::new();
    let table: Vec<(PromptKey, f64)> = finetuned_rows
        .iter()
        .map(|r| {
            (
                PromptKey {
                    record_id: r.record_id,
                    language: r.language.clone(),
                    pii_type: r.pii_type,
                },
                r.mrr,
            )
        })
        .collect();
    let by_key: BTreeMap<PromptKey, &Prompt> = all_prompts(sets).map(|p| (PromptKey::of(p), p)).collect();
    let mut traces = BTreeMap::new();
    for p in all_prompts(sets) {
        traces.insert(PromptKey::of(p), model.layer_trace(p, &hook)?);
    }
    let a = cfg.language().to_string();
    let mut groups = Vec::new();
    let mut group_traces = BTreeMap::new();
    for g in [RiskGroup::All, RiskGroup::In(a.clone()), RiskGroup::NotIn(a.clone())] {
        let set = select_high_risk(&table, cfg.analysis.high_risk_fraction, g)?;
        let ts: Vec<_> = set
            .selected
            .iter()
            .filter(|k| by_key.contains_key(k))
            .map(|k| traces[k].clone())
            .collect();
        if !ts.is_empty() {
            group_traces.insert(set.group.label(), mean_trace(&ts)?);
        }
        groups.push(set);
    }
    let mut language_traces = BTreeMap::new();
    for l in &cfg.corpus.languages {
        let ts: Vec<_> = traces.iter().filter(|(k, _)| &k.language == l).map(|(_, t)| t.clone()).collect();
        if !ts.is_empty() {
            language_traces.insert(l.clone(), mean_trace(&ts)?);
        }
    }
    Ok(LensResult {
        groups,
        group_traces,
        language_traces,
    })
}

impl LensResult {
    pub fn rows(&self) -> Vec<TraceRow> {
        let mut rows = Vec::new();
        for (g, t) in &self.group_traces {
            rows.extend(TraceRow::series(t.iter().map(|&v| Some(v)), "high-risk", g, "mrr"));
        }
        for (l, t) in &self.language_traces {
            rows.extend(TraceRow::series(t.iter().map(|&v| Some(v)), l, "all", "mrr"));
        }
        rows
    }
}

/// Cross-language similarity over the records and PII types of the
/// high-risk instances, for every language pair.
pub fn similarity_stage<T: Scalar>(
    model: &TransformerModel<T>,
    sets: &PromptSets,
    high_risk: &HighRiskSet,
    languages: &[String],
) -> Result<Vec<SimilarityTrace>> {
    let hook = InterventionSpec::new();
    let instances: BTreeSet<(u32, PiiType)> =
        high_risk.selected.iter().map(|k| (k.record_id, k.pii_type)).collect();
    let find = |l: &String, id: u32, pii: PiiType| {
        sets.get(&(l.clone(), pii))
            .and_then(|ps| ps.iter().find(|p| p.record_id == id))
    };
    let mut out = Vec::new();
    for (i, a) in languages.iter().enumerate() {
        for b in &languages[i + 1..] {
            let pairs: Vec<(&Prompt, &Prompt)> = instances
                .iter()
                .filter_map(|&(id, pii)| Some((find(a, id, pii)?, find(b, id, pii)?)))
                .collect();
            if !pairs.is_empty() {
                out.push(similarity_trace(model, &pairs, &hook)?);
            }
        }
    }
    Ok(out)
}

pub fn similarity_rows(traces: &[SimilarityTrace]) -> Vec<TraceRow> {
    traces
        .iter()
        .flat_map(|t| {
            TraceRow::series(
                t.values.iter().copied(),
                &format!("{}-{}", t.pair.0, t.pair.1),
                "high-risk",
                "cosine",
            )
        })
        .collect()
}

/// Training-text probes for the memorized records: the fine-tune narrative
/// up to each PII value as `X`, the value as `Y`.
pub fn training_text_prompts(corpus: &Corpus, split: &CorpusSplit, language: &str) -> Result<Vec<Prompt>> {
    let tok = &corpus.tokenizer;
    let mut out = Vec::new();
    for r in memorized(corpus, split)? {
        let text = r
            .text(language)
            .ok_or_else(|| Error::UnknownLanguage(format!("record {} lacks `{language}`", r.record_id)))?;
        for pii in PiiType::ALL {
            let value = r.value(pii, language).unwrap_or_default();
            let Some(at) = text.find(value) else {
                return Err(Error::Corpus(format!("{value:?} not found in record {}", r.record_id)));
            };
            if at == 0 {
                continue;
            }
            out.push(Prompt {
                record_id: r.record_id,
                language: language.to_string(),
                pii_type: pii,
                q: tok.encode_strict(&text[..at])?,
                e: tok.encode_strict(value)?,
            });
        }
    }
    Ok(out)
}

pub fn attribute_all<T: Scalar>(model: &TransformerModel<T>, prompts: &[Prompt], m: usize) -> Result<Vec<AttributionMap>> {
    prompts.iter().map(|p| model.attribute(p, m)).collect()
}

/// Attribution maps per selection label: one per probe language plus the
/// training-text reference.
pub fn attribute_stage<T: Scalar>(
    cfg: &PipelineConfig,
    model: &TransformerModel<T>,
    corpus: &Corpus,
    split: &CorpusSplit,
    sets: &PromptSets,
) -> Result<BTreeMap<String, Vec<AttributionMap>>> {
    let m = cfg.selection.m;
    let mut out = BTreeMap::new();
    for l in &corpus.languages {
        let prompts: Vec<Prompt> = sets
            .iter()
            .filter(|((lang, _), _)| lang == l)
            .flat_map(|(_, ps)| ps.iter().cloned())
            .collect();
        info!("attributing {} `{l}` probes", prompts.len());
        out.insert(l.clone(), attribute_all(model, &prompts, m)?);
    }
    let reference = training_text_prompts(corpus, split, cfg.language())?;
    info!("attributing {} training-text probes", reference.len());
    out.insert(REFERENCE.to_string(), attribute_all(model, &reference, m)?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub per_language: BTreeMap<String, LanguageSelection>,
    pub reference: LanguageSelection,
    pub sets: NeuronSets,
}

pub fn select_stage(cfg: &PipelineConfig, maps: &BTreeMap<String, Vec<AttributionMap>>) -> Result<Selection> {
    let mut per_language = BTreeMap::new();
    for l in &cfg.corpus.languages {
        let m = maps
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("no attributions for `{l}`")))?;
        per_language.insert(l.clone(), select_privacy_neurons(l, m, &cfg.selection)?);
    }
    let reference_maps = maps
        .get(REFERENCE)
        .ok_or_else(|| Error::InvalidArgument("no reference attributions".into()))?;
    let reference = select_privacy_neurons(REFERENCE, reference_maps, &cfg.selection)?;
    let sets = partition(
        &per_language
            .iter()
            .map(|(l, s)| (l.clone(), s.selected.clone()))
            .collect(),
    )?;
    Ok(Selection {
        per_language,
        reference,
        sets,
    })
}

/// Strategies with their random seeds tied to the global seed.
pub fn seeded_strategies(cfg: &PipelineConfig) -> Vec<Strategy> {
    cfg.intervene
        .strategies
        .iter()
        .map(|s| match s {
            Strategy::Random { budget, seed } => Strategy::Random {
                budget: *budget,
                seed: derive_seed(cfg.seed, &format!("random-{seed}")),
            },
            other => other.clone(),
        })
        .collect()
}

/// Layer-trace conditions: original and three partial deactivations.
pub const TRACE_CONDITIONS: [(&str, Strategy); 4] = [
    ("original", Strategy::None),
    ("universal", Strategy::Universal),
    ("own_specific", Strategy::OwnSpecific),
    ("other_specific", Strategy::OtherSpecific),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterveneResult {
    pub report: EvalReport,
    pub condition_traces: Vec<TraceRow>,
    /// Strategy label as written in the config, per evaluated label.
    pub labels: BTreeMap<String, String>,
}

pub fn intervene_stage<T: Scalar>(
    cfg: &PipelineConfig,
    model: &TransformerModel<T>,
    sets: &PromptSets,
    valid: &[Vec<u32>],
    selection: &Selection,
) -> Result<InterveneResult> {
    let means = mean_activations(model, valid)?;
    let reference: BTreeSet<NeuronRef> = selection.reference.selected.clone();
    let inputs = EditInputs {
        sets: &selection.sets,
        selections: &selection.per_language,
        reference: &reference,
        mean_activations: Some(&means),
    };
    let strategies = seeded_strategies(cfg);
    let mut report = evaluate(model, &strategies, sets, valid, &inputs)?;
    let mut labels = BTreeMap::new();
    for (cfg_s, s) in cfg.intervene.strategies.iter().zip(&strategies) {
        labels.insert(s.label(), cfg_s.label());
    }
    for cell in &mut report.mrr {
        cell.strategy = labels[&cell.strategy].clone();
    }
    for cell in &mut report.ppl {
        cell.strategy = labels[&cell.strategy].clone();
    }

    let mut condition_traces = Vec::new();
    for l in &cfg.corpus.languages {
        let prompts: Vec<&Prompt> = sets
            .iter()
            .filter(|((lang, _), _)| lang == l)
            .flat_map(|(_, ps)| ps.iter())
            .collect();
        for (name, strategy) in &TRACE_CONDITIONS {
            let spec = make_spec(strategy, l, &inputs, model.config())?;
            let traces = prompts
                .iter()
                .map(|p| model.layer_trace(p, &spec))
                .collect::<Result<Vec<_>>>()?;
            let t = mean_trace(&traces)?;
            condition_traces.extend(TraceRow::series(t.into_iter().map(Some), l, name, "mrr"));
        }
    }
    Ok(InterveneResult {
        report,
        condition_traces,
        labels,
    })
}
