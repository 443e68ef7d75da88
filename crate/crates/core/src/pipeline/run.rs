//! Staged execution with content-addressed artifact directories.
//!
//! Each stage writes into `<out>/<stage>/<key>/`, where `key` hashes the
//! stage name, the configuration it reads and the keys of the stages it
//! consumes. A stage directory is complete once its `stage.json` record
//! exists; complete directories are reused after their file hashes are
//! verified and are never written again.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{PipelineConfig, Precision, Seeds};
use super::report::{build_report, Report};
use super::stages::{self, InterveneResult, LensResult, Selection};
use crate::corpus::{read_corpus_jsonl, Corpus, CorpusSplit, TemplateBank, Tokenizer};
use crate::error::{Error, Result};
use crate::lens::SimilarityTrace;
use crate::metrics::{read_csv, write_csv, MrrRow, PplRow};
use crate::neurons::{write_counts_csv, AttributionMap, NeuronSetFile};
use crate::nn::{InterventionSpec, TransformerModel};
use crate::scalar::Scalar;
use crate::train::{TrainLog, TrainingSets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenCorpus,
    Pretrain,
    Finetune,
    Eval,
    TraceLens,
    TraceSim,
    Attribute,
    Select,
    Intervene,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::GenCorpus,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Eval,
        Stage::TraceLens,
        Stage::TraceSim,
        Stage::Attribute,
        Stage::Select,
        Stage::Intervene,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::TraceLens => "trace-lens",
            Stage::TraceSim => "trace-sim",
            Stage::Attribute => "attribute",
            Stage::Select => "select",
            Stage::Intervene => "intervene",
            Stage::Report => "report",
        }
    }

    /// Stages whose artifacts this one reads.
    pub fn inputs(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            GenCorpus => &[],
            Pretrain => &[GenCorpus],
            Finetune => &[GenCorpus, Pretrain],
            Eval => &[GenCorpus, Pretrain, Finetune],
            TraceLens => &[GenCorpus, Finetune, Eval],
            TraceSim => &[GenCorpus, Finetune, TraceLens],
            Attribute => &[GenCorpus, Finetune],
            Select => &[Attribute],
            Intervene => &[GenCorpus, Finetune, Select],
            Report => &[GenCorpus, Pretrain, Finetune, Eval, TraceLens, TraceSim, Select, Intervene],
        }
    }

    /// The part of the configuration this stage reads.
    fn config_slice(self, cfg: &PipelineConfig) -> Result<serde_json::Value> {
        use serde_json::json;
        let v = match self {
            Stage::GenCorpus => {
                let templates = match &cfg.corpus.templates {
                    Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
                    None => None,
                };
                json!({ "seed": cfg.seed, "corpus": cfg.corpus, "templates": templates })
            }
            Stage::Pretrain => json!({
                "seed": cfg.seed, "precision": cfg.precision, "model": cfg.model, "pretrain": cfg.pretrain
            }),
            Stage::Finetune => json!({ "seed": cfg.seed, "finetune": cfg.finetune }),
            Stage::Eval => json!({ "seed": cfg.seed, "shuffle_seed": cfg.analysis.shuffle_seed }),
            Stage::TraceLens => json!({ "high_risk_fraction": cfg.analysis.high_risk_fraction }),
            Stage::TraceSim => json!({}),
            Stage::Attribute => json!({ "m": cfg.selection.m }),
            Stage::Select => json!({ "selection": cfg.selection, "languages": cfg.corpus.languages }),
            Stage::Intervene => json!({ "seed": cfg.seed, "strategies": cfg.intervene.strategies }),
            Stage::Report => json!({}),
        };
        Ok(v)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

/// Completion record of one stage directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    pub inputs: BTreeMap<Stage, String>,
    /// File name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

/// Index of the stages used by the latest run of an output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub seeds: Seeds,
    pub stages: BTreeMap<Stage, StageRecord>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn stable_json<T: Serialize>(value: &T) -> Result<String> {
    // Round-tripping through `Value` sorts object keys.
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Summary of what a run did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub executed: Vec<Stage>,
    pub reused: Vec<Stage>,
    pub manifest: Manifest,
}

/// Runs stages in order up to and including `until`.
pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    keys: BTreeMap<Stage, String>,
    records: BTreeMap<Stage, StageRecord>,
    executed: Vec<Stage>,
    reused: Vec<Stage>,
}

impl Pipeline {
    /// A pipeline writing under `cfg.output_dir`.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            out: cfg.output_dir.clone(),
            cfg,
            keys: BTreeMap::new(),
            records: BTreeMap::new(),
            executed: Vec::new(),
            reused: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn key(&mut self, stage: Stage) -> Result<String> {
        if let Some(k) = self.keys.get(&stage) {
            return Ok(k.clone());
        }
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update(stable_json(&stage.config_slice(&self.cfg)?)?.as_bytes());
        for &dep in stage.inputs() {
            let k = self.key(dep)?;
            h.update(dep.name().as_bytes());
            h.update(k.as_bytes());
        }
        let key = hex::encode(&h.finalize()[..8]);
        self.keys.insert(stage, key.clone());
        Ok(key)
    }

    /// Artifact directory of `stage` under the current configuration.
    pub fn stage_dir(&mut self, stage: Stage) -> Result<PathBuf> {
        let key = self.key(stage)?;
        Ok(self.out.join(stage.name()).join(key))
    }

    fn verify(&self, dir: &Path, record: &StageRecord) -> Result<()> {
        for (name, expected) in &record.files {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let found = sha256_hex(&bytes);
            if &found != expected {
                return Err(Error::StaleArtifact {
                    path,
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(())
    }

    /// Reuses a verified stage directory or runs `body` into a fresh one.
    fn stage<F>(&mut self, stage: Stage, body: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut Self, &Path) -> Result<Vec<String>>,
    {
        let dir = self.stage_dir(stage)?;
        let record_path = dir.join("stage.json");
        if record_path.exists() {
            let record: StageRecord = read_json(&record_path)?;
            if record.key != self.key(stage)? || record.stage != stage {
                return Err(Error::StaleArtifact {
                    path: record_path,
                    expected: self.key(stage)?,
                    found: record.key,
                });
            }
            self.verify(&dir, &record)?;
            info!("{stage}: reusing {}", dir.display());
            self.records.insert(stage, record);
            self.reused.push(stage);
            return Ok(dir);
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        info!("{stage}: running into {}", dir.display());
        let files = body(self, &dir).map_err(|e| Error::Stage {
            stage: stage.name().to_string(),
            message: e.to_string(),
        })?;
        let mut hashes = BTreeMap::new();
        for f in files {
            let path = dir.join(&f);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            hashes.insert(f, sha256_hex(&bytes));
        }
        let mut inputs = BTreeMap::new();
        for &dep in stage.inputs() {
            inputs.insert(dep, self.key(dep)?);
        }
        let record = StageRecord {
            stage,
            key: self.key(stage)?,
            inputs,
            files: hashes,
        };
        write_file(&record_path, stable_json(&record)?.as_bytes())?;
        self.records.insert(stage, record);
        self.executed.push(stage);
        Ok(dir)
    }

    /// Runs every stage up to `until` and writes the manifest.
    pub fn run(mut self, until: Stage) -> Result<RunOutcome> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        match self.cfg.precision {
            Precision::F32 => self.run_typed::<f32>(until)?,
            Precision::F64 => self.run_typed::<f64>(until)?,
        }
        let mut hashed = self.cfg.clone();
        hashed.output_dir = PathBuf::new();
        let manifest = Manifest {
            config_hash: sha256_hex(stable_json(&hashed)?.as_bytes()),
            seed: self.cfg.seed,
            seeds: self.cfg.seeds(),
            stages: self.records.clone(),
        };
        let path = self.out.join("manifest.json");
        write_file(&path, stable_json(&manifest)?.as_bytes())?;
        write_file(&self.out.join("config.toml"), self.cfg.to_toml().as_bytes())?;
        Ok(RunOutcome {
            executed: self.executed,
            reused: self.reused,
            manifest,
        })
    }

    fn run_typed<T: Scalar>(&mut self, until: Stage) -> Result<()> {
        for stage in Stage::ALL {
            if stage > until {
                break;
            }
            match stage {
                Stage::GenCorpus => self.stage(stage, gen_corpus)?,
                Stage::Pretrain => self.stage(stage, pretrain::<T>)?,
                Stage::Finetune => self.stage(stage, finetune::<T>)?,
                Stage::Eval => self.stage(stage, eval::<T>)?,
                Stage::TraceLens => self.stage(stage, trace_lens::<T>)?,
                Stage::TraceSim => self.stage(stage, trace_sim::<T>)?,
                Stage::Attribute => self.stage(stage, attribute::<T>)?,
                Stage::Select => self.stage(stage, select)?,
                Stage::Intervene => self.stage(stage, intervene::<T>)?,
                Stage::Report => self.stage(stage, report)?,
            };
        }
        Ok(())
    }

    // Loaders for upstream artifacts.

    pub fn load_corpus(&mut self) -> Result<(Corpus, CorpusSplit)> {
        let dir = self.stage_dir(Stage::GenCorpus)?;
        let meta: CorpusMeta = read_json(&dir.join("corpus_meta.json"))?;
        let bank_path = dir.join("templates.toml");
        let bank = TemplateBank::load(&bank_path)?;
        let tokenizer: Tokenizer = read_json(&dir.join("tokenizer.json"))?;
        let records = read_corpus_jsonl(&dir.join("corpus.jsonl"))?;
        let split: CorpusSplit = read_json(&dir.join("split.json"))?;
        Ok((
            Corpus {
                seed: meta.seed,
                languages: meta.languages,
                records,
                tokenizer,
                bank,
            },
            split,
        ))
    }

    pub fn load_model<T: Scalar>(&mut self, stage: Stage) -> Result<TransformerModel<T>> {
        TransformerModel::load(&self.stage_dir(stage)?.join("model.ckpt"))
    }

    pub fn load_report(&mut self) -> Result<Report> {
        read_json(&self.stage_dir(Stage::Report)?.join("report.json"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusMeta {
    seed: u64,
    languages: Vec<String>,
}

fn gen_corpus(p: &mut Pipeline, dir: &Path) -> Result<Vec<String>> {
    let (corpus, split) = stages::gen_corpus(&p.cfg)?;
    crate::corpus::write_corpus_jsonl(&dir.join("corpus.jsonl"), &corpus)?;
    write_file(&dir.join("tokenizer.json"), stable_json(&corpus.tokenizer)?.as_bytes())?;
    write_file(&dir.join("templates.toml"), corpus.bank.source_toml().as_bytes())?;
    write_file(&dir.join("split.json"), stable_json(&split)?.as_bytes())?;
    let meta = CorpusMeta {
        seed: corpus.seed,
        languages: corpus.languages.clone(),
    };
    write_file(&dir.join("corpus_meta.json"), stable_json(&meta)?.as_bytes())?;
    Ok(["corpus.jsonl", "tokenizer.json", "templates.toml", "split.json", "corpus_meta.json"]
        .map(String::from)
        .to_vec())
}

fn save_training(dir: &Path, model: &TransformerModel<impl Scalar>, log: &TrainLog) -> Result<Vec<String>> {
    model.save(&dir.join("model.ckpt"))?;
    log.write_csv(&dir.join("loss.csv"))?;
    Ok(vec!["model.ckpt".into(), "loss.csv".into()])
}

fn pretrain<T: Scalar>(p: &mut Pipeline, dir: &Path) -> Result<Vec<String>> {
    let (corpus, split) = p.load_corpus()?;
    let sets = TrainingSets::build(&corpus, &split, p.cfg.language())?;
    let mut model = stages::init_model::<T>(&p.cfg, &corpus)?;
    let log = stages::pretrain_stage(&p.cfg, &mut model, &sets)?;
    save_training(dir, &model, &log)
}

fn finetune<T: Scalar>(p: &mut Pipeline, dir: &Path) -> Result<Vec<String>> {
    let (corpus, split) = p.load_corpus()?;
    let sets = TrainingSets::build(&corpus, &split, p.cfg.language())?;
    let mut model = p.load_model::<T>(Stage::Pretrain)?;
    let log = stages::finetune_stage(&p.cfg, &mut model, &sets)?;
    save_training(dir, &model, &log)
}

fn eval<T: Scalar>(p: &mut Pipeline, dir: &Path) -> Result<Vec<String>> {
    let (corpus, split) = p.load_corpus()?;
    let sets = TrainingSets::build(&corpus, &split, p.cfg.language())?;
    let pre = p.load_model::<T>(Stage::Pretrain)?;
    let ft = p.load_model::<T>(Stage::Finetune)?;
    let probes = stages::probe_sets(&corpus, &split)?;
    let shuffled = stages::shuffled_sets(&corpus, &split, p.cfg.seeds().shuffle)?;
    let mut rows = stages::mrr_rows(&pre, &probes, "pretrained")?;
    rows.extend(stages::mrr_rows(&ft, &probes, "finetuned")?);
    rows.extend(stages::mrr_rows(&ft, &shuffled, "shuffled")?);
    write_csv(&dir.join("mrr.csv"), &rows)?;
    let hook = InterventionSpec::new();
    let ppl = vec![
        PplRow {
            split: "valid".into(),
            method: "pretrained".into(),
            valid_ppl: pre.valid_ppl(&sets.valid, &hook)?.value,
        },
        PplRow {
            split: "valid".into(),
            method: "finetuned".into(),
            valid_ppl: ft.valid_ppl(&sets.valid, &hook)?.value,
        },
    ];
    write_csv(&dir.join("ppl.csv"), &ppl)?;
    Ok(vec!["mrr.csv".into(), "ppl.csv".into()])
}

fn finetuned_rows(p: &mut Pipeline) -> Result<Vec<MrrRow>> {
    let rows: Vec<MrrRow> = read_csv(&p.stage_dir(Stage::Eval)?.join("mrr.csv"))?;
    Ok(rows.into_iter().filter(|r| r.method == "finetuned").collect())
}

fn trace_lens<T: Scalar>(p: &mut Pipeline, dir: &Path) -> Result<Vec<String>> {
    let (corpus, split) = p.load_corpus()?;
    let model = p.load_model::<T>(Stage::Finetune)?;
    let probes = stages::probe_sets(&corpus, &split)?;
    let rows = finetuned_rows(p)?;
    let lens = stages::lens_stage(&p.cfg, &model, &probes, &rows)?;
    write_file(&dir.join("lens.json"), stable_json(&lens)?.as_bytes())?;
    write_csv(&dir.join("lens_traces.csv"), &lens.rows())?;
    Ok(vec!["lens.json".into(), "lens_traces.csv".into()])
}

fn trace_sim<T: Scalar>(p: &mut Pipeline, dir: &Path) -> Result<Vec<String>> {
    let (corpus, split) = p.load_corpus()?;
    let model = p.load_model::<T>(Stage::Finetune)?;
    let probes = stages::probe_sets(&corpus, &split)?;
    let lens: LensResult = read_json(&p.stage_dir(Stage::TraceLens)?.join("lens.json"))?;
    let all = lens
        .groups
        .first()
        .ok_or_else(|| Error::InvalidArgument("lens result without groups".into()))?;
    let sim = stages::similarity_stage(&model, &probes, all, &corpus.languages)?;
    write_file(&dir.join("similarity.json"), stable_json(&sim)?.as_bytes())?;
    write_csv(&dir.join("similarity.csv"), &stages::similarity_rows(&sim))?;
    Ok(vec!["similarity.json".into(), "similarity.csv".into()])
}

fn attribute<T: Scalar>(p: &mut Pipeline, dir: &Path) -> Result<Vec<String>> {
    let (corpus, split) = p.load_corpus()?;
    let model = p.load_model::<T>(Stage::Finetune)?;
    let probes = stages::probe_sets(&corpus, &split)?;
    let maps = stages::attribute_stage(&p.cfg, &model, &corpus, &split, &probes)?;
    write_file(&dir.join("attributions.json"), serde_json::to_string(&maps)?.as_bytes())?;
    Ok(vec!["attributions.json".into()])
}

fn select(p: &mut Pipeline, dir: &Path) -> Result<Vec<String>> {
    let maps: BTreeMap<String, Vec<AttributionMap>> =
        read_json(&p.stage_dir(Stage::Attribute)?.join("attributions.json"))?;
    let sel = stages::select_stage(&p.cfg, &maps)?;
    let model_id = format!("finetune-{}", p.key(Stage::Finetune)?);
    let file = NeuronSetFile::new(&model_id, &p.cfg.selection, &sel.sets);
    write_file(&dir.join("neurons.json"), stable_json(&file)?.as_bytes())?;
    write_file(&dir.join("selection.json"), stable_json(&sel)?.as_bytes())?;
    write_counts_csv(&dir.join("neuron_counts.csv"), &sel.sets)?;
    Ok(vec!["neurons.json".into(), "selection.json".into(), "neuron_counts.csv".into()])
}

fn intervene<T: Scalar>(p: &mut Pipeline, dir: &Path) -> Result<Vec<String>> {
    let (corpus, split) = p.load_corpus()?;
    let sets = TrainingSets::build(&corpus, &split, p.cfg.language())?;
    let model = p.load_model::<T>(Stage::Finetune)?;
    let probes = stages::probe_sets(&corpus, &split)?;
    let sel: Selection = read_json(&p.stage_dir(Stage::Select)?.join("selection.json"))?;
    let res = stages::intervene_stage(&p.cfg, &model, &probes, &sets.valid, &sel)?;
    write_file(&dir.join("intervene.json"), stable_json(&res)?.as_bytes())?;
    res.report
        .write_csv(&dir.join("eval_mrr.csv"), &dir.join("eval_ppl.csv"))?;
    write_csv(&dir.join("condition_traces.csv"), &res.condition_traces)?;
    Ok(vec![
        "intervene.json".into(),
        "eval_mrr.csv".into(),
        "eval_ppl.csv".into(),
        "condition_traces.csv".into(),
    ])
}

fn report(p: &mut Pipeline, dir: &Path) -> Result<Vec<String>> {
    let (corpus, split) = p.load_corpus()?;
    let rows: Vec<MrrRow> = read_csv(&p.stage_dir(Stage::Eval)?.join("mrr.csv"))?;
    let ppl: Vec<PplRow> = read_csv(&p.stage_dir(Stage::Eval)?.join("ppl.csv"))?;
    let pretrain_log = TrainLog::read_csv(&p.stage_dir(Stage::Pretrain)?.join("loss.csv"))?;
    let finetune_log = TrainLog::read_csv(&p.stage_dir(Stage::Finetune)?.join("loss.csv"))?;
    let lens: LensResult = read_json(&p.stage_dir(Stage::TraceLens)?.join("lens.json"))?;
    let sim: Vec<SimilarityTrace> = read_json(&p.stage_dir(Stage::TraceSim)?.join("similarity.json"))?;
    let sel: Selection = read_json(&p.stage_dir(Stage::Select)?.join("selection.json"))?;
    let inter: InterveneResult = read_json(&p.stage_dir(Stage::Intervene)?.join("intervene.json"))?;
    let mut artifacts = BTreeMap::new();
    for &s in Stage::Report.inputs() {
        artifacts.insert(s, p.key(s)?);
    }
    let model_cfg = p.cfg.model.resolve(corpus.tokenizer.vocab_size(), p.cfg.seeds().model);
    let r = build_report(
        &p.cfg,
        &model_cfg,
        &corpus,
        &split,
        &rows,
        &ppl,
        [&pretrain_log, &finetune_log],
        &lens,
        &sim,
        &sel,
        &inter,
        artifacts,
    );
    write_file(&dir.join("report.json"), stable_json(&r)?.as_bytes())?;
    Ok(vec!["report.json".into()])
}
