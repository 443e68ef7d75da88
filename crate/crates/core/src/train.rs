//! Next-token training: multilingual pretraining and single-language
//! memorization fine-tuning with AdamW.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusSplit, PiiRecord, PiiType, Tokenizer};
use crate::error::{Error, Result};
use crate::nn::{log_softmax, InterventionSpec, Matrix, TransformerModel, Weights};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Language of the memorization fine-tune.
    pub language: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            language: "en".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("eps must be positive, weight_decay and grad_clip non-negative");
        }
        Ok(())
    }
}

/// Mean next-token loss (nats per token) for one epoch and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    pub fn losses(&self, split: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.loss)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// AdamW moments for every parameter tensor, in `Weights::tensors` order.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Weights<T>,
    v: Weights<T>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model: &TransformerModel<T>) -> Self {
        Self {
            m: Weights::zeros(model.config()),
            v: Weights::zeros(model.config()),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn update(&mut self, weights: &mut Weights<T>, grads: &mut Weights<T>, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::one() - T::of(cfg.beta1.powi(t));
        let c2 = T::one() - T::of(cfg.beta2.powi(t));
        let lr = T::of(cfg.learning_rate);
        let eps = T::of(cfg.eps);
        let wd = T::of(cfg.learning_rate * cfg.weight_decay);

        if cfg.grad_clip > 0.0 {
            let norm: f64 = grads
                .tensors()
                .iter()
                .flat_map(|(_, g)| g.iter())
                .map(|g| g.f64() * g.f64())
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                let s = T::of(cfg.grad_clip / norm);
                for g in grads.tensors_mut() {
                    g.data.iter_mut().for_each(|x| *x *= s);
                }
            }
        }

        let params = weights.tensors_mut();
        let gs = grads.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in params.into_iter().zip(gs).zip(ms).zip(vs) {
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(g.data.iter()).zip(m.data).zip(v.data) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                if p.decay {
                    *w -= wd * *w;
                }
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Summed next-token loss of `seq` and, when `grads` is given, its gradient
/// accumulated into `grads`.
fn sequence_loss<T: Scalar>(
    model: &TransformerModel<T>,
    seq: &[u32],
    grads: Option<&mut Weights<T>>,
) -> Result<f64> {
    if seq.len() < 2 {
        return Ok(0.0);
    }
    let hook = InterventionSpec::new();
    let cache = model.forward_cached(&seq[..seq.len() - 1], &hook, 0)?;
    let v = model.config().vocab_size;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(seq.len() - 1, v);
    for (r, &t) in seq[1..].iter().enumerate() {
        let ls = log_softmax(cache.logits.row(r));
        loss -= ls[t as usize].f64();
        let row = dlogits.row_mut(r);
        for (g, l) in row.iter_mut().zip(&ls) {
            *g = l.exp();
        }
        row[t as usize] -= T::one();
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss on a {}-token sequence",
            seq.len()
        )));
    }
    if let Some(g) = grads {
        model.backward(&cache, &dlogits, &hook, Some(g));
    }
    Ok(loss)
}

/// Mean next-token loss over `seqs` in nats per predicted token.
pub fn mean_loss<T: Scalar>(model: &TransformerModel<T>, seqs: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs {
        total += sequence_loss(model, s, None)?;
        count += s.len().saturating_sub(1);
    }
    if count == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(total / count as f64)
}

/// Summed next-token loss of one sequence and its gradient with respect to
/// every parameter.
pub fn loss_gradients<T: Scalar>(model: &TransformerModel<T>, seq: &[u32]) -> Result<(f64, Weights<T>)> {
    model.check_tokens(seq)?;
    let mut grads = Weights::zeros(model.config());
    let loss = sequence_loss(model, seq, Some(&mut grads))?;
    Ok((loss, grads))
}

/// Trains on `train` for `cfg.epochs` epochs.
///
/// Logs the loss before training as epoch 0, then the running mean training
/// loss of each epoch, and, if `valid` is non-empty, the validation loss after
/// each epoch. Sequences are visited in a seeded shuffled order; gradients are
/// accumulated serially, so a run is bit-reproducible.
pub fn train<T: Scalar>(
    model: &mut TransformerModel<T>,
    train: &[Vec<u32>],
    valid: &[Vec<u32>],
    cfg: &TrainConfig,
    split: &str,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.iter().all(|s| s.len() < 2) {
        return Err(Error::InvalidArgument("no trainable sequences".into()));
    }
    for s in train.iter().chain(valid) {
        model.check_tokens(s)?;
    }
    let mut log = TrainLog::default();
    let mut push = |epoch: usize, split: &str, loss: f64| {
        info!("epoch {epoch} {split} loss {loss:.4}");
        log.records.push(LossRecord {
            epoch,
            split: split.to_string(),
            loss,
        });
    };
    push(0, split, mean_loss(model, train)?);
    if !valid.is_empty() {
        push(0, "valid", mean_loss(model, valid)?);
    }
    if cfg.epochs == 0 {
        return Ok(log);
    }

    let mut opt = AdamW::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads = Weights::zeros(model.config());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            for g in grads.tensors_mut() {
                g.data.fill(T::zero());
            }
            let mut tokens = 0usize;
            for &i in batch {
                epoch_loss += sequence_loss(model, &train[i], Some(&mut grads))?;
                tokens += train[i].len().saturating_sub(1);
            }
            if tokens == 0 {
                continue;
            }
            epoch_tokens += tokens;
            let scale = T::of(1.0 / tokens as f64);
            for g in grads.tensors_mut() {
                g.data.iter_mut().for_each(|x| *x *= scale);
            }
            opt.update(&mut model.weights, &mut grads, cfg);
            if !model.weights.all_finite() {
                return Err(Error::NonFinite(format!(
                    "weights diverged at epoch {epoch}, step {}",
                    opt.steps()
                )));
            }
        }
        push(epoch, split, epoch_loss / epoch_tokens as f64);
        if !valid.is_empty() {
            push(epoch, "valid", mean_loss(model, valid)?);
        }
    }
    Ok(log)
}

/// Multilingual pretraining pass.
pub fn pretrain<T: Scalar>(
    model: &mut TransformerModel<T>,
    train_seqs: &[Vec<u32>],
    valid_seqs: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train(model, train_seqs, valid_seqs, cfg, "pretrain")
}

/// Memorization fine-tune on one language's narratives.
pub fn finetune_memorize<T: Scalar>(
    model: &mut TransformerModel<T>,
    texts: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train(model, texts, &[], cfg, "finetune")
}

/// Token sequences for each training stage, derived from a corpus split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSets {
    /// Pretraining records: narratives in every language, QA lines and
    /// parallel narrative pairs.
    pub pretrain: Vec<Vec<u32>>,
    /// Memorized records: narratives and QA lines in the fine-tune language.
    pub finetune: Vec<Vec<u32>>,
    /// Held-out records: narratives in every language.
    pub valid: Vec<Vec<u32>>,
}

impl TrainingSets {
    pub fn build(corpus: &Corpus, split: &CorpusSplit, language: &str) -> Result<Self> {
        corpus.bank.language(language)?;
        if !corpus.languages.iter().any(|l| l == language) {
            return Err(Error::UnknownLanguage(format!(
                "`{language}` is not a corpus language"
            )));
        }
        let tok = &corpus.tokenizer;
        let records = |ids: &[u32]| -> Result<Vec<&PiiRecord>> {
            ids.iter()
                .map(|&id| {
                    corpus
                        .record(id)
                        .ok_or_else(|| Error::Corpus(format!("split names missing record {id}")))
                })
                .collect()
        };
        let langs = &corpus.languages;

        let mut pretrain = Vec::new();
        for r in records(&split.pretrain)? {
            for l in langs {
                pretrain.push(tok.encode_strict(r.text(l).unwrap_or_default())?);
                for pii in PiiType::ALL {
                    let q = corpus.bank.prompt_template(l, pii)?.render(&r.name)?;
                    let e = r.value(pii, l).unwrap_or_default();
                    pretrain.push(tok.encode_strict(&format!("{q}{e}"))?);
                }
            }
            if langs.len() > 1 {
                let shift = 1 + r.record_id as usize % (langs.len() - 1);
                for (i, a) in langs.iter().enumerate() {
                    let b = &langs[(i + shift) % langs.len()];
                    let text = format!("{}\n{}", r.texts[a], r.texts[b]);
                    pretrain.push(tok.encode_strict(&text)?);
                }
            }
        }
        let mut finetune = Vec::new();
        for r in records(&split.memorize)? {
            finetune.push(tok.encode_strict(r.text(language).unwrap_or_default())?);
            for pii in PiiType::ALL {
                let q = corpus.bank.prompt_template(language, pii)?.render(&r.name)?;
                let e = r.value(pii, language).unwrap_or_default();
                finetune.push(tok.encode_strict(&format!("{q}{e}"))?);
            }
        }
        let mut valid = Vec::new();
        for r in records(&split.valid)? {
            for l in langs {
                valid.push(tok.encode_strict(r.text(l).unwrap_or_default())?);
            }
        }
        Ok(Self {
            pretrain,
            finetune,
            valid,
        })
    }
}

/// Encodes raw texts, refusing characters outside the vocabulary.
pub fn encode_all(tokenizer: &Tokenizer, texts: &[String]) -> Result<Vec<Vec<u32>>> {
    texts.iter().map(|t| tokenizer.encode_strict(t)).collect()
}
