//! Training loops: conditioned model, unconditioned baseline, and dedicated
//! sub-models trained on filtered subsets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bpe::BpeModel;
use crate::corpus::AnnotatedSentence;
use crate::model::{
    adam_step, clip_global_norm, AdamConfig, AdamState, Checkpoint, CheckpointError, Example, LanguageModel,
    ModelConfig, ModelError,
};
use crate::schema::{ParameterSchema, SchemaError, StyleAssignment};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("BPE vocabulary has {bpe} units but model config says {model}")]
    VocabMismatch { bpe: usize, model: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub init_scale: f64,
    /// When set, `best.ckpt`, `last.ckpt`, `manifest.json` and `trace.csv`
    /// are written here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 10,
            seed: 0,
            adam: AdamConfig::default(),
            clip_norm: None,
            init_scale: 0.08,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub split: Split,
    pub perplexity: f64,
}

/// CSV rendering with header `epoch,split,perplexity`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("epoch,split,perplexity\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.split.as_str(), r.perplexity);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub corpus_sha256: String,
    pub best_epoch: usize,
    pub best_dev_perplexity: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    /// 1-based epoch of `best`.
    pub best_epoch: usize,
    pub best_dev_perplexity: Option<f64>,
    /// One train row per epoch, plus one dev row when a dev set was given.
    pub trace: Vec<TraceRow>,
    pub manifest: TrainManifest,
}

impl TrainOutcome {
    pub fn dev_trace(&self) -> Vec<f64> {
        self.trace.iter().filter(|r| r.split == Split::Dev).map(|r| r.perplexity).collect()
    }
}

/// Hex SHA-256 over the sentences' tokens and labels, in order.
pub fn corpus_digest(corpus: &[AnnotatedSentence]) -> String {
    let mut h = Sha256::new();
    for s in corpus {
        for t in &s.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        h.update(s.labels.to_string().as_bytes());
        h.update([2u8]);
    }
    hex::encode(h.finalize())
}

pub fn encode_examples<F: crate::model::Real>(
    model: &LanguageModel<F>,
    bpe: &BpeModel,
    corpus: &[AnnotatedSentence],
) -> Result<Vec<Example>, ModelError> {
    corpus.iter().map(|s| model.example(bpe.encode(&s.tokens), &s.labels)).collect()
}

/// Token-level perplexity over pre-encoded examples (EOS counted), evaluated
/// in length-sorted batches. `None` for an empty set.
pub fn examples_perplexity<F: crate::model::Real>(model: &LanguageModel<F>, examples: &[Example]) -> Option<f64> {
    if examples.is_empty() {
        return None;
    }
    let mut order: Vec<&Example> = examples.iter().collect();
    order.sort_by_key(|e| e.ids.len());
    let (mut nll, mut tokens) = (0.0, 0usize);
    for chunk in order.chunks(64) {
        for (l, n) in model.nll_batch(chunk) {
            nll += l;
            tokens += n;
        }
    }
    Some((nll / tokens as f64).exp())
}

/// Epoch order: shuffle, sort by length inside pools of 50 batches, cut into
/// batches, then shuffle the batch order.
fn epoch_batches(examples: &[Example], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(rng);
    let mut batches = Vec::new();
    for pool in idx.chunks_mut(batch_size * 50) {
        pool.sort_by_key(|&i| examples[i].ids.len());
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Train a model of shape `model_cfg` (conditioned or not, per its flag) for
/// exactly `cfg.epochs` passes, keeping the epoch with the lowest dev
/// perplexity. Without dev sentences the last epoch is kept.
pub fn train(
    train_set: &[AnnotatedSentence],
    dev_set: &[AnnotatedSentence],
    bpe: &BpeModel,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if bpe.vocab_size() != model_cfg.vocab_size {
        return Err(TrainError::VocabMismatch { bpe: bpe.vocab_size(), model: model_cfg.vocab_size });
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = LanguageModel::<f32>::new(
        model_cfg.clone(),
        crate::model::Weights::random(model_cfg, cfg.init_scale, &mut init_rng),
    );
    let train_ex = encode_examples(&model, bpe, train_set)?;
    let dev_ex = encode_examples(&model, bpe, dev_set)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut state = AdamState::new(model_cfg);
    let mut trace = Vec::new();
    let mut best: Option<(usize, Option<f64>, LanguageModel<f32>)> = None;
    let mut manifest = TrainManifest {
        model: model_cfg.clone(),
        train: cfg.clone(),
        seed: cfg.seed,
        train_sentences: train_set.len(),
        dev_sentences: dev_set.len(),
        corpus_sha256: corpus_digest(train_set),
        best_epoch: 0,
        best_dev_perplexity: None,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in 1..=cfg.epochs {
        let (mut nll, mut tokens) = (0.0, 0usize);
        for (bi, batch_idx) in epoch_batches(&train_ex, cfg.batch_size, &mut shuffle_rng).iter().enumerate() {
            let batch: Vec<&Example> = batch_idx.iter().map(|&i| &train_ex[i]).collect();
            let (loss, mut grads) = model.loss_and_grad(&batch);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi, loss });
            }
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            adam_step(&mut model.weights, &grads, &mut state, &cfg.adam)?;
            nll += loss * batch.len() as f64;
            tokens += batch.iter().map(|e| e.ids.len() + 1).sum::<usize>();
        }
        trace.push(TraceRow { epoch, split: Split::Train, perplexity: (nll / tokens as f64).exp() });

        let dev_ppl = examples_perplexity(&model, &dev_ex);
        if let Some(p) = dev_ppl {
            if !p.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: usize::MAX, loss: p });
            }
            trace.push(TraceRow { epoch, split: Split::Dev, perplexity: p });
        }
        let improved = match (&best, dev_ppl) {
            (None, _) => true,
            (Some((_, Some(b), _)), Some(p)) => p < *b,
            (Some(_), None) => true,
            (Some((_, None, _)), Some(_)) => true,
        };
        if improved {
            best = Some((epoch, dev_ppl, model.clone()));
        }
        let (best_epoch, best_ppl, _) = best.as_ref().expect("set on first epoch");
        manifest.best_epoch = *best_epoch;
        manifest.best_dev_perplexity = *best_ppl;

        if let Some(dir) = &cfg.checkpoint_dir {
            Checkpoint::new(model.clone(), bpe.clone()).save(&dir.join("last.ckpt"))?;
            if improved {
                Checkpoint::new(model.clone(), bpe.clone()).save(&dir.join("best.ckpt"))?;
            }
            write_run_files(dir, &manifest, &trace)?;
        }
    }

    let (best_epoch, best_dev_perplexity, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: Checkpoint::new(best_model, bpe.clone()),
        last: Checkpoint::new(model, bpe.clone()),
        best_epoch,
        best_dev_perplexity,
        trace,
        manifest,
    })
}

fn write_run_files(dir: &Path, manifest: &TrainManifest, trace: &[TraceRow]) -> Result<(), TrainError> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), json)?;
    std::fs::write(dir.join("trace.csv"), trace_csv(trace))?;
    Ok(())
}

/// Partial assignment selecting the sentences whose labels agree on every entry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubsetFilter(pub StyleAssignment);

impl SubsetFilter {
    pub fn new(entries: StyleAssignment, schema: &ParameterSchema) -> Result<Self, SchemaError> {
        schema.validate_partial(&entries)?;
        Ok(SubsetFilter(entries))
    }

    pub fn parse(s: &str, schema: &ParameterSchema) -> Result<Self, SchemaError> {
        if s.trim().is_empty() {
            return Ok(SubsetFilter::default());
        }
        Self::new(StyleAssignment::parse(s)?, schema)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn matches(&self, s: &AnnotatedSentence) -> bool {
        s.labels.matches(&self.0)
    }

    /// Combined filter; `None` when the two disagree on a parameter.
    pub fn and(&self, other: &SubsetFilter) -> Option<SubsetFilter> {
        let mut out = self.0.clone();
        for (k, v) in other.0.iter() {
            match out.get(k) {
                Some(existing) if existing != v => return None,
                _ => out.set(k, v),
            }
        }
        Some(SubsetFilter(out))
    }
}

pub fn filter(corpus: &[AnnotatedSentence], f: &SubsetFilter) -> Vec<AnnotatedSentence> {
    corpus.iter().filter(|s| f.matches(s)).cloned().collect()
}

/// One point of a dedicated-model chain.
#[derive(Debug, Clone)]
pub struct ChainStep {
    pub filter: SubsetFilter,
    pub train_size: usize,
    pub dev_size: usize,
    /// Perplexity of the dedicated model on the matching dev subset.
    pub dev_perplexity: Option<f64>,
    /// `None` for a degenerate step with no training sentences.
    pub model: Option<Checkpoint>,
}

impl ChainStep {
    pub fn is_degenerate(&self) -> bool {
        self.model.is_none()
    }
}

/// Train unconditioned sub-model `i` on the sentences matching the first
/// `i + 1` chain entries and score it on the dev sentences matching the same
/// filter.
pub fn train_dedicated_chain(
    train_set: &[AnnotatedSentence],
    dev_set: &[AnnotatedSentence],
    bpe: &BpeModel,
    model_cfg: &ModelConfig,
    chain: &[(String, String)],
    cfg: &TrainConfig,
) -> Result<Vec<ChainStep>, TrainError> {
    let schema = &model_cfg.schema;
    let mut entries = StyleAssignment::new();
    let mut steps = Vec::with_capacity(chain.len());
    let uncond = model_cfg.clone().unconditioned();
    for (i, (param, value)) in chain.iter().enumerate() {
        entries.set(param, value);
        let f = SubsetFilter::new(entries.clone(), schema)?;
        let sub_train = filter(train_set, &f);
        let sub_dev = filter(dev_set, &f);
        let mut step_cfg = cfg.clone();
        step_cfg.checkpoint_dir = cfg.checkpoint_dir.as_ref().map(|d| d.join(format!("step{}", i + 1)));
        let (model, dev_perplexity) = if sub_train.is_empty() {
            (None, None)
        } else {
            let out = train(&sub_train, &sub_dev, bpe, &uncond, &step_cfg)?;
            let ppl = out.best_dev_perplexity;
            (Some(out.best), ppl)
        };
        steps.push(ChainStep { filter: f, train_size: sub_train.len(), dev_size: sub_dev.len(), dev_perplexity, model });
    }
    Ok(steps)
}
