//! Quantitative evaluations: perplexity comparisons, flipped conditioning,
//! compliance of generated text with requested properties, and the held-out
//! combination experiment.

mod runner;
mod synth;

pub use runner::{run_experiments, CorpusSource, Dims, Experiment, ExperimentManifest, ExperimentResults, ExperimentRun};
pub use synth::{split_corpus, synth_corpus, SynthSpec};

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::BpeModel;
use crate::corpus::{AnnotatedSentence, Annotators};
use crate::model::{LanguageModel, ModelConfig, ModelError, Real};
use crate::sampler::{sample_rows, GeneratedSentence, SamplerConfig, SamplerError};
use crate::schema::{ParameterSchema, SchemaError, StyleAssignment};
use crate::trainer::{
    encode_examples, examples_perplexity, filter, train, ChainStep, SubsetFilter, TrainConfig, TrainError,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("a conditioned model cannot be evaluated without assignments")]
    NeedsAssignments,
    #[error("parameter `{0}` has no opposite-value swap")]
    NoSwap(String),
    #[error("holdout removes every training sentence with {param}={value}")]
    HoldoutCoversValue { param: String, value: String },
    #[error("inconsistent synthetic spec: {0}")]
    InconsistentSpec(String),
    #[error("parameter `{0}` is not in the schema")]
    UnknownParameter(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// Token-level perplexity `exp(Σ NLL / Σ tokens)`, EOS counted. With
/// `assignments_used = false` the model must be unconditioned.
pub fn perplexity<F: Real>(
    model: &LanguageModel<F>,
    bpe: &BpeModel,
    corpus: &[AnnotatedSentence],
    assignments_used: bool,
) -> Result<f64, EvalError> {
    if !assignments_used && model.is_conditioned() {
        return Err(EvalError::NeedsAssignments);
    }
    let examples = encode_examples(model, bpe, corpus)?;
    examples_perplexity(model, &examples).ok_or(EvalError::EmptySet)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityRow {
    pub variant: String,
    pub train_size: usize,
    pub dev: Option<f64>,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub rows: Vec<PerplexityRow>,
}

impl PerplexityReport {
    pub fn row(&self, variant: &str) -> Option<&PerplexityRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

impl fmt::Display for PerplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>10} {:>10} {:>10}", "variant", "train", "dev", "test")?;
        for r in &self.rows {
            writeln!(f, "{:<28} {:>10} {:>10} {:>10}", r.variant, r.train_size, cell(r.dev), cell(r.test))?;
        }
        Ok(())
    }
}

pub struct Comparison {
    pub report: PerplexityReport,
    pub conditioned: TrainOutcome,
    pub unconditioned: TrainOutcome,
}

/// Train conditioned and unconditioned models with identical settings and
/// report their dev and test perplexities.
pub fn compare_cond_uncond(
    train_set: &[AnnotatedSentence],
    dev: &[AnnotatedSentence],
    test: &[AnnotatedSentence],
    bpe: &BpeModel,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Comparison, EvalError> {
    let mut cond_cfg = model_cfg.clone();
    cond_cfg.conditioned = true;
    let uncond_cfg = model_cfg.clone().unconditioned();
    let sub = |name: &str| {
        let mut c = cfg.clone();
        c.checkpoint_dir = cfg.checkpoint_dir.as_ref().map(|d| d.join(name));
        c
    };
    let conditioned = train(train_set, dev, bpe, &cond_cfg, &sub("conditioned"))?;
    let unconditioned = train(train_set, dev, bpe, &uncond_cfg, &sub("unconditioned"))?;
    let mut report = PerplexityReport::default();
    for (name, out, used) in [("conditioned", &conditioned, true), ("unconditioned", &unconditioned, false)] {
        let m = &out.best.model;
        report.rows.push(PerplexityRow {
            variant: name.to_string(),
            train_size: train_set.len(),
            dev: Some(perplexity(m, bpe, dev, used)?),
            test: Some(perplexity(m, bpe, test, used)?),
        });
    }
    Ok(Comparison { report, conditioned, unconditioned })
}

/// Opposite values for `param`: `true`/`false` for binary parameters,
/// `positive`/`negative` where both exist. Other values map to themselves.
pub fn swap_map(schema: &ParameterSchema, param: &str) -> Result<BTreeMap<String, String>, EvalError> {
    let p = schema.parameter(param).ok_or_else(|| EvalError::UnknownParameter(param.to_string()))?;
    let has = |v: &str| p.values.iter().any(|x| x == v);
    let pair = if p.values.len() == 2 && has("true") && has("false") {
        ("true", "false")
    } else if has("positive") && has("negative") {
        ("positive", "negative")
    } else {
        return Err(EvalError::NoSwap(param.to_string()));
    };
    let mut map: BTreeMap<String, String> = p.values.iter().map(|v| (v.clone(), v.clone())).collect();
    map.insert(pair.0.into(), pair.1.into());
    map.insert(pair.1.into(), pair.0.into());
    Ok(map)
}

pub fn flip_labels(corpus: &[AnnotatedSentence], param: &str, map: &BTreeMap<String, String>) -> Vec<AnnotatedSentence> {
    corpus
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if let Some(v) = s.labels.get(param).and_then(|v| map.get(v)).cloned() {
                s.labels.set(param, &v);
            }
            s
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipResult {
    pub parameter: String,
    pub correct: f64,
    pub flipped: f64,
    /// Sentences whose label actually changed.
    pub changed: usize,
}

impl FlipResult {
    pub fn relative_change(&self) -> f64 {
        (self.flipped - self.correct) / self.correct
    }
}

impl fmt::Display for FlipResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>10} {:>10} {:>9}", "parameter", "correct", "flipped", "change")?;
        writeln!(
            f,
            "{:<14} {:>10.3} {:>10.3} {:>8.2}%",
            self.parameter,
            self.correct,
            self.flipped,
            100.0 * self.relative_change()
        )
    }
}

pub fn flip_eval<F: Real>(
    model: &LanguageModel<F>,
    bpe: &BpeModel,
    corpus: &[AnnotatedSentence],
    param: &str,
) -> Result<FlipResult, EvalError> {
    let map = swap_map(model.schema(), param)?;
    let flipped = flip_labels(corpus, param, &map);
    let changed = corpus.iter().zip(&flipped).filter(|(a, b)| a.labels != b.labels).count();
    Ok(FlipResult {
        parameter: param.to_string(),
        correct: perplexity(model, bpe, corpus, true)?,
        flipped: perplexity(model, bpe, &flipped, true)?,
        changed,
    })
}

/// Token bounds of a length value: `<=N`, `A-B` or `>N`; upper `None` is open.
pub fn parse_length_bin(value: &str) -> Option<(usize, Option<usize>)> {
    if let Some(n) = value.strip_prefix("<=") {
        return Some((0, Some(n.trim().parse().ok()?)));
    }
    if let Some(n) = value.strip_prefix('>') {
        return Some((n.trim().parse::<usize>().ok()? + 1, None));
    }
    let (a, b) = value.split_once('-')?;
    Some((a.trim().parse().ok()?, Some(b.trim().parse().ok()?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBinStats {
    pub bin: String,
    pub count: usize,
    pub avg: f64,
    pub min: usize,
    pub max: usize,
    /// Percent of sentences more than `margin` tokens outside the bin.
    pub deviation_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compliance {
    pub value: String,
    pub count: usize,
    pub pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub requested: String,
    pub count: usize,
    /// Percent realized as each of `ConfusionMatrix::columns`.
    pub pct: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<ConfusionRow>,
}

impl ConfusionMatrix {
    pub fn diagonal(&self, value: &str) -> Option<f64> {
        let col = self.columns.iter().position(|c| c == value)?;
        self.rows.iter().find(|r| r.requested == value).map(|r| r.pct[col])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub sentences: usize,
    pub margin: usize,
    pub length: Vec<LengthBinStats>,
    pub descriptive: Vec<Compliance>,
    pub personal: Vec<Compliance>,
    pub theme: Option<ConfusionMatrix>,
}

fn find(v: &[Compliance], value: &str) -> Option<f64> {
    v.iter().find(|c| c.value == value).map(|c| c.pct)
}

impl PropertyReport {
    pub fn personal_pct(&self, value: &str) -> Option<f64> {
        find(&self.personal, value)
    }

    pub fn descriptive_pct(&self, value: &str) -> Option<f64> {
        find(&self.descriptive, value)
    }

    pub fn length_bin(&self, bin: &str) -> Option<&LengthBinStats> {
        self.length.iter().find(|b| b.bin == bin)
    }
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} generated sentences", self.sentences)?;
        if !self.length.is_empty() {
            writeln!(f, "\n{:<8} {:>6} {:>7} {:>5} {:>5} {:>10}", "length", "n", "avg", "min", "max",
                format!("dev(m={})", self.margin))?;
            for b in &self.length {
                writeln!(f, "{:<8} {:>6} {:>7.2} {:>5} {:>5} {:>9.2}%", b.bin, b.count, b.avg, b.min, b.max, b.deviation_pct)?;
            }
        }
        for (name, rows) in [("descriptive", &self.descriptive), ("personal", &self.personal)] {
            if !rows.is_empty() {
                writeln!(f, "\n{name:<12} {:>6} {:>10}", "n", "compliant")?;
                for c in rows {
                    writeln!(f, "{:<12} {:>6} {:>9.2}%", c.value, c.count, c.pct)?;
                }
            }
        }
        if let Some(m) = &self.theme {
            write!(f, "\n{:<12}", "theme")?;
            for c in &m.columns {
                write!(f, " {c:>10}")?;
            }
            writeln!(f)?;
            for r in &m.rows {
                write!(f, "{:<12}", r.requested)?;
                for p in &r.pct {
                    write!(f, " {:>9.1}%", p)?;
                }
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

fn pct(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

fn compliance_rows(
    generated: &[GeneratedSentence],
    schema: &ParameterSchema,
    param: &str,
    ann: &Annotators,
) -> Vec<Compliance> {
    let Some(p) = schema.parameter(param) else { return Vec::new() };
    p.values
        .iter()
        .filter_map(|v| {
            let req: Vec<&GeneratedSentence> =
                generated.iter().filter(|g| g.assignment.get(param) == Some(v.as_str())).collect();
            if req.is_empty() {
                return None;
            }
            let ok = req.iter().filter(|g| ann.realized(param, &g.tokens).as_deref() == Some(v.as_str())).count();
            Some(Compliance { value: v.clone(), count: req.len(), pct: pct(ok, req.len()) })
        })
        .collect()
}

/// Recompute the text-derived properties of generated sentences with the
/// corpus annotators and compare them to what was requested.
pub fn property_report(
    generated: &[GeneratedSentence],
    margin: usize,
    ann: &Annotators,
    schema: &ParameterSchema,
) -> Result<PropertyReport, EvalError> {
    if generated.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut length = Vec::new();
    if let Some(p) = schema.parameter("length") {
        for v in &p.values {
            let lens: Vec<usize> = generated
                .iter()
                .filter(|g| g.assignment.get("length") == Some(v.as_str()))
                .map(|g| g.tokens.len())
                .collect();
            let Some((lo, hi)) = parse_length_bin(v) else { continue };
            if lens.is_empty() {
                continue;
            }
            let outside = lens
                .iter()
                .filter(|&&n| n + margin < lo || hi.is_some_and(|h| n > h + margin))
                .count();
            length.push(LengthBinStats {
                bin: v.clone(),
                count: lens.len(),
                avg: lens.iter().sum::<usize>() as f64 / lens.len() as f64,
                min: *lens.iter().min().unwrap(),
                max: *lens.iter().max().unwrap(),
                deviation_pct: pct(outside, lens.len()),
            });
        }
    }
    let theme = schema.parameter("theme").map(|p| {
        let rows = p
            .values
            .iter()
            .filter_map(|v| {
                let req: Vec<&GeneratedSentence> =
                    generated.iter().filter(|g| g.assignment.get("theme") == Some(v.as_str())).collect();
                if req.is_empty() {
                    return None;
                }
                let realized: Vec<String> = req.iter().map(|g| ann.theme(&g.tokens)).collect();
                let pcts = p.values.iter().map(|c| pct(realized.iter().filter(|r| *r == c).count(), req.len())).collect();
                Some(ConfusionRow { requested: v.clone(), count: req.len(), pct: pcts })
            })
            .collect::<Vec<_>>();
        ConfusionMatrix { columns: p.values.clone(), rows }
    });
    Ok(PropertyReport {
        sentences: generated.len(),
        margin,
        length,
        descriptive: compliance_rows(generated, schema, "descriptive", ann),
        personal: compliance_rows(generated, schema, "personal", ann),
        theme: theme.filter(|m| !m.rows.is_empty()),
    })
}

/// `n` assignments that agree with `fixed`; remaining parameters uniform.
pub fn random_assignments(
    schema: &ParameterSchema,
    fixed: &StyleAssignment,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<StyleAssignment> {
    (0..n)
        .map(|_| {
            let mut a = fixed.clone();
            for p in schema.parameters() {
                if a.get(&p.name).is_none() {
                    a.set(&p.name, p.values.choose(rng).unwrap());
                }
            }
            a
        })
        .collect()
}

/// `n_per_value` samples for every value of each parameter in `params`, with
/// the other parameters drawn uniformly.
pub fn property_samples<F: Real>(
    model: &LanguageModel<F>,
    bpe: &BpeModel,
    params: &[&str],
    n_per_value: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<GeneratedSentence>, EvalError> {
    let schema = model.schema().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut requests = Vec::new();
    for &param in params {
        let p = schema.parameter(param).ok_or_else(|| EvalError::UnknownParameter(param.to_string()))?;
        for v in &p.values {
            let fixed = StyleAssignment::from_pairs([(param, v.as_str())]);
            requests.extend(random_assignments(&schema, &fixed, n_per_value, &mut rng));
        }
    }
    Ok(sample_rows(model, bpe, &requests, cfg, 0)?)
}

/// Percent of sentences whose realized `param` equals the requested value;
/// `None` for parameters without a text annotator.
pub fn compliance(generated: &[GeneratedSentence], param: &str, ann: &Annotators) -> Option<f64> {
    let mut ok = 0;
    for g in generated {
        let realized = ann.realized(param, &g.tokens)?;
        if Some(realized.as_str()) == g.assignment.get(param) {
            ok += 1;
        }
    }
    Some(pct(ok, generated.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedicatedRow {
    pub filter: String,
    pub train_size: usize,
    pub dev_size: usize,
    pub dedicated: Option<f64>,
    pub conditioned: Option<f64>,
}

impl DedicatedRow {
    pub fn to_display(rows: &[DedicatedRow]) -> String {
        let mut out = format!("{:<60} {:>7} {:>5} {:>10} {:>11}\n", "filter", "train", "dev", "dedicated", "conditioned");
        for r in rows {
            out += &format!(
                "{:<60} {:>7} {:>5} {:>10} {:>11}\n",
                r.filter.to_string(),
                r.train_size,
                r.dev_size,
                cell(r.dedicated),
                cell(r.conditioned)
            );
        }
        out
    }
}

/// Pair every chain step with the conditioned model's perplexity on the same
/// matching dev subset.
pub fn dedicated_report<F: Real>(
    steps: &[ChainStep],
    conditioned: &LanguageModel<F>,
    bpe: &BpeModel,
    dev: &[AnnotatedSentence],
) -> Result<Vec<DedicatedRow>, EvalError> {
    steps
        .iter()
        .map(|s| {
            let sub = filter(dev, &s.filter);
            let conditioned = if sub.is_empty() { None } else { Some(perplexity(conditioned, bpe, &sub, true)?) };
            Ok(DedicatedRow {
                filter: s.filter.0.to_string(),
                train_size: s.train_size,
                dev_size: s.dev_size,
                dedicated: s.dev_perplexity,
                conditioned,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub holdout: String,
    pub removed: usize,
    pub samples: usize,
    /// Per held-out parameter: (held-out model %, reference model %).
    pub compliance: BTreeMap<String, (Option<f64>, Option<f64>)>,
}

impl GeneralizationReport {
    /// Held-out parameter with the lowest held-out-model compliance.
    pub fn harder_parameter(&self) -> Option<&str> {
        self.compliance
            .iter()
            .filter_map(|(k, (h, _))| h.map(|h| (k, h)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k.as_str())
    }
}

impl fmt::Display for GeneralizationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "holdout {} ({} training sentences removed, {} samples)", self.holdout, self.removed, self.samples)?;
        writeln!(f, "{:<14} {:>10} {:>10}", "parameter", "held-out", "reference")?;
        for (k, (h, r)) in &self.compliance {
            let c = |x: &Option<f64>| x.map_or_else(|| "-".into(), |v| format!("{v:.1}%"));
            writeln!(f, "{:<14} {:>10} {:>10}", k, c(h), c(r))?;
        }
        Ok(())
    }
}

pub struct Generalization {
    pub report: GeneralizationReport,
    pub heldout: TrainOutcome,
}

/// Retrain without the sentences matching `holdout`, then sample the held-out
/// combination (other parameters uniform) from it and from `reference`, a
/// model trained on all data.
#[allow(clippy::too_many_arguments)]
pub fn generalization_experiment<F: Real>(
    train_set: &[AnnotatedSentence],
    dev: &[AnnotatedSentence],
    bpe: &BpeModel,
    model_cfg: &ModelConfig,
    holdout: &SubsetFilter,
    cfg: &TrainConfig,
    reference: &LanguageModel<F>,
    samples: usize,
    sampler: &SamplerConfig,
    ann: &Annotators,
) -> Result<Generalization, EvalError> {
    let schema = &model_cfg.schema;
    schema.validate_partial(&holdout.0)?;
    let kept: Vec<AnnotatedSentence> = train_set.iter().filter(|s| !holdout.matches(s)).cloned().collect();
    let removed = train_set.len() - kept.len();
    if !holdout.is_empty() {
        for (param, value) in holdout.0.iter() {
            let any = train_set.iter().any(|s| s.labels.get(param) == Some(value));
            if any && !kept.iter().any(|s| s.labels.get(param) == Some(value)) {
                return Err(EvalError::HoldoutCoversValue { param: param.into(), value: value.into() });
            }
        }
    }
    let dev_kept: Vec<AnnotatedSentence> = dev.iter().filter(|s| !holdout.matches(s)).cloned().collect();
    let heldout = train(&kept, &dev_kept, bpe, model_cfg, cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    rng.set_stream(u64::MAX - 1);
    let requests = random_assignments(schema, &holdout.0, samples, &mut rng);
    let from_heldout = sample_rows(&heldout.best.model, bpe, &requests, sampler, 0)?;
    let from_reference = sample_rows(reference, bpe, &requests, sampler, 0)?;
    let compliance = holdout
        .0
        .iter()
        .map(|(p, _)| (p.to_string(), (compliance(&from_heldout, p, ann), compliance(&from_reference, p, ann))))
        .collect();
    Ok(Generalization {
        report: GeneralizationReport { holdout: holdout.0.to_string(), removed, samples, compliance },
        heldout,
    })
}

#[cfg(test)]
mod tests;
