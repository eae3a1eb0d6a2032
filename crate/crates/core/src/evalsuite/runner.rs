//! Experiment runner driven by a manifest naming the corpus, splits, seeds
//! and which experiments to run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::*;
use crate::bpe::word_counts;
use crate::corpus::{read_annotated, LexiconTagger, ThemeLexicon};
use crate::trainer::train_dedicated_chain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// Conditioned vs unconditioned perplexity.
    Perplexity,
    /// Dedicated sub-models along a filter chain.
    Dedicated,
    /// Flipped-label perplexity.
    Flip,
    /// Compliance of generated text.
    Properties,
    /// Held-out combination.
    Generalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusSource {
    Synth { spec: SynthSpec, dev: usize, test: usize },
    Files { train: PathBuf, dev: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dims {
    pub word_emb: usize,
    pub lstm: usize,
    pub mlp: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { word_emb: 32, lstm: 128, mlp: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentManifest {
    pub corpus: CorpusSource,
    /// Schema file; the bundled schema when absent.
    pub schema: Option<PathBuf>,
    pub themes: Option<PathBuf>,
    pub adjectives: Option<PathBuf>,
    pub bpe_vocab_size: usize,
    pub dims: Dims,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub experiments: Vec<Experiment>,
    pub chain: Vec<(String, String)>,
    pub flip_parameters: Vec<String>,
    pub property_parameters: Vec<String>,
    pub samples_per_value: usize,
    pub margin: usize,
    pub holdout: String,
    pub generalization_samples: usize,
    /// Reports and checkpoints are written here when set.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        ExperimentManifest {
            corpus: CorpusSource::Synth { spec: SynthSpec { size: 20_000, seed: 1, ..SynthSpec::default() }, dev: 1000, test: 1000 },
            schema: None,
            themes: None,
            adjectives: None,
            bpe_vocab_size: 2000,
            dims: Dims::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            experiments: vec![
                Experiment::Perplexity,
                Experiment::Dedicated,
                Experiment::Flip,
                Experiment::Properties,
                Experiment::Generalization,
            ],
            chain: [("personal", "false"), ("theme", "plot"), ("length", "11-20"), ("professional", "true")]
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .to_vec(),
            flip_parameters: ["professional", "personal", "descriptive", "sentiment"].map(String::from).to_vec(),
            property_parameters: ["personal", "length", "theme", "descriptive"].map(String::from).to_vec(),
            samples_per_value: 500,
            margin: 2,
            holdout: "theme=plot,personal=true".into(),
            generalization_samples: 500,
            out_dir: None,
        }
    }
}

impl ExperimentManifest {
    pub fn from_toml_str(s: &str) -> Result<Self, EvalError> {
        toml::from_str(s).map_err(|e| EvalError::Manifest(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Manifest(format!("{}: {e}", path.display())))?;
        let mut m = Self::from_toml_str(&text)?;
        // Relative paths are taken from the manifest's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let CorpusSource::Files { train, dev, test } = &mut m.corpus {
            fix(train);
            fix(dev);
            fix(test);
        }
        for p in [&mut m.schema, &mut m.themes, &mut m.adjectives, &mut m.out_dir].into_iter().flatten() {
            fix(p);
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    pub bpe_vocab_size: usize,
    pub perplexity: Option<PerplexityReport>,
    pub dedicated: Option<Vec<DedicatedRow>>,
    pub flips: Vec<FlipResult>,
    pub properties: Option<PropertyReport>,
    pub generalization: Option<GeneralizationReport>,
    /// Wall-clock seconds per stage.
    pub seconds: BTreeMap<String, f64>,
}

/// Everything a run produced, including the trained models.
pub struct ExperimentRun {
    pub results: ExperimentResults,
    pub bpe: BpeModel,
    pub conditioned: Option<TrainOutcome>,
    pub unconditioned: Option<TrainOutcome>,
    pub generated: Vec<GeneratedSentence>,
}

fn write_report(dir: &Option<PathBuf>, name: &str, text: &str, record: &impl Serialize) -> Result<(), EvalError> {
    if let Some(dir) = dir {
        let io = |e: std::io::Error| EvalError::Manifest(format!("writing {name}: {e}"));
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join(format!("{name}.txt")), text).map_err(io)?;
        let json = serde_json::to_string_pretty(record).expect("reports serialize");
        std::fs::write(dir.join(format!("{name}.json")), json).map_err(io)?;
    }
    Ok(())
}

pub fn run_experiments(m: &ExperimentManifest) -> Result<ExperimentRun, EvalError> {
    let clock = Instant::now();
    let mut seconds = BTreeMap::new();
    let mut lap = |name: &str, since: &mut Instant| {
        seconds.insert(name.to_string(), since.elapsed().as_secs_f64());
        *since = Instant::now();
    };
    let mut t = Instant::now();
    let schema = match &m.schema {
        Some(p) => ParameterSchema::load(p)?,
        None => crate::schema::default_schema(),
    };
    let themes = match &m.themes {
        Some(p) => ThemeLexicon::load(p).map_err(|e| EvalError::Manifest(e.to_string()))?,
        None => ThemeLexicon::default(),
    };
    let tagger = match &m.adjectives {
        Some(p) => LexiconTagger::load(p).map_err(|e| EvalError::Manifest(e.to_string()))?,
        None => LexiconTagger::default(),
    };
    let ann = Annotators { themes, tagger: Box::new(tagger) };
    let (train_set, dev, test) = match &m.corpus {
        CorpusSource::Synth { spec, dev, test } => split_corpus(&synth_corpus(spec, &schema, &ann)?, *dev, *test)?,
        CorpusSource::Files { train, dev, test } => {
            let read = |p: &PathBuf| read_annotated(p).map_err(|e| EvalError::Manifest(format!("{}: {e}", p.display())));
            (read(train)?, read(dev)?, read(test)?)
        }
    };
    let bpe = BpeModel::learn(&word_counts(train_set.iter().map(|s| s.tokens.as_slice())), m.bpe_vocab_size)
        .map_err(|e| EvalError::Manifest(e.to_string()))?;
    let model_cfg = ModelConfig::with_dims(bpe.vocab_size(), schema.clone(), m.dims.word_emb, m.dims.lstm, m.dims.mlp);
    lap("prepare", &mut t);

    let out = &m.out_dir;
    let sub_cfg = |name: &str| {
        let mut c = m.train.clone();
        c.checkpoint_dir = out.as_ref().map(|d| d.join("models").join(name));
        c
    };
    let mut results = ExperimentResults {
        train_sentences: train_set.len(),
        dev_sentences: dev.len(),
        test_sentences: test.len(),
        bpe_vocab_size: bpe.vocab_size(),
        ..ExperimentResults::default()
    };
    let wants = |e: Experiment| m.experiments.contains(&e);
    let (mut conditioned, mut unconditioned) = (None, None);
    if wants(Experiment::Perplexity) {
        let mut cfg = m.train.clone();
        cfg.checkpoint_dir = out.as_ref().map(|d| d.join("models"));
        let cmp = compare_cond_uncond(&train_set, &dev, &test, &bpe, &model_cfg, &cfg)?;
        write_report(out, "perplexity", &cmp.report.to_string(), &cmp.report)?;
        results.perplexity = Some(cmp.report);
        conditioned = Some(cmp.conditioned);
        unconditioned = Some(cmp.unconditioned);
        lap("perplexity", &mut t);
    }
    let needs_cond = [Experiment::Dedicated, Experiment::Flip, Experiment::Properties, Experiment::Generalization];
    if conditioned.is_none() && needs_cond.iter().any(|e| wants(*e)) {
        conditioned = Some(train(&train_set, &dev, &bpe, &model_cfg, &sub_cfg("conditioned"))?);
        lap("train-conditioned", &mut t);
    }

    if wants(Experiment::Dedicated) {
        let cond = &conditioned.as_ref().unwrap().best.model;
        let steps = train_dedicated_chain(&train_set, &dev, &bpe, &model_cfg, &m.chain, &sub_cfg("dedicated"))?;
        let rows = dedicated_report(&steps, cond, &bpe, &dev)?;
        write_report(out, "dedicated", &DedicatedRow::to_display(&rows), &rows)?;
        results.dedicated = Some(rows);
        lap("dedicated", &mut t);
    }
    if wants(Experiment::Flip) {
        let cond = &conditioned.as_ref().unwrap().best.model;
        let mut text = String::new();
        for p in &m.flip_parameters {
            let r = flip_eval(cond, &bpe, &dev, p)?;
            text += &r.to_string();
            results.flips.push(r);
        }
        write_report(out, "flip", &text, &results.flips)?;
        lap("flip", &mut t);
    }
    let mut generated = Vec::new();
    if wants(Experiment::Properties) {
        let cond = &conditioned.as_ref().unwrap().best.model;
        let params: Vec<&str> = m.property_parameters.iter().map(String::as_str).collect();
        generated = property_samples(cond, &bpe, &params, m.samples_per_value, &m.sampler)?;
        let report = property_report(&generated, m.margin, &ann, &schema)?;
        write_report(out, "properties", &report.to_string(), &report)?;
        results.properties = Some(report);
        lap("properties", &mut t);
    }
    if wants(Experiment::Generalization) {
        let cond = conditioned.as_ref().unwrap();
        let holdout = SubsetFilter::parse(&m.holdout, &schema)?;
        let g = generalization_experiment(
            &train_set,
            &dev,
            &bpe,
            &model_cfg,
            &holdout,
            &sub_cfg("holdout"),
            &cond.best.model,
            m.generalization_samples,
            &m.sampler,
            &ann,
        )?;
        write_report(out, "generalization", &g.report.to_string(), &g.report)?;
        results.generalization = Some(g.report);
        lap("generalization", &mut t);
    }
    seconds.insert("total".into(), clock.elapsed().as_secs_f64());
    results.seconds = seconds;
    write_report(out, "results", &format!("{results:#?}\n"), &results)?;
    Ok(ExperimentRun { results, bpe, conditioned, unconditioned, generated })
}
