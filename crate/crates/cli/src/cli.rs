//! Subcommands driving every pipeline stage. Each stage reads and writes the
//! same JSONL and text formats, so outputs feed straight into the next one.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use styledlm::bpe::{word_counts, BpeModel};
use styledlm::corpus::{
    corpus_stats, ingest, read_annotated, write_annotated, AnnotatedSentence, Annotators, LexiconTagger, ThemeLexicon,
};
use styledlm::evalsuite::{
    dedicated_report, flip_eval, generalization_experiment, perplexity, property_report, run_experiments, split_corpus,
    synth_corpus, DedicatedRow, ExperimentManifest, SynthSpec,
};
use styledlm::model::{Checkpoint, ModelConfig};
use styledlm::sampler::{
    combination_frequencies, generate_protocol, sample_many, GeneratedSentence, ProtocolConfig, SamplerConfig,
    DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE,
};
use styledlm::schema::{default_schema, ParameterSchema, StyleAssignment};
use styledlm::trainer::{train, train_dedicated_chain, SubsetFilter, TrainConfig};

use crate::service::{self, AppState};

pub const MERGES_FILE: &str = "merges.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Parser)]
#[command(name = "styledlm", version, about = "Style- and content-conditioned sentence generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split raw reviews into sentences and label every parameter.
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Abort on the first malformed review instead of skipping it.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[command(flatten)]
        lex: LexiconArgs,
    },
    /// Value distribution of every parameter in an annotated file.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Learn subword merges from an annotated file.
    BpeLearn {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 2000)]
        vocab_size: usize,
        /// Directory receiving merges.txt and vocab.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode an annotated file to subword ids.
    BpeApply {
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic annotated corpus whose labels the annotators reproduce.
    Synth {
        /// Directory receiving train.jsonl, dev.jsonl and test.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        dev: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        /// TOML overrides for the generator.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a conditioned (or plain) language model.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        bpe: PathBuf,
        /// Directory receiving best.ckpt, last.ckpt, manifest.json and trace.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        unconditioned: bool,
        /// Train only on sentences matching `param=value,...`.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[command(flatten)]
        dims: DimArgs,
        #[command(flatten)]
        opt: TrainArgs,
    },
    /// Token-level perplexity of one or more checkpoints on a labelled set.
    EvalPpl {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Perplexity with correct and with flipped labels for one parameter.
    EvalFlip {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "param", required = true)]
        params: Vec<String>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Dedicated plain models along a filter chain against a conditioned model.
    EvalDedicated {
        /// Conditioned checkpoint; its vocabulary and shape are reused.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Entries `param=value` separated by commas, applied cumulatively.
        #[arg(long, default_value = "personal=false,theme=plot,length=11-20,professional=true")]
        chain: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opt: TrainArgs,
    },
    /// Sample sentences for one assignment, or for every dev-set combination.
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// Full assignment `param=value,...`; required unless `--protocol`.
        #[arg(long)]
        assignment: Option<String>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Sample every attested dev combination and keep the most probable.
        #[arg(long, requires = "dev")]
        protocol: bool,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        per_combination: usize,
        #[arg(long, default_value_t = 100)]
        scale: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// JSONL output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compliance report for a generated set.
    EvalGen {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        margin: usize,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        lex: LexiconArgs,
    },
    /// Retrain without one combination and compare compliance on it.
    ExperimentGeneralize {
        /// Reference conditioned checkpoint trained on everything.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long, default_value = "theme=plot,personal=true")]
        holdout: String,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opt: TrainArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        lex: LexiconArgs,
    },
    /// HTTP service over one checkpoint.
    Serve {
        #[arg(long, env = "STYLEDLM_MODEL")]
        model: Option<PathBuf>,
        #[arg(long, env = "STYLEDLM_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Run the experiments named in a TOML manifest.
    RunExperiments {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct LexiconArgs {
    #[arg(long)]
    pub themes: Option<PathBuf>,
    /// Adjective word list, one per line.
    #[arg(long)]
    pub adjectives: Option<PathBuf>,
}

impl LexiconArgs {
    fn annotators(&self) -> Result<Annotators> {
        let themes = match &self.themes {
            Some(p) => ThemeLexicon::load(p).with_context(|| format!("loading themes {}", p.display()))?,
            None => ThemeLexicon::default(),
        };
        let tagger = match &self.adjectives {
            Some(p) => LexiconTagger::load(p).with_context(|| format!("loading adjectives {}", p.display()))?,
            None => LexiconTagger::default(),
        };
        Ok(Annotators { themes, tagger: Box::new(tagger) })
    }
}

#[derive(Debug, Clone, Args)]
pub struct DimArgs {
    #[arg(long, default_value_t = 32)]
    pub word_emb: usize,
    #[arg(long, default_value_t = 128)]
    pub lstm: usize,
    #[arg(long, default_value_t = 128)]
    pub mlp: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

impl TrainArgs {
    fn config(&self, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        let mut cfg = TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            clip_norm: self.clip_norm,
            checkpoint_dir,
            ..TrainConfig::default()
        };
        cfg.adam.lr = self.lr;
        cfg
    }
}

#[derive(Debug, Clone, Args)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
    #[arg(long = "sample-seed", default_value_t = 0)]
    pub sample_seed: u64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig { temperature: self.temperature, max_tokens: self.max_tokens, seed: self.sample_seed }
    }
}

/// One line of a generated-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub text: String,
    pub logprob: f64,
    pub assignment: StyleAssignment,
}

impl From<&GeneratedSentence> for GeneratedRecord {
    fn from(s: &GeneratedSentence) -> Self {
        GeneratedRecord { text: s.text(), logprob: s.log_probability, assignment: s.assignment.clone() }
    }
}

impl GeneratedRecord {
    pub fn into_sentence(self) -> GeneratedSentence {
        GeneratedSentence {
            tokens: self.text.split_whitespace().map(String::from).collect(),
            ids: Vec::new(),
            log_probability: self.logprob,
            assignment: self.assignment,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EncodedRecord {
    ids: Vec<u32>,
    labels: StyleAssignment,
}

pub fn write_generated(out: &mut dyn Write, set: &[GeneratedSentence]) -> Result<()> {
    for s in set {
        serde_json::to_writer(&mut *out, &GeneratedRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_generated(path: &Path) -> Result<Vec<GeneratedSentence>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: GeneratedRecord =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: bad generated record", path.display(), n + 1))?;
        out.push(r.into_sentence());
    }
    Ok(out)
}

fn load_schema(path: Option<&Path>) -> Result<ParameterSchema> {
    match path {
        Some(p) => ParameterSchema::load(p).with_context(|| format!("loading schema {}", p.display())),
        None => Ok(default_schema()),
    }
}

fn load_corpus(path: &Path) -> Result<Vec<AnnotatedSentence>> {
    read_annotated(path).with_context(|| format!("reading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_bpe(dir: &Path) -> Result<BpeModel> {
    BpeModel::load(&dir.join(MERGES_FILE), &dir.join(VOCAB_FILE))
        .with_context(|| format!("loading subword model from {}", dir.display()))
}

fn parse_chain(s: &str, schema: &ParameterSchema) -> Result<Vec<(String, String)>> {
    let a = StyleAssignment::parse(s)?;
    schema.validate_partial(&a)?;
    // Keep the written order; the assignment itself is sorted.
    let mut chain = Vec::new();
    for entry in s.split(',').map(str::trim).filter(|e| !e.is_empty()) {
        let (k, v) = entry.split_once('=').context("chain entries are param=value")?;
        chain.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(chain)
}

fn emit_json(path: &Option<PathBuf>, value: &impl Serialize) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn write_text(dir: &Option<PathBuf>, name: &str, text: &str, value: &impl Serialize) -> Result<()> {
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join(format!("{name}.txt")), text)?;
        std::fs::write(d.join(format!("{name}.json")), serde_json::to_string_pretty(value)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PplRow {
    model: String,
    conditioned: bool,
    sentences: usize,
    perplexity: f64,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Annotate { input, out: dest, strict, schema, lex } => {
            let schema = load_schema(schema.as_deref())?;
            let report = ingest(&input, &schema, &lex.annotators()?, strict)
                .with_context(|| format!("annotating {}", input.display()))?;
            write_annotated(&dest, &report.sentences)?;
            for (line, why) in &report.skipped {
                eprintln!("skipped line {line}: {why}");
            }
            writeln!(out, "{} sentences written to {}", report.sentences.len(), dest.display())?;
        }
        Command::Stats { input, schema, json } => {
            let stats = corpus_stats(&load_corpus(&input)?, &load_schema(schema.as_deref())?);
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&stats)?)?;
            } else {
                write!(out, "{stats}")?;
            }
        }
        Command::BpeLearn { input, vocab_size, out: dir } => {
            let corpus = load_corpus(&input)?;
            let bpe = BpeModel::learn(&word_counts(corpus.iter().map(|s| s.tokens.as_slice())), vocab_size)?;
            std::fs::create_dir_all(&dir)?;
            bpe.save(&dir.join(MERGES_FILE), &dir.join(VOCAB_FILE))?;
            writeln!(out, "{} merges, vocabulary {}", bpe.merges().len(), bpe.vocab_size())?;
        }
        Command::BpeApply { bpe, input, out: dest } => {
            let bpe = load_bpe(&bpe)?;
            let corpus = load_corpus(&input)?;
            let mut w = BufWriter::new(File::create(&dest)?);
            for s in &corpus {
                let rec = EncodedRecord { ids: bpe.encode(&s.tokens), labels: s.labels.clone() };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            writeln!(out, "{} sentences encoded", corpus.len())?;
        }
        Command::Synth { out: dir, size, seed, dev, test, spec } => {
            let mut spec: SynthSpec = match spec {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => SynthSpec::default(),
            };
            spec.size = size;
            spec.seed = seed;
            let corpus = synth_corpus(&spec, &default_schema(), &Annotators::default())?;
            let (tr, dv, te) = split_corpus(&corpus, dev, test)?;
            std::fs::create_dir_all(&dir)?;
            write_annotated(&dir.join("train.jsonl"), &tr)?;
            write_annotated(&dir.join("dev.jsonl"), &dv)?;
            write_annotated(&dir.join("test.jsonl"), &te)?;
            writeln!(out, "train {} dev {} test {}", tr.len(), dv.len(), te.len())?;
        }
        Command::Train { train: train_path, dev, bpe, out: dir, unconditioned, filter, schema, dims, opt } => {
            let schema = load_schema(schema.as_deref())?;
            let bpe = load_bpe(&bpe)?;
            let mut train_set = load_corpus(&train_path)?;
            let mut dev_set = match &dev {
                Some(p) => load_corpus(p)?,
                None => Vec::new(),
            };
            if let Some(f) = filter {
                let f = SubsetFilter::parse(&f, &schema)?;
                train_set.retain(|s| f.matches(s));
                dev_set.retain(|s| f.matches(s));
            }
            let mut cfg = ModelConfig::with_dims(bpe.vocab_size(), schema, dims.word_emb, dims.lstm, dims.mlp);
            if unconditioned {
                cfg = cfg.unconditioned();
            }
            let outcome = train(&train_set, &dev_set, &bpe, &cfg, &opt.config(Some(dir.clone())))?;
            for row in &outcome.trace {
                writeln!(out, "epoch {:>3} {:<5} perplexity {:.3}", row.epoch, row.split.as_str(), row.perplexity)?;
            }
            writeln!(out, "best epoch {} written to {}", outcome.best_epoch, dir.join("best.ckpt").display())?;
        }
        Command::EvalPpl { models, input, json } => {
            let corpus = load_corpus(&input)?;
            let mut rows = Vec::new();
            for path in &models {
                let ck = load_checkpoint(path)?;
                let conditioned = ck.model.is_conditioned();
                let ppl = perplexity(&ck.model, &ck.bpe, &corpus, conditioned)?;
                rows.push(PplRow { model: path.display().to_string(), conditioned, sentences: corpus.len(), perplexity: ppl });
            }
            writeln!(out, "{:<40} {:>11} {:>9} {:>11}", "model", "conditioned", "sentences", "perplexity")?;
            for r in &rows {
                writeln!(out, "{:<40} {:>11} {:>9} {:>11.3}", r.model, r.conditioned, r.sentences, r.perplexity)?;
            }
            emit_json(&json, &rows)?;
        }
        Command::EvalFlip { model, input, params, json } => {
            let ck = load_checkpoint(&model)?;
            let corpus = load_corpus(&input)?;
            let mut results = Vec::new();
            for p in &params {
                let r = flip_eval(&ck.model, &ck.bpe, &corpus, p)?;
                write!(out, "{r}")?;
                results.push(r);
            }
            emit_json(&json, &results)?;
        }
        Command::EvalDedicated { model, train: train_path, dev, chain, out: dir, opt } => {
            let ck = load_checkpoint(&model)?;
            if !ck.model.is_conditioned() {
                bail!("{} is not a conditioned model", model.display());
            }
            let chain = parse_chain(&chain, ck.model.schema())?;
            let (train_set, dev_set) = (load_corpus(&train_path)?, load_corpus(&dev)?);
            let cfg = opt.config(dir.as_ref().map(|d| d.join("models")));
            let steps = train_dedicated_chain(&train_set, &dev_set, &ck.bpe, &ck.model.config, &chain, &cfg)?;
            let rows = dedicated_report(&steps, &ck.model, &ck.bpe, &dev_set)?;
            let table = DedicatedRow::to_display(&rows);
            write!(out, "{table}")?;
            write_text(&dir, "dedicated", &table, &rows)?;
        }
        Command::Generate { model, assignment, count, protocol, dev, per_combination, scale, sampler, out: dest } => {
            let ck = load_checkpoint(&model)?;
            let cfg = sampler.config();
            let set = if protocol {
                let dev_set = load_corpus(dev.as_deref().expect("clap enforces --dev"))?;
                let freq = combination_frequencies(&dev_set);
                generate_protocol(&ck.model, &ck.bpe, &freq, &ProtocolConfig { per_combination, scale }, &cfg)?
            } else {
                let a = StyleAssignment::parse(assignment.as_deref().context("--assignment is required without --protocol")?)?;
                if ck.model.is_conditioned() {
                    ck.model.schema().validate(&a)?;
                }
                sample_many(&ck.model, &ck.bpe, &a, count, &cfg, 0)?
            };
            match dest {
                Some(p) => {
                    write_generated(&mut BufWriter::new(File::create(&p)?), &set)?;
                    writeln!(out, "{} sentences written to {}", set.len(), p.display())?;
                }
                None => write_generated(out, &set)?,
            }
        }
        Command::EvalGen { input, margin, schema, json, lex } => {
            let set = read_generated(&input)?;
            let schema = load_schema(schema.as_deref())?;
            let report = property_report(&set, margin, &lex.annotators()?, &schema)?;
            write!(out, "{report}")?;
            emit_json(&json, &report)?;
        }
        Command::ExperimentGeneralize { model, train: train_path, dev, holdout, samples, out: dir, opt, sampler, lex } => {
            let ck = load_checkpoint(&model)?;
            let holdout = SubsetFilter::parse(&holdout, ck.model.schema())?;
            let (train_set, dev_set) = (load_corpus(&train_path)?, load_corpus(&dev)?);
            let g = generalization_experiment(
                &train_set,
                &dev_set,
                &ck.bpe,
                &ck.model.config,
                &holdout,
                &opt.config(dir.as_ref().map(|d| d.join("models"))),
                &ck.model,
                samples,
                &sampler.config(),
                &lex.annotators()?,
            )?;
            write!(out, "{}", g.report)?;
            write_text(&dir, "generalization", &g.report.to_string(), &g.report)?;
        }
        Command::Serve { model, port, host } => {
            let state = match &model {
                Some(p) => AppState::with_model(load_checkpoint(p)?),
                None => {
                    eprintln!("no model given; generation and scoring answer 503");
                    AppState::default()
                }
            };
            let addr = SocketAddr::new(host, port);
            eprintln!("listening on http://{addr}");
            tokio::runtime::Runtime::new()?.block_on(service::serve(addr, state))?;
        }
        Command::RunExperiments { manifest } => {
            let m = ExperimentManifest::load(&manifest)?;
            let run = run_experiments(&m)?;
            let r = &run.results;
            if let Some(p) = &r.perplexity {
                write!(out, "{p}")?;
            }
            if let Some(d) = &r.dedicated {
                write!(out, "{}", DedicatedRow::to_display(d))?;
            }
            for f in &r.flips {
                write!(out, "{f}")?;
            }
            if let Some(p) = &r.properties {
                write!(out, "{p}")?;
            }
            if let Some(g) = &r.generalization {
                write!(out, "{g}")?;
            }
            writeln!(out, "total {:.1}s", r.seconds.get("total").copied().unwrap_or_default())?;
        }
    }
    Ok(())
}
