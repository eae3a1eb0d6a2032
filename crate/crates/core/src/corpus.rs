//! Review ingestion and heuristic sentence annotation.
//!
//! Two labels come from review meta-data (`professional`, `sentiment`) and are
//! shared by every sentence of a review; the other four are derived from the
//! sentence text.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{ParameterSchema, SchemaError, StyleAssignment};

const DEFAULT_THEME_WORDS: &str = include_str!("../data/theme_words.txt");
const DEFAULT_ADJECTIVES: &str = include_str!("../data/adjectives.txt");

/// Words of the bundled adjective lexicon.
pub fn bundled_adjectives() -> impl Iterator<Item = &'static str> {
    DEFAULT_ADJECTIVES.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// Fraction of adjective tokens at which a sentence counts as descriptive.
pub const DESCRIPTIVE_THRESHOLD_PERCENT: usize = 35;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("score {0} outside [0, 5]")]
    ScoreOutOfRange(f64),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("invalid labels: {0}")]
    Labels(#[from] SchemaError),
    #[error("schema parameter `{0}` has no annotator")]
    NoAnnotator(String),
    #[error("malformed word list at line {line}: {message}")]
    WordList { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One review as scraped, before sentence splitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawReview {
    pub review_id: String,
    pub movie_id: String,
    pub text: String,
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub is_critic: bool,
    #[serde(default)]
    pub is_super_reviewer: bool,
}

/// Training and evaluation record: a tokenized sentence and its labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    pub labels: StyleAssignment,
    #[serde(default)]
    pub source_review: String,
}

// ---------------------------------------------------------------------------
// Tokenization

const TERMINATORS: [&str; 3] = [".", "!", "?"];
const CLOSERS: [&str; 2] = [")", "\u{201d}"];
const CLITICS: [&str; 6] = ["'s", "'re", "'ve", "'ll", "'d", "'m"];
const ABBREVIATIONS: [&str; 14] = [
    "mr", "mrs", "ms", "dr", "st", "jr", "sr", "vs", "etc", "prof", "e.g", "i.e", "vol", "no",
];

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

fn split_clitic(word: &str) -> Vec<String> {
    let lower = word.to_lowercase().replace('\u{2019}', "'");
    if lower.len() > 3 && lower.ends_with("n't") {
        let cut = word.char_indices().rev().nth(2).map(|(i, _)| i).unwrap_or(0);
        if cut > 0 {
            return vec![word[..cut].to_string(), word[cut..].to_string()];
        }
    }
    if let Some((i, _)) = word.char_indices().find(|&(_, c)| is_apostrophe(c)) {
        let tail = lower[i..].to_string();
        if i > 0 && CLITICS.contains(&tail.as_str()) {
            return vec![word[..i].to_string(), word[i..].to_string()];
        }
    }
    vec![word.to_string()]
}

/// Word tokenization: alphanumeric runs (with internal hyphens, slashes,
/// apostrophes and decimal points) are words, common clitics are split off,
/// and every other non-space character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if !c.is_alphanumeric() {
            out.push(c.to_string());
            i += 1;
            continue;
        }
        let start = i;
        i += 1;
        while i < chars.len() {
            let c = chars[i];
            let next_alnum = chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if c.is_alphanumeric() {
                i += 1;
            } else if (c == '-' || c == '/' || is_apostrophe(c)) && next_alnum {
                i += 1;
            } else if c == '.'
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit())
            {
                i += 1;
            } else {
                break;
            }
        }
        let mut word: String = chars[start..i].iter().collect();
        if chars.get(i) == Some(&'.') && ABBREVIATIONS.contains(&word.to_lowercase().as_str()) {
            word.push('.');
            i += 1;
        }
        out.extend(split_clitic(&word));
    }
    out
}

/// Split text into tokenized sentences. A sentence ends after a run of
/// terminal punctuation (plus any closing bracket or quote) or at end of text.
pub fn split_sentences(text: &str) -> Vec<Vec<String>> {
    let tokens = tokenize(text);
    let mut sentences = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        current.push(tokens[i].clone());
        if TERMINATORS.contains(&tokens[i].as_str()) {
            while i + 1 < tokens.len() && TERMINATORS.contains(&tokens[i + 1].as_str()) {
                i += 1;
                current.push(tokens[i].clone());
            }
            while i + 1 < tokens.len() && CLOSERS.contains(&tokens[i + 1].as_str()) {
                i += 1;
                current.push(tokens[i].clone());
            }
            sentences.push(std::mem::take(&mut current));
        }
        i += 1;
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

// ---------------------------------------------------------------------------
// Meta-data annotators

pub fn annotate_professional(r: &RawReview) -> &'static str {
    bool_label(r.is_critic || r.is_super_reviewer)
}

/// Round half-up to a whole grade, then 0-2 negative, 3 neutral, 4-5 positive.
pub fn annotate_sentiment(score: Option<f64>) -> Result<&'static str, CorpusError> {
    let Some(s) = score else {
        return Ok("none");
    };
    if !(0.0..=5.0).contains(&s) {
        return Err(CorpusError::ScoreOutOfRange(s));
    }
    let grade = (s + 0.5).floor() as u32;
    Ok(match grade {
        0..=2 => "negative",
        3 => "neutral",
        _ => "positive",
    })
}

// ---------------------------------------------------------------------------
// Text annotators

pub fn annotate_length(tokens: &[String]) -> &'static str {
    match tokens.len() {
        0..=10 => "<=10",
        11..=20 => "11-20",
        21..=40 => "21-40",
        _ => ">40",
    }
}

pub fn is_personal_token(token: &str) -> bool {
    token == "I"
        || token.eq_ignore_ascii_case("my")
        || token.starts_with("I'")
        || token.starts_with("I\u{2019}")
}

pub fn annotate_personal(tokens: &[String]) -> &'static str {
    bool_label(tokens.iter().any(|t| is_personal_token(t)))
}

fn bool_label(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

/// Theme word lists, in tie-breaking priority order.
#[derive(Debug, Clone, PartialEq)]
pub struct ThemeLexicon {
    themes: Vec<(String, HashSet<String>)>,
}

impl Default for ThemeLexicon {
    fn default() -> Self {
        ThemeLexicon::parse(DEFAULT_THEME_WORDS).expect("bundled theme lexicon parses")
    }
}

pub const OTHER_THEME: &str = "other";

impl ThemeLexicon {
    pub fn new(themes: Vec<(String, HashSet<String>)>) -> Self {
        let themes = themes
            .into_iter()
            .map(|(name, words)| (name, words.into_iter().map(|w| w.to_lowercase()).collect()))
            .collect();
        ThemeLexicon { themes }
    }

    /// `[theme]` section headers followed by one word per line; `#` comments.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut themes: Vec<(String, HashSet<String>)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                themes.push((name.trim().to_string(), HashSet::new()));
            } else {
                let Some((_, words)) = themes.last_mut() else {
                    return Err(CorpusError::WordList {
                        line: n + 1,
                        message: "word before any [theme] header".into(),
                    });
                };
                words.insert(line.to_lowercase());
            }
        }
        Ok(ThemeLexicon { themes })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn theme_names(&self) -> impl Iterator<Item = &str> {
        self.themes.iter().map(|(n, _)| n.as_str())
    }

    pub fn words(&self, theme: &str) -> Option<&HashSet<String>> {
        self.themes.iter().find(|(n, _)| n == theme).map(|(_, w)| w)
    }

    /// True if the lowercased token appears in any theme list.
    pub fn contains(&self, token: &str) -> bool {
        let lower = token.to_lowercase();
        self.themes.iter().any(|(_, w)| w.contains(&lower))
    }

    pub fn hit_counts(&self, tokens: &[String]) -> Vec<usize> {
        let lowered: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
        self.themes
            .iter()
            .map(|(_, words)| lowered.iter().filter(|t| words.contains(*t)).count())
            .collect()
    }
}

/// Most-hit theme; ties go to the earlier theme, no hits gives `other`.
pub fn annotate_theme(tokens: &[String], lex: &ThemeLexicon) -> String {
    let counts = lex.hit_counts(tokens);
    let mut best: Option<(usize, usize)> = None;
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 && best.is_none_or(|(_, bc)| c > bc) {
            best = Some((i, c));
        }
    }
    match best {
        Some((i, _)) => lex.themes[i].0.clone(),
        None => OTHER_THEME.to_string(),
    }
}

/// Decides whether the token at `index` is an adjective in its sentence.
pub trait AdjectiveTagger: Send + Sync {
    fn is_adjective(&self, tokens: &[String], index: usize) -> bool;
}

impl<F> AdjectiveTagger for F
where
    F: Fn(&[String], usize) -> bool + Send + Sync,
{
    fn is_adjective(&self, tokens: &[String], index: usize) -> bool {
        self(tokens, index)
    }
}

const ADJECTIVE_SUFFIXES: [&str; 9] = ["ous", "ful", "ive", "able", "ible", "al", "ic", "less", "ish"];

// Frequent non-adjectives that the suffix rules would otherwise catch.
const SUFFIX_STOP_LIST: &[&str] = &[
    "music", "magic", "logic", "topic", "critic", "critics", "panic", "picnic", "traffic", "clinic",
    "garlic", "mechanic", "fabric", "lyric", "rhetoric", "arithmetic", "republic", "animal",
    "festival", "hospital", "capital", "signal", "metal", "journal", "arrival", "approval",
    "survival", "proposal", "rival", "manual", "portal", "trial", "tutorial", "official",
    "material", "editorial", "memorial", "denial", "serial", "rental", "recital", "refusal",
    "removal", "disposal", "renewal", "interval", "detective", "relative", "motive", "archive",
    "objective", "executive", "alternative", "narrative", "perspective", "initiative",
    "representative", "olive", "forgive", "arrive", "survive", "thrive", "strive", "derive",
    "deprive", "table", "cable", "fable", "vegetable", "constable", "bible", "unless", "finish",
    "polish", "publish", "establish", "vanish", "punish", "relish", "cherish", "perish", "nourish",
    "banish", "diminish", "accomplish", "demolish", "abolish", "astonish", "handful", "mouthful",
    "nevertheless", "regardless", "general", "generals", "several", "cynic", "mosaic",
    "tactic",
];

/// Lexicon plus suffix rules. Comparatives and superlatives count only when
/// their stem is a lexicon adjective.
#[derive(Debug, Clone)]
pub struct LexiconTagger {
    lexicon: HashSet<String>,
    stop: HashSet<String>,
    suffix_rules: bool,
}

impl Default for LexiconTagger {
    fn default() -> Self {
        LexiconTagger::from_word_list(DEFAULT_ADJECTIVES)
    }
}

impl LexiconTagger {
    pub fn from_word_list(text: &str) -> Self {
        let lexicon = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        LexiconTagger {
            lexicon,
            stop: SUFFIX_STOP_LIST.iter().map(|s| s.to_string()).collect(),
            suffix_rules: true,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Ok(Self::from_word_list(&std::fs::read_to_string(path)?))
    }

    pub fn without_suffix_rules(mut self) -> Self {
        self.suffix_rules = false;
        self
    }

    pub fn is_adjective_word(&self, word: &str) -> bool {
        let w = word.to_lowercase();
        if !w.chars().any(char::is_alphabetic) || !w.chars().all(|c| c.is_alphabetic() || c == '-') {
            return false;
        }
        if self.lexicon.contains(&w) {
            return true;
        }
        if !self.suffix_rules || self.stop.contains(&w) {
            return false;
        }
        if ADJECTIVE_SUFFIXES
            .iter()
            .any(|s| w.len() >= s.len() + 3 && w.ends_with(s))
        {
            return true;
        }
        self.is_graded_form(&w)
    }

    fn is_graded_form(&self, w: &str) -> bool {
        for suffix in ["er", "est"] {
            let Some(stem) = w.strip_suffix(suffix) else {
                continue;
            };
            if stem.len() < 2 {
                continue;
            }
            let mut candidates = vec![stem.to_string(), format!("{stem}e")];
            if let Some(s) = stem.strip_suffix('i') {
                candidates.push(format!("{s}y"));
            }
            let b = stem.as_bytes();
            if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] {
                candidates.push(stem[..stem.len() - 1].to_string());
            }
            if candidates.iter().any(|c| self.lexicon.contains(c)) {
                return true;
            }
        }
        false
    }
}

impl AdjectiveTagger for LexiconTagger {
    fn is_adjective(&self, tokens: &[String], index: usize) -> bool {
        self.is_adjective_word(&tokens[index])
    }
}

pub fn adjective_count(tokens: &[String], tagger: &dyn AdjectiveTagger) -> usize {
    (0..tokens.len()).filter(|&i| tagger.is_adjective(tokens, i)).count()
}

fn descriptive_ratio_met(adjectives: usize, total: usize) -> bool {
    total > 0 && adjectives * 100 >= DESCRIPTIVE_THRESHOLD_PERCENT * total
}

/// At least 35% of all tokens (punctuation included) are adjectives.
pub fn annotate_descriptive(tokens: &[String], tagger: &dyn AdjectiveTagger) -> &'static str {
    bool_label(descriptive_ratio_met(adjective_count(tokens, tagger), tokens.len()))
}

/// Same rule for corpora that arrive with Penn-style part-of-speech tags.
pub fn annotate_descriptive_from_tags<S: AsRef<str>>(tags: &[S]) -> &'static str {
    let adjectives = tags.iter().filter(|t| t.as_ref().starts_with("JJ")).count();
    bool_label(descriptive_ratio_met(adjectives, tags.len()))
}

// ---------------------------------------------------------------------------
// Pipeline

/// The text-derived annotators, bundled so that training-time labeling and
/// generated-text evaluation share one code path.
pub struct Annotators {
    pub themes: ThemeLexicon,
    pub tagger: Box<dyn AdjectiveTagger>,
}

impl Default for Annotators {
    fn default() -> Self {
        Annotators {
            themes: ThemeLexicon::default(),
            tagger: Box::new(LexiconTagger::default()),
        }
    }
}

impl Annotators {
    pub fn personal(&self, tokens: &[String]) -> &'static str {
        annotate_personal(tokens)
    }

    pub fn length(&self, tokens: &[String]) -> &'static str {
        annotate_length(tokens)
    }

    pub fn theme(&self, tokens: &[String]) -> String {
        annotate_theme(tokens, &self.themes)
    }

    pub fn descriptive(&self, tokens: &[String]) -> &'static str {
        annotate_descriptive(tokens, self.tagger.as_ref())
    }

    /// Realized value of a text-derived parameter, `None` for meta-data ones.
    pub fn realized(&self, param: &str, tokens: &[String]) -> Option<String> {
        match param {
            "personal" => Some(self.personal(tokens).to_string()),
            "length" => Some(self.length(tokens).to_string()),
            "theme" => Some(self.theme(tokens)),
            "descriptive" => Some(self.descriptive(tokens).to_string()),
            _ => None,
        }
    }

    /// Full label set for one sentence given its review's meta-data labels.
    pub fn label_sentence(
        &self,
        tokens: &[String],
        professional: &str,
        sentiment: &str,
    ) -> StyleAssignment {
        StyleAssignment::from_pairs([
            ("professional", professional.to_string()),
            ("personal", self.personal(tokens).to_string()),
            ("length", self.length(tokens).to_string()),
            ("descriptive", self.descriptive(tokens).to_string()),
            ("sentiment", sentiment.to_string()),
            ("theme", self.theme(tokens)),
        ])
    }

    /// Split and label one review, keeping only the schema's parameters.
    pub fn annotate_review(
        &self,
        review: &RawReview,
        schema: &ParameterSchema,
    ) -> Result<Vec<AnnotatedSentence>, CorpusError> {
        let professional = annotate_professional(review);
        let sentiment = annotate_sentiment(review.score)?;
        let mut out = Vec::new();
        for tokens in split_sentences(&review.text) {
            let mut labels = self.label_sentence(&tokens, professional, sentiment);
            restrict_to_schema(&mut labels, schema)?;
            out.push(AnnotatedSentence {
                tokens,
                labels,
                source_review: review.review_id.clone(),
            });
        }
        Ok(out)
    }
}

fn restrict_to_schema(labels: &mut StyleAssignment, schema: &ParameterSchema) -> Result<(), CorpusError> {
    for p in schema.parameters() {
        if labels.get(&p.name).is_none() {
            return Err(CorpusError::NoAnnotator(p.name.clone()));
        }
    }
    let extra: Vec<String> = labels
        .iter()
        .filter(|(k, _)| schema.parameter(k).is_none())
        .map(|(k, _)| k.to_string())
        .collect();
    for k in extra {
        labels.remove(&k);
    }
    schema.validate(labels)?;
    Ok(())
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub sentences: Vec<AnnotatedSentence>,
    /// Records skipped in non-strict mode, with their line numbers.
    pub skipped: Vec<(usize, String)>,
}

fn parse_review(line: &str) -> Result<RawReview, String> {
    let r: RawReview = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if r.text.trim().is_empty() {
        return Err("empty review text".into());
    }
    if let Some(s) = r.score {
        if !(0.0..=5.0).contains(&s) {
            return Err(format!("score {s} outside [0, 5]"));
        }
    }
    Ok(r)
}

/// Read one JSON review per line and annotate every sentence. With `strict`,
/// the first bad record aborts; otherwise it is skipped and reported.
pub fn ingest_reader<R: BufRead>(
    reader: R,
    schema: &ParameterSchema,
    annotators: &Annotators,
    strict: bool,
) -> Result<IngestReport, CorpusError> {
    let mut report = IngestReport::default();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = n + 1;
        let review = match parse_review(&line) {
            Ok(r) => r,
            Err(message) if strict => return Err(CorpusError::Record { line: lineno, message }),
            Err(message) => {
                report.skipped.push((lineno, message));
                continue;
            }
        };
        report.sentences.extend(annotators.annotate_review(&review, schema)?);
    }
    Ok(report)
}

pub fn ingest(
    path: &Path,
    schema: &ParameterSchema,
    annotators: &Annotators,
    strict: bool,
) -> Result<IngestReport, CorpusError> {
    ingest_reader(BufReader::new(File::open(path)?), schema, annotators, strict)
}

pub fn read_annotated(path: &Path) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: AnnotatedSentence = serde_json::from_str(&line).map_err(|e| CorpusError::Record {
            line: n + 1,
            message: e.to_string(),
        })?;
        if s.tokens.is_empty() {
            return Err(CorpusError::Record { line: n + 1, message: "sentence has no tokens".into() });
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_annotated(path: &Path, corpus: &[AnnotatedSentence]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in corpus {
        serde_json::to_writer(&mut w, s).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueCount {
    pub value: String,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterStats {
    pub parameter: String,
    pub values: Vec<ValueCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub parameters: Vec<ParameterStats>,
}

/// Per-parameter value distribution in schema order.
pub fn corpus_stats(corpus: &[AnnotatedSentence], schema: &ParameterSchema) -> CorpusStats {
    if corpus.is_empty() {
        return CorpusStats { sentences: 0, parameters: Vec::new() };
    }
    let n = corpus.len() as f64;
    let parameters = schema
        .parameters()
        .iter()
        .map(|p| {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for s in corpus {
                if let Some(v) = s.labels.get(&p.name) {
                    *counts.entry(v).or_default() += 1;
                }
            }
            let values = p
                .values
                .iter()
                .map(|v| {
                    let count = counts.get(v.as_str()).copied().unwrap_or(0);
                    ValueCount { value: v.clone(), count, fraction: count as f64 / n }
                })
                .collect();
            ParameterStats { parameter: p.name.clone(), values }
        })
        .collect();
    CorpusStats { sentences: corpus.len(), parameters }
}

impl std::fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "sentences: {}", self.sentences)?;
        for p in &self.parameters {
            writeln!(f, "{}", p.parameter)?;
            for v in &p.values {
                writeln!(f, "  {:<12} {:>9} {:>7.2}%", v.value, v.count, 100.0 * v.fraction)?;
            }
        }
        Ok(())
    }
}
