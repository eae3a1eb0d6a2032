//! Synthetic labelled corpus whose text is built from the labels, so the
//! corpus annotators recover personal, length, theme and descriptive
//! exactly. Other parameters are realized by marker words, or not at all
//! when a value has no markers (label-independent text).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::{bundled_adjectives, is_personal_token, AnnotatedSentence, Annotators, OTHER_THEME};
use crate::schema::{ParameterSchema, StyleAssignment};

const TEXT_PARAMS: [&str; 4] = ["personal", "length", "descriptive", "theme"];

const FILLERS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "it", "is", "was", "this", "that", "with", "for", "as", "on", "at",
    "but", "by", "from", "there", "they", "he", "she", "we", "you", "his", "her", "their", "its", "one", "all",
    "so", "very", "just", "about", "into", "than", "then", "when", "what", "who", "which", "some", "more",
    "most", "also", "even", "only", "much", "out", "up", "time", "way", "people", "thing", "things", "part",
    "year", "years", "night", "day", "home", "house", "city", "town", "world", "life", "man", "woman",
    "family", "friend", "friends", "kids", "money", "car", "road", "room", "door", "window", "water", "fire",
    "theater", "seat", "ticket", "popcorn", "weekend", "evening", "hour", "minutes", "moment", "point",
    "reason", "idea", "question", "answer", "chance", "place", "side", "end", "start", "half", "rest", "lot",
    "bit", "kind", "sort", "number", "while", "again", "ever", "never", "still", "here", "now", "yet", "too",
    "be", "been", "have", "has", "had", "do", "does", "did", "can", "could", "would", "should", "will",
    "make", "makes", "made", "see", "seen", "saw", "go", "goes", "went", "get", "gets", "got", "come",
    "comes", "came", "take", "takes", "took", "give", "gives", "gave", "know", "think", "feel", "watch",
    "watched", "watching", "wait", "waited", "walk", "walked", "leave", "left", "keep", "kept", "try",
];

/// Generator settings. Parameter names `personal`, `length`, `descriptive`
/// and `theme` are realized through the annotators' own rules; every other
/// schema parameter through `markers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub size: usize,
    pub seed: u64,
    /// Per-parameter value weights in schema order; missing means uniform.
    pub value_weights: BTreeMap<String, Vec<f64>>,
    /// Inclusive sentence-length range (tokens, final period included) per
    /// length value.
    pub length_ranges: BTreeMap<String, (usize, usize)>,
    /// parameter -> value -> marker words; one is inserted per sentence.
    pub markers: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    pub personal_openers: Vec<String>,
    /// Inclusive range of theme words placed in a themed sentence.
    pub theme_words: (usize, usize),
    /// Adjective share placed in descriptive sentences (rounded up).
    pub descriptive_ratio: f64,
    pub adjectives: Vec<String>,
    pub fillers: Vec<String>,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl Default for SynthSpec {
    fn default() -> Self {
        let mut value_weights = BTreeMap::new();
        value_weights.insert("length".to_string(), vec![0.3, 0.35, 0.25, 0.1]);
        let length_ranges = [("<=10", (4, 10)), ("11-20", (11, 20)), ("21-40", (21, 40)), (">40", (41, 56))]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let mut professional = BTreeMap::new();
        professional.insert("true".to_string(), owned(&["furthermore", "nevertheless", "consequently", "notably"]));
        professional.insert("false".to_string(), owned(&["lol", "omg", "gonna", "totally"]));
        let mut markers = BTreeMap::new();
        markers.insert("professional".to_string(), professional);
        SynthSpec {
            size: 1000,
            seed: 0,
            value_weights,
            length_ranges,
            markers,
            personal_openers: owned(&["I", "my"]),
            theme_words: (2, 2),
            descriptive_ratio: 0.45,
            adjectives: bundled_adjectives().map(String::from).collect(),
            fillers: owned(FILLERS),
        }
    }
}

fn bad(msg: impl Into<String>) -> EvalError {
    EvalError::InconsistentSpec(msg.into())
}

/// Word pools after removing anything that would disturb another label.
struct Pools {
    themes: BTreeMap<String, Vec<String>>,
    adjectives: Vec<String>,
    fillers: Vec<String>,
}

fn pools(spec: &SynthSpec, schema: &ParameterSchema, ann: &Annotators) -> Result<Pools, EvalError> {
    let is_adj = |w: &str| ann.tagger.is_adjective(&[w.to_string()], 0);
    let marker_words: BTreeSet<&str> =
        spec.markers.values().flat_map(|m| m.values()).flatten().map(String::as_str).collect();

    let theme_param = schema.parameter("theme").ok_or_else(|| bad("schema has no `theme` parameter"))?;
    let mut themes = BTreeMap::new();
    for value in &theme_param.values {
        if value == OTHER_THEME {
            continue;
        }
        let words = ann.themes.words(value).ok_or_else(|| bad(format!("theme `{value}` has no word list")))?;
        let mut usable: Vec<String> = words
            .iter()
            .filter(|w| {
                let single = [w.to_string()];
                ann.themes.hit_counts(&single).iter().sum::<usize>() == 1
                    && !is_adj(w)
                    && !is_personal_token(w)
                    && !marker_words.contains(w.as_str())
            })
            .cloned()
            .collect();
        usable.sort();
        if usable.is_empty() {
            return Err(bad(format!("theme `{value}` has no usable words")));
        }
        themes.insert(value.clone(), usable);
    }

    let mut adjectives: Vec<String> = spec
        .adjectives
        .iter()
        .filter(|w| is_adj(w) && !ann.themes.contains(w) && !is_personal_token(w) && !marker_words.contains(w.as_str()))
        .cloned()
        .collect();
    adjectives.sort();
    adjectives.dedup();
    let mut fillers: Vec<String> = spec
        .fillers
        .iter()
        .filter(|w| !is_adj(w) && !ann.themes.contains(w) && !is_personal_token(w) && !marker_words.contains(w.as_str()))
        .cloned()
        .collect();
    fillers.dedup();
    if adjectives.is_empty() {
        return Err(bad("no usable adjectives"));
    }
    if fillers.is_empty() {
        return Err(bad("no usable filler words"));
    }
    for w in spec.personal_openers.iter() {
        if !is_personal_token(w) {
            return Err(bad(format!("personal opener `{w}` is not a personal token")));
        }
    }
    for (param, per_value) in &spec.markers {
        let mut seen = BTreeSet::new();
        for words in per_value.values() {
            for w in words {
                if !seen.insert(w) {
                    return Err(bad(format!("marker `{w}` used by two values of `{param}`")));
                }
                if is_adj(w) || ann.themes.contains(w) || is_personal_token(w) {
                    return Err(bad(format!("marker `{w}` would change another label")));
                }
            }
        }
    }
    Ok(Pools { themes, adjectives, fillers })
}

fn draw_value<R: Rng>(values: &[String], weights: Option<&Vec<f64>>, rng: &mut R) -> Result<String, EvalError> {
    match weights {
        None => Ok(values.choose(rng).expect("parameters have values").clone()),
        Some(w) => {
            if w.len() != values.len() || w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(bad("value weights must be non-negative, one per value"));
            }
            let u = rng.random::<f64>() * w.iter().sum::<f64>();
            let mut acc = 0.0;
            for (v, x) in values.iter().zip(w) {
                acc += x;
                if u < acc {
                    return Ok(v.clone());
                }
            }
            Ok(values.last().unwrap().clone())
        }
    }
}

/// Build `spec.size` sentences. Every sentence is checked against the
/// annotators before being emitted.
pub fn synth_corpus(
    spec: &SynthSpec,
    schema: &ParameterSchema,
    ann: &Annotators,
) -> Result<Vec<AnnotatedSentence>, EvalError> {
    for p in TEXT_PARAMS {
        if schema.parameter(p).is_none() {
            return Err(bad(format!("schema has no `{p}` parameter")));
        }
    }
    if !(spec.descriptive_ratio > 0.0 && spec.descriptive_ratio <= 1.0) {
        return Err(bad("descriptive_ratio must be in (0, 1]"));
    }
    if spec.theme_words.0 == 0 || spec.theme_words.0 > spec.theme_words.1 {
        return Err(bad("theme word range must be 1 <= min <= max"));
    }
    if spec.personal_openers.is_empty() {
        return Err(bad("no personal openers"));
    }
    let pools = pools(spec, schema, ann)?;
    for v in &schema.parameter("length").unwrap().values {
        match spec.length_ranges.get(v) {
            Some((lo, hi)) if lo <= hi && *lo >= 1 && ann.length(&vec![String::new(); *lo]) == v && ann.length(&vec![String::new(); *hi]) == v => {}
            _ => return Err(bad(format!("length value `{v}` needs a range inside its bin"))),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let mut labels = StyleAssignment::new();
        for p in schema.parameters() {
            labels.set(&p.name, &draw_value(&p.values, spec.value_weights.get(&p.name), &mut rng)?);
        }
        let tokens = realize(spec, &pools, schema, &labels, &mut rng)?;
        for p in TEXT_PARAMS {
            let got = ann.realized(p, &tokens).expect("text parameter");
            if Some(got.as_str()) != labels.get(p) {
                return Err(bad(format!("sentence {i}: `{p}` re-annotates as `{got}`, not `{}`", labels.get(p).unwrap())));
            }
        }
        out.push(AnnotatedSentence { tokens, labels, source_review: format!("synth-{i}") });
    }
    Ok(out)
}

/// Skewed draw: the first words of a pool dominate, as in natural text.
fn zipf_pick<'a, R: Rng>(words: &'a [String], rng: &mut R) -> &'a String {
    let r = rng.random::<f64>().powi(2);
    &words[(r * words.len() as f64) as usize]
}

fn realize<R: Rng>(
    spec: &SynthSpec,
    pools: &Pools,
    schema: &ParameterSchema,
    labels: &StyleAssignment,
    rng: &mut R,
) -> Result<Vec<String>, EvalError> {
    let get = |p: &str| labels.get(p).unwrap();
    let opener = (get("personal") == "true").then(|| spec.personal_openers.choose(rng).unwrap().clone());
    let mut content: Vec<String> = Vec::new();
    for p in schema.parameters() {
        if let Some(words) = spec.markers.get(&p.name).and_then(|m| m.get(get(&p.name))) {
            if let Some(w) = words.choose(rng) {
                content.push(w.clone());
            }
        }
    }
    let theme = get("theme");
    if theme != OTHER_THEME {
        let n = rng.random_range(spec.theme_words.0..=spec.theme_words.1);
        let words = &pools.themes[theme];
        for _ in 0..n {
            content.push(words.choose(rng).unwrap().clone());
        }
    }

    let (lo, hi) = spec.length_ranges[get("length")];
    let fixed = 1 + opener.is_some() as usize + content.len();
    let descriptive = get("descriptive") == "true";
    let adjectives_for = |n: usize| if descriptive { (spec.descriptive_ratio * n as f64).ceil() as usize } else { 0 };
    let mut n = rng.random_range(lo..=hi);
    while fixed + adjectives_for(n) > n {
        n += 1;
    }
    if n > hi {
        return Err(bad(format!("labels {labels} cannot fit in length range {lo}-{hi}")));
    }
    for _ in 0..adjectives_for(n) {
        content.push(pools.adjectives.choose(rng).unwrap().clone());
    }
    while content.len() + 1 + (opener.is_some() as usize) < n {
        content.push(zipf_pick(&pools.fillers, rng).clone());
    }
    content.shuffle(rng);
    let mut tokens = Vec::with_capacity(n);
    tokens.extend(opener);
    tokens.extend(content);
    tokens.push(".".to_string());
    Ok(tokens)
}

/// Consecutive train/dev/test split: the last `dev + test` sentences are held out.
pub fn split_corpus(
    corpus: &[AnnotatedSentence],
    dev: usize,
    test: usize,
) -> Result<(Vec<AnnotatedSentence>, Vec<AnnotatedSentence>, Vec<AnnotatedSentence>), EvalError> {
    if dev + test >= corpus.len() {
        return Err(bad("split leaves no training sentences"));
    }
    let cut = corpus.len() - dev - test;
    Ok((corpus[..cut].to_vec(), corpus[cut..cut + dev].to_vec(), corpus[cut + dev..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::default_schema;

    #[test]
    fn reannotation_matches_and_seed_fixes_corpus() {
        let ann = Annotators::default();
        let spec = SynthSpec { size: 1000, seed: 3, ..SynthSpec::default() };
        let a = synth_corpus(&spec, &default_schema(), &ann).unwrap();
        let b = synth_corpus(&spec, &default_schema(), &ann).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        for s in &a {
            for p in TEXT_PARAMS {
                assert_eq!(ann.realized(p, &s.tokens).as_deref(), s.labels.get(p));
            }
            if s.labels.get("personal") == Some("true") {
                assert!(s.tokens[0] == "I" || s.tokens[0] == "my");
            }
            let prof = s.labels.get("professional").unwrap();
            let marks = &spec.markers["professional"][prof];
            assert!(s.tokens.iter().any(|t| marks.contains(t)));
        }
        let c = synth_corpus(&SynthSpec { seed: 4, ..spec }, &default_schema(), &ann).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bin_weights_are_respected() {
        let ann = Annotators::default();
        let spec = SynthSpec { size: 2000, ..SynthSpec::default() };
        let corpus = synth_corpus(&spec, &default_schema(), &ann).unwrap();
        let long = corpus.iter().filter(|s| s.labels.get("length") == Some(">40")).count();
        assert!((120..280).contains(&long), "{long}");
        let (_, max) = spec.length_ranges[">40"];
        assert!(corpus.iter().all(|s| s.tokens.len() <= max));
    }

    #[test]
    fn inconsistent_specs_are_rejected() {
        let ann = Annotators::default();
        let schema = default_schema();
        let mut spec = SynthSpec::default();
        spec.length_ranges.insert("<=10".into(), (2, 3));
        assert!(matches!(synth_corpus(&spec, &schema, &ann), Err(EvalError::InconsistentSpec(_))));

        let mut spec = SynthSpec::default();
        spec.length_ranges.insert("<=10".into(), (8, 14));
        assert!(synth_corpus(&spec, &schema, &ann).is_err());

        let mut spec = SynthSpec::default();
        spec.markers.get_mut("professional").unwrap().get_mut("false").unwrap().push("notably".into());
        assert!(synth_corpus(&spec, &schema, &ann).is_err());

        let spec = SynthSpec { fillers: vec!["great".into(), "plot".into()], ..SynthSpec::default() };
        assert!(synth_corpus(&spec, &schema, &ann).is_err());
    }

    #[test]
    fn split_sizes() {
        let ann = Annotators::default();
        let corpus = synth_corpus(&SynthSpec { size: 50, ..SynthSpec::default() }, &default_schema(), &ann).unwrap();
        let (tr, dv, te) = split_corpus(&corpus, 5, 10).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (35, 5, 10));
        assert_eq!(te.last(), corpus.last());
        assert!(split_corpus(&corpus, 25, 25).is_err());
    }
}
