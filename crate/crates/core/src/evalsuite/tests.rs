use super::*;
use crate::bpe::EOS_ID;
use crate::model::Weights;
use crate::schema::default_schema;

fn labels(pairs: &[(&str, &str)]) -> StyleAssignment {
    let mut a = StyleAssignment::from_pairs([
        ("professional", "false"),
        ("personal", "false"),
        ("length", "<=10"),
        ("descriptive", "false"),
        ("sentiment", "none"),
        ("theme", "other"),
    ]);
    for (k, v) in pairs {
        a.set(k, v);
    }
    a
}

fn sentence(text: &str, pairs: &[(&str, &str)]) -> AnnotatedSentence {
    AnnotatedSentence {
        tokens: text.split_whitespace().map(String::from).collect(),
        labels: labels(pairs),
        source_review: String::new(),
    }
}

fn generated(text: &str, pairs: &[(&str, &str)]) -> GeneratedSentence {
    GeneratedSentence {
        tokens: text.split_whitespace().map(String::from).collect(),
        ids: Vec::new(),
        log_probability: -1.0,
        assignment: labels(pairs),
    }
}

fn bpe_for(corpus: &[AnnotatedSentence]) -> BpeModel {
    let counts = crate::bpe::word_counts(corpus.iter().map(|s| s.tokens.as_slice()));
    BpeModel::learn(&counts, 40).unwrap()
}

#[test]
fn perplexity_oracles() {
    let corpus = vec![sentence("ab ba", &[]), sentence("ba", &[])];
    let bpe = bpe_for(&corpus);
    let v = bpe.vocab_size();
    let cfg = ModelConfig::with_dims(v, default_schema(), 3, 4, 4);

    let uniform = LanguageModel::new(cfg.clone(), Weights::<f64>::zeros(&cfg));
    assert!((perplexity(&uniform, &bpe, &corpus, true).unwrap() - v as f64).abs() < 1e-9);

    // Output bias only: every step predicts softmax(b_out) regardless of input.
    let mut w = Weights::<f64>::zeros(&cfg);
    for (i, b) in w.b_out.iter_mut().enumerate() {
        *b = 0.1 * i as f64;
    }
    let z: f64 = (0..v).map(|i| (0.1 * i as f64).exp()).sum();
    let logp = |id: u32| 0.1 * id as f64 - z.ln();
    let m = LanguageModel::new(cfg.clone(), w);
    let mut nll = 0.0;
    let mut tokens = 0;
    for s in &corpus {
        for id in bpe.encode(&s.tokens).into_iter().chain([EOS_ID]) {
            nll -= logp(id);
            tokens += 1;
        }
    }
    let expect = (nll / tokens as f64).exp();
    assert!((perplexity(&m, &bpe, &corpus, true).unwrap() - expect).abs() < 1e-9);

    // Certain of EOS on empty sentences.
    let mut w = Weights::<f64>::zeros(&cfg);
    w.b_out[EOS_ID as usize] = 800.0;
    let perfect = LanguageModel::new(cfg.clone(), w);
    let empty = vec![sentence("", &[]), sentence("", &[])];
    assert!((perplexity(&perfect, &bpe, &empty, true).unwrap() - 1.0).abs() < 1e-12);

    assert!(matches!(perplexity(&uniform, &bpe, &corpus, false), Err(EvalError::NeedsAssignments)));
    assert!(matches!(perplexity(&uniform, &bpe, &[], true), Err(EvalError::EmptySet)));
    let uc = cfg.clone().unconditioned();
    let u = LanguageModel::new(uc.clone(), Weights::<f64>::zeros(&uc));
    assert!((perplexity(&u, &bpe, &corpus, false).unwrap() - v as f64).abs() < 1e-9);
}

#[test]
fn swaps_and_flip_involution() {
    let schema = default_schema();
    let m = swap_map(&schema, "personal").unwrap();
    assert_eq!(m["true"], "false");
    assert_eq!(m["false"], "true");
    let s = swap_map(&schema, "sentiment").unwrap();
    assert_eq!(s["positive"], "negative");
    assert_eq!(s["negative"], "positive");
    assert_eq!(s["neutral"], "neutral");
    assert_eq!(s["none"], "none");
    assert!(matches!(swap_map(&schema, "length"), Err(EvalError::NoSwap(_))));
    assert!(matches!(swap_map(&schema, "theme"), Err(EvalError::NoSwap(_))));
    assert!(matches!(swap_map(&schema, "mood"), Err(EvalError::UnknownParameter(_))));

    let corpus = vec![
        sentence("I liked it", &[("personal", "true"), ("sentiment", "positive")]),
        sentence("it was fine", &[("sentiment", "neutral")]),
    ];
    let once = flip_labels(&corpus, "sentiment", &s);
    assert_eq!(once[0].labels.get("sentiment"), Some("negative"));
    assert_eq!(once[1].labels.get("sentiment"), Some("neutral"));
    assert_eq!(once[0].labels.get("personal"), Some("true"));
    assert_eq!(flip_labels(&once, "sentiment", &s), corpus);

    let bpe = bpe_for(&corpus);
    let cfg = ModelConfig::with_dims(bpe.vocab_size(), schema.clone(), 3, 4, 4);
    let model = LanguageModel::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let r = flip_eval(&model, &bpe, &corpus, "personal").unwrap();
    assert_eq!(r.changed, 2);
    let back = flip_eval(&model, &bpe, &flip_labels(&corpus, "personal", &m), "personal").unwrap();
    assert!((back.flipped - r.correct).abs() < 1e-12);
    assert!(flip_eval(&model, &bpe, &corpus, "length").is_err());
}

#[test]
fn length_bins_parse() {
    assert_eq!(parse_length_bin("<=10"), Some((0, Some(10))));
    assert_eq!(parse_length_bin("11-20"), Some((11, Some(20))));
    assert_eq!(parse_length_bin(">40"), Some((41, None)));
    assert_eq!(parse_length_bin("long"), None);
}

#[test]
fn property_report_hand_counts() {
    let ann = Annotators::default();
    let schema = default_schema();
    let mut set: Vec<GeneratedSentence> =
        (0..9).map(|_| generated("I saw the plot twist .", &[("personal", "true"), ("theme", "plot")])).collect();
    set.push(generated("we saw the plot twist .", &[("personal", "true"), ("theme", "plot")]));
    let r = property_report(&set, 2, &ann, &schema).unwrap();
    assert!((r.personal_pct("true").unwrap() - 90.0).abs() < 1e-9);
    assert_eq!(r.personal_pct("false"), None);
    let theme = r.theme.as_ref().unwrap();
    assert_eq!(theme.rows.len(), 1);
    assert!((theme.diagonal("plot").unwrap() - 100.0).abs() < 1e-9);
    let b = r.length_bin("<=10").unwrap();
    assert_eq!((b.count, b.min, b.max), (10, 6, 6));
    assert_eq!(b.deviation_pct, 0.0);
    assert!(property_report(&[], 2, &ann, &schema).is_err());
}

#[test]
fn deviation_uses_margin_and_rows_sum_to_100() {
    let ann = Annotators::default();
    let schema = default_schema();
    let words = |n: usize| vec!["x"; n].join(" ");
    let set = vec![
        generated(&words(9), &[("length", "11-20")]),  // 2 short: within margin
        generated(&words(8), &[("length", "11-20")]),  // 3 short: deviates
        generated(&words(22), &[("length", "11-20")]), // 2 long: within margin
        generated(&words(15), &[("length", "11-20")]),
        generated(&words(38), &[("length", ">40")]),   // 3 short of 41: deviates
        generated(&words(39), &[("length", ">40"), ("theme", "acting")]),
        generated("the cast was good .", &[("theme", "acting")]),
        generated("the actor and the plot .", &[("theme", "acting")]),
    ];
    let r = property_report(&set, 2, &ann, &schema).unwrap();
    let b = r.length_bin("11-20").unwrap();
    assert!((b.deviation_pct - 25.0).abs() < 1e-9);
    assert!((b.avg - 13.5).abs() < 1e-9);
    assert!((r.length_bin(">40").unwrap().deviation_pct - 50.0).abs() < 1e-9);
    for row in &r.theme.as_ref().unwrap().rows {
        assert!((row.pct.iter().sum::<f64>() - 100.0).abs() < 0.1);
    }
    let acting = r.theme.as_ref().unwrap().rows.iter().find(|x| x.requested == "acting").unwrap();
    assert_eq!(acting.count, 3);
}

#[test]
fn full_compliance_set() {
    let ann = Annotators::default();
    let schema = default_schema();
    let set = vec![
        generated("my brilliant , beautiful , stunning film .", &[("personal", "true"), ("descriptive", "true")]),
        generated("we went home after the show .", &[("personal", "false")]),
    ];
    let r = property_report(&set, 2, &ann, &schema).unwrap();
    assert_eq!(r.personal_pct("true"), Some(100.0));
    assert_eq!(r.personal_pct("false"), Some(100.0));
    assert_eq!(r.descriptive_pct("true"), Some(100.0));
    assert_eq!(r.descriptive_pct("false"), Some(100.0));
    assert!(r.length.iter().all(|b| b.deviation_pct == 0.0));
    assert_eq!(compliance(&set, "personal", &ann), Some(100.0));
    assert_eq!(compliance(&set, "professional", &ann), None);
}

#[test]
fn random_assignments_keep_fixed_values() {
    let schema = default_schema();
    let fixed = StyleAssignment::from_pairs([("theme", "plot"), ("personal", "true")]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let all = random_assignments(&schema, &fixed, 200, &mut rng);
    assert!(all.iter().all(|a| a.matches(&fixed) && schema.validate(a).is_ok()));
    let lengths: std::collections::BTreeSet<_> = all.iter().map(|a| a.get("length").unwrap().to_string()).collect();
    assert_eq!(lengths.len(), 4);
}

#[test]
fn holdout_covering_a_value_is_rejected() {
    let corpus = vec![
        sentence("I liked it", &[("personal", "true"), ("theme", "plot")]),
        sentence("it was fine", &[("theme", "plot")]),
    ];
    let bpe = bpe_for(&corpus);
    let cfg = ModelConfig::with_dims(bpe.vocab_size(), default_schema(), 3, 4, 4);
    let reference = LanguageModel::<f32>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1));
    let holdout = SubsetFilter::parse("personal=true,theme=plot", &cfg.schema).unwrap();
    let err = generalization_experiment(
        &corpus,
        &[],
        &bpe,
        &cfg,
        &holdout,
        &TrainConfig { epochs: 1, ..TrainConfig::default() },
        &reference,
        4,
        &SamplerConfig::default(),
        &Annotators::default(),
    );
    assert!(matches!(err, Err(EvalError::HoldoutCoversValue { ref param, .. }) if param == "personal"));
}

#[test]
fn harder_parameter_is_lowest_heldout() {
    let mut compliance = BTreeMap::new();
    compliance.insert("personal".to_string(), (Some(99.0), Some(100.0)));
    compliance.insert("theme".to_string(), (Some(80.0), Some(95.0)));
    let r = GeneralizationReport { holdout: "x".into(), removed: 1, samples: 10, compliance };
    assert_eq!(r.harder_parameter(), Some("theme"));
}
