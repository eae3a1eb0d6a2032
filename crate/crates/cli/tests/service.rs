use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use styledlm::bpe::{word_counts, BpeModel};
use styledlm::corpus::Annotators;
use styledlm::evalsuite::{synth_corpus, SynthSpec};
use styledlm::model::{Checkpoint, LanguageModel, ModelConfig};
use styledlm::schema::default_schema;
use styledlm::trainer::{train, TrainConfig};
use styledlm_cli::service::{router, AppState, GenerationResponse, ScoreResponse};

fn untrained() -> Checkpoint {
    let corpus = synth_corpus(&SynthSpec { size: 60, ..SynthSpec::default() }, &default_schema(), &Annotators::default())
        .unwrap();
    let bpe = BpeModel::learn(&word_counts(corpus.iter().map(|s| s.tokens.as_slice())), 300).unwrap();
    let cfg = ModelConfig::with_dims(bpe.vocab_size(), default_schema(), 8, 16, 16);
    Checkpoint::new(LanguageModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)), bpe)
}

/// Small model trained long enough to pick up the personal opener.
fn trained() -> &'static Checkpoint {
    static CK: OnceLock<Checkpoint> = OnceLock::new();
    CK.get_or_init(|| {
        let spec = SynthSpec { size: 600, seed: 5, ..SynthSpec::default() };
        let corpus = synth_corpus(&spec, &default_schema(), &Annotators::default()).unwrap();
        let bpe = BpeModel::learn(&word_counts(corpus.iter().map(|s| s.tokens.as_slice())), 400).unwrap();
        let cfg = ModelConfig::with_dims(bpe.vocab_size(), default_schema(), 16, 32, 32);
        let mut tc = TrainConfig { epochs: 6, batch_size: 8, ..TrainConfig::default() };
        tc.adam.lr = 5e-3;
        let out = train(&corpus, &[], &bpe, &cfg, &tc).unwrap();
        Checkpoint::new(out.best.model, bpe)
    })
}

async fn call(state: AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let body = match body {
        Some(v) => Body::from(serde_json::to_vec(&v).unwrap()),
        None => Body::empty(),
    };
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body)
        .unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn assignment() -> Value {
    json!({
        "professional": "false",
        "personal": "true",
        "length": "11-20",
        "descriptive": "false",
        "sentiment": "positive",
        "theme": "plot"
    })
}

#[tokio::test]
async fn generate_returns_count_sentences_and_echoes_config() {
    let state = AppState::with_model(untrained());
    let (status, body) =
        call(state, "POST", "/generate", Some(json!({"assignment": assignment(), "count": 3, "seed": 11}))).await;
    assert_eq!(status, StatusCode::OK);
    let r: GenerationResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.sentences.len(), 3);
    assert_eq!(r.config.count, 3);
    assert_eq!(r.config.seed, 11);
    assert_eq!(r.config.temperature, 0.6);
    assert_eq!(r.model.len(), 12);
    assert!(r.sentences.iter().all(|s| s.logprob <= 0.0));
}

#[tokio::test]
async fn fixed_seed_gives_identical_bodies() {
    let state = AppState::with_model(untrained());
    let req = json!({"assignment": assignment(), "count": 5, "seed": 7, "temperature": 0.9});
    let (_, a) = call(state.clone(), "POST", "/generate", Some(req.clone())).await;
    let (_, b) = call(state.clone(), "POST", "/generate", Some(req)).await;
    assert_eq!(a, b);
    let (_, c) = call(state, "POST", "/generate", Some(json!({"assignment": assignment(), "count": 5, "seed": 8, "temperature": 0.9}))).await;
    assert_ne!(a, c);
}

#[tokio::test]
async fn unseeded_requests_report_the_seed_they_used() {
    let state = AppState::with_model(untrained());
    let (_, first) = call(state.clone(), "POST", "/generate", Some(json!({"assignment": assignment(), "count": 2}))).await;
    let r: GenerationResponse = serde_json::from_slice(&first).unwrap();
    let replay = json!({"assignment": assignment(), "count": 2, "seed": r.config.seed});
    let (_, again) = call(state, "POST", "/generate", Some(replay)).await;
    let r2: GenerationResponse = serde_json::from_slice(&again).unwrap();
    assert_eq!(r.sentences, r2.sentences);
}

#[tokio::test]
async fn invalid_requests_are_400_with_field() {
    let state = AppState::with_model(untrained());
    let mut bad = assignment();
    bad["sentiment"] = json!("great");
    let (status, body) = call(state.clone(), "POST", "/generate", Some(json!({"assignment": bad, "count": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(e["code"], "invalid_assignment");
    assert_eq!(e["field"], "assignment.sentiment");
    assert!(e["message"].as_str().unwrap().contains("great"));

    let mut missing = assignment();
    missing.as_object_mut().unwrap().remove("theme");
    let (status, body) = call(state.clone(), "POST", "/generate", Some(json!({"assignment": missing, "count": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["field"], "assignment.theme");

    for count in [0, 101] {
        let (status, body) = call(state.clone(), "POST", "/generate", Some(json!({"assignment": assignment(), "count": count}))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["field"], "count");
    }
    let (status, _) = call(
        state.clone(),
        "POST",
        "/generate",
        Some(json!({"assignment": assignment(), "count": 1, "temperature": 0.0})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    for uri in ["/generate", "/score"] {
        let (status, body) = call(state.clone(), "POST", uri, None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["code"], "empty_body");
        let req = Request::builder().method("POST").uri(uri).body(Body::from("{not json")).unwrap();
        let resp = router(state.clone()).oneshot(req).await.unwrap();
        assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    }

    let (status, body) = call(state, "POST", "/score", Some(json!({"text": "   ", "assignment": assignment()}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["field"], "text");
}

#[tokio::test]
async fn no_model_means_503_but_schema_and_health_answer() {
    let state = AppState::default();
    let (status, _) = call(state.clone(), "POST", "/generate", Some(json!({"assignment": assignment(), "count": 1}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(state.clone(), "POST", "/score", Some(json!({"text": "a", "assignment": assignment()}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, body) = call(state.clone(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["model_loaded"], false);
    let (status, _) = call(state, "GET", "/schema", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn schema_lists_six_parameters_in_order_and_is_stable() {
    let state = AppState::with_model(untrained());
    let (_, a) = call(state.clone(), "GET", "/schema", None).await;
    let (_, b) = call(state, "GET", "/schema", None).await;
    assert_eq!(a, b);
    let doc: Value = serde_json::from_slice(&a).unwrap();
    let params = doc["parameters"].as_array().unwrap();
    let names: Vec<&str> = params.iter().map(|p| p["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["professional", "personal", "length", "descriptive", "sentiment", "theme"]);
    let theme = params[5]["values"].as_array().unwrap();
    assert!(theme.iter().any(|v| v == "other"));
}

#[tokio::test]
async fn score_perplexity_is_definitional() {
    let state = AppState::with_model(untrained());
    let (status, body) =
        call(state, "POST", "/score", Some(json!({"text": "the plot was good .", "assignment": assignment()}))).await;
    assert_eq!(status, StatusCode::OK);
    let r: ScoreResponse = serde_json::from_slice(&body).unwrap();
    assert!(r.logprob < 0.0);
    assert!(r.token_count >= 6);
    assert!((r.perplexity - (-r.logprob / r.token_count as f64).exp()).abs() < 1e-9 * r.perplexity);
}

#[tokio::test]
async fn own_assignment_scores_higher_than_flipped_on_average() {
    let state = AppState::with_model(trained().clone());
    let own = assignment();
    let mut flipped = own.clone();
    flipped["personal"] = json!("false");
    let (_, body) = call(state.clone(), "POST", "/generate", Some(json!({"assignment": own, "count": 40, "seed": 1}))).await;
    let r: GenerationResponse = serde_json::from_slice(&body).unwrap();
    let (mut sum_own, mut sum_flip) = (0.0, 0.0);
    for s in &r.sentences {
        for (a, sum) in [(&own, &mut sum_own), (&flipped, &mut sum_flip)] {
            let (_, b) = call(state.clone(), "POST", "/score", Some(json!({"text": s.text, "assignment": a}))).await;
            *sum += serde_json::from_slice::<ScoreResponse>(&b).unwrap().logprob;
        }
    }
    assert!(sum_own > sum_flip, "own {sum_own} flipped {sum_flip}");
}

#[tokio::test]
async fn concurrent_requests_are_individually_deterministic() {
    let state = AppState::with_model(untrained());
    let reqs: Vec<_> = (0..6u64)
        .map(|i| {
            let st = state.clone();
            tokio::spawn(async move {
                call(st, "POST", "/generate", Some(json!({"assignment": assignment(), "count": 2, "seed": i % 3}))).await.1
            })
        })
        .collect();
    let mut bodies = Vec::new();
    for r in reqs {
        bodies.push(r.await.unwrap());
    }
    for i in 0..3 {
        assert_eq!(bodies[i], bodies[i + 3]);
    }
}
