mod common;

use std::collections::HashMap;
use std::fs;
use std::sync::{Arc, Mutex};

use sce_core::client::{LlmClient, WireMessage};
use sce_core::metrics;
use sce_core::mock::{MockBackend, MockReply, MockRequest};
use sce_core::pipeline::{FixedClock, Pipeline, PipelineError};
use sce_core::store::{RecordStatus, RunStore};
use sce_core::task::{Label, Strategy};

fn run_to(path: &std::path::Path, config: &sce_core::pipeline::RunConfig) -> Arc<MockBackend> {
    let backend = Arc::new(common::scripted_backend());
    let client = common::client(backend.clone());
    let clock = FixedClock(1_700_000_000.0);
    Pipeline::new(config, &client, &clock).unwrap().run(&common::examples(), path).unwrap();
    backend
}

#[test]
fn scripted_run_produces_expected_records_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.jsonl");
    let backend = run_to(&path, &common::run_config());
    // 20 step-1, 18 step-2, 15 x 2 step-3
    assert_eq!(backend.calls(), 68);

    let store = RunStore::load(&path).unwrap();
    assert_eq!(store.records.len(), 20);
    let statuses: Vec<RecordStatus> = store.records.iter().map(|r| r.status).collect();
    assert_eq!(&statuses[..2], &[RecordStatus::Step1Unparseable; 2]);
    assert_eq!(&statuses[2..5], &[RecordStatus::Filtered; 3]);
    assert!(statuses[5..].iter().all(|s| *s == RecordStatus::Complete));
    for r in &store.records[..2] {
        assert!(r.target.is_none() && r.step2.is_none());
    }
    let with_calls = store.records.iter().filter(|r| r.step3_with.is_some()).count();
    let without_calls = store.records.iter().filter(|r| r.step3_without.is_some()).count();
    let kept = store.records.iter().filter(|r| r.kept()).count();
    assert_eq!((with_calls, without_calls, kept), (15, 15, 15));
    let r = &store.records[7];
    assert_eq!(r.target.as_ref().unwrap().value, Label::from("Negative"));
    assert_eq!(r.step3_with.as_ref().unwrap().conversation.len(), 5);
    assert_eq!(r.step3_without.as_ref().unwrap().conversation.len(), 1);

    let recs = &store.records;
    assert_eq!(metrics::gen_pct(recs).unwrap(), common::expected::GEN);
    assert_eq!(metrics::val_pct(recs, false).unwrap(), common::expected::VAL);
    assert_eq!(metrics::val_pct(recs, true).unwrap(), common::expected::VAL_C);
    assert!((metrics::ed_over_valid(recs, false).unwrap() - common::expected::ED).abs() < 1e-12);
    assert!((metrics::ed_over_valid(recs, true).unwrap() - common::expected::ED_C).abs() < 1e-12);
    assert_eq!(metrics::accuracy_pct(recs).unwrap(), common::expected::ACCURACY);
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    run_to(&a, &common::run_config());
    run_to(&b, &common::run_config());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn run_refuses_to_overwrite_a_store() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    run_to(&path, &common::run_config());
    let client = common::client(Arc::new(common::scripted_backend()));
    let config = common::run_config();
    let clock = FixedClock(0.0);
    let err = Pipeline::new(&config, &client, &clock).unwrap().run(&common::examples(), &path);
    assert!(matches!(err, Err(PipelineError::Store(_))));
}

#[test]
fn trial_counts_follow_temperature_and_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::run_config();
    config.temperature = 0.5;
    let path = dir.path().join("t05.jsonl");
    run_to(&path, &config);
    let store = RunStore::load(&path).unwrap();
    assert_eq!(store.records.len(), 100);
    for i in 0..common::N {
        assert_eq!(store.records.iter().filter(|r| r.example_index == i).count(), 5);
    }
    // Deterministic backend: each trial reproduces the T=0 metrics.
    assert_eq!(metrics::val_pct(&store.records, false).unwrap(), common::expected::VAL);
    config.strategy = Strategy::Cot;
    assert_eq!(config.effective_trials(), 3);
    config.temperature = 0.0;
    assert_eq!(config.effective_trials(), 1);
}

#[test]
fn resume_completes_an_interrupted_store() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.jsonl");
    run_to(&full, &common::run_config());
    let text = fs::read_to_string(&full).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    // Header plus 10 records, then half of the 11th line.
    let partial = dir.path().join("partial.jsonl");
    let mut cut: String = lines[..11].iter().map(|l| format!("{l}\n")).collect();
    cut.push_str(&lines[11][..lines[11].len() / 2]);
    fs::write(&partial, &cut).unwrap();

    let backend = Arc::new(common::scripted_backend());
    let client = common::client(backend.clone());
    let config = common::run_config();
    let clock = FixedClock(1_700_000_000.0);
    let pipeline = Pipeline::new(&config, &client, &clock).unwrap();
    let summary = pipeline.resume(&common::examples(), &partial).unwrap();
    assert_eq!(summary.skipped, 10);
    assert_eq!(summary.written, 10);
    assert_eq!(fs::read_to_string(&partial).unwrap(), text);

    // A finished store needs no calls.
    let before = backend.calls();
    let summary = pipeline.resume(&common::examples(), &partial).unwrap();
    assert_eq!((summary.written, summary.skipped), (0, 20));
    assert_eq!(backend.calls(), before);

    let mut changed = common::run_config();
    changed.temperature = 0.7;
    let pipeline = Pipeline::new(&changed, &client, &clock).unwrap();
    assert!(matches!(pipeline.resume(&common::examples(), &partial), Err(PipelineError::ConfigMismatch { .. })));
}

#[test]
fn transport_tuning_does_not_change_the_config_hash() {
    let a = common::run_config();
    let mut b = a.clone();
    b.backend.max_in_flight = 16;
    b.backend.request_timeout = 5.0;
    b.backend.max_retries = 9;
    assert_eq!(a.config_hash(), b.config_hash());
    b.seed += 1;
    assert_ne!(a.config_hash(), b.config_hash());
}

#[test]
fn backend_failures_mark_records_and_continue() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fail.jsonl");
    let backend = Arc::new(MockBackend::new(|_| MockReply::Status(500, "down".into())));
    let mut cfg = common::backend_config();
    cfg.max_retries = 1;
    let client = LlmClient::new(backend.clone(), cfg).unwrap();
    let config = common::run_config();
    let clock = FixedClock(0.0);
    let summary = Pipeline::new(&config, &client, &clock).unwrap().run(&common::examples(), &path).unwrap();
    assert_eq!(summary.failed, 20);
    assert_eq!(backend.calls(), 40);
    let store = RunStore::load(&path).unwrap();
    assert!(store.records.iter().all(|r| r.status == RecordStatus::Failed && r.error.is_some()));
}

#[test]
fn invalid_config_aborts_before_any_call() {
    let backend = Arc::new(common::scripted_backend());
    let client = common::client(backend.clone());
    let mut config = common::run_config();
    config.trials = Some(0);
    let clock = FixedClock(0.0);
    assert!(matches!(Pipeline::new(&config, &client, &clock), Err(PipelineError::Config(_))));
    config.trials = None;
    config.temperature = f64::NAN;
    assert!(Pipeline::new(&config, &client, &clock).is_err());
    assert_eq!(backend.calls(), 0);
}

#[test]
fn records_replay_through_a_mock_built_from_their_conversations() {
    let dir = tempfile::tempdir().unwrap();
    let original = dir.path().join("orig.jsonl");
    run_to(&original, &common::run_config());
    let store = RunStore::load(&original).unwrap();

    let mut table: HashMap<Vec<(String, String)>, String> = HashMap::new();
    let key = |c: &sce_core::prompts::Conversation| {
        c.messages().iter().map(|m| (format!("{:?}", m.role).to_lowercase(), m.content.clone())).collect::<Vec<_>>()
    };
    for r in &store.records {
        if let Some(s) = &r.step1 {
            table.insert(key(&s.conversation), s.raw.clone());
        }
        if let Some(s) = &r.step2 {
            table.insert(key(&s.conversation), s.raw.clone());
        }
        for s in [&r.step3_with, &r.step3_without].into_iter().flatten() {
            table.insert(key(&s.conversation), s.raw.clone());
        }
    }
    let replay = Arc::new(MockBackend::new(move |req| match req {
        MockRequest::Chat { request, .. } => {
            let k: Vec<(String, String)> =
                request.messages.iter().map(|m: &WireMessage| (m.role.clone(), m.content.clone())).collect();
            table.get(&k).map(|t| MockReply::text(t.clone())).unwrap_or(MockReply::Status(404, "unknown".into()))
        }
        MockRequest::Embed { .. } => MockReply::Status(404, "unknown".into()),
    }));
    let client = common::client(replay);
    let config = common::run_config();
    let clock = FixedClock(1_700_000_000.0);
    let replayed = dir.path().join("replay.jsonl");
    Pipeline::new(&config, &client, &clock).unwrap().run(&common::examples(), &replayed).unwrap();
    assert_eq!(fs::read(&original).unwrap(), fs::read(&replayed).unwrap());
}

#[test]
fn rationale_strategy_adds_a_turn_and_drops_missing_rationales() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let seen2 = seen.clone();
    let backend = Arc::new(MockBackend::new(move |req| {
        let MockRequest::Chat { request, .. } = req else { return MockReply::Status(404, String::new()) };
        let n = request.messages.len();
        seen2.lock().unwrap().push(n);
        let first = &request.messages[0].content;
        match n {
            1 if request.messages[0].content.ends_with("bad film") => MockReply::text("ANSWER: Negative"),
            1 => MockReply::text("ANSWER: Positive"),
            3 if first.contains("film 01") => MockReply::text("no list here"),
            3 => MockReply::text("RATIONALES:\n- so good"),
            5 => MockReply::text("ALTERED REVIEW: bad film"),
            7 => MockReply::text("ANSWER: Negative"),
            _ => MockReply::Status(400, String::new()),
        }
    }));
    let client = common::client(backend);
    let mut config = common::run_config();
    config.strategy = Strategy::RationaleBased;
    let clock = FixedClock(0.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rb.jsonl");
    let examples = common::examples()[..2].to_vec();
    Pipeline::new(&config, &client, &clock).unwrap().run(&examples, &path).unwrap();
    let store = RunStore::load(&path).unwrap();
    assert_eq!(store.records[0].status, RecordStatus::Complete);
    assert_eq!(store.records[0].rationale.as_ref().unwrap().lines, Some(vec!["- so good".to_string()]));
    assert_eq!(store.records[0].step3_with.as_ref().unwrap().conversation.len(), 7);
    assert_eq!(store.records[1].status, RecordStatus::NoRationale);
    assert!(store.records[1].step2.is_none());
    assert_eq!(metrics::gen_pct(&store.records).unwrap(), 100.0);
}

#[test]
fn metrics_ignore_record_order() {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::run_config();
    config.temperature = 0.5;
    let path = dir.path().join("s.jsonl");
    run_to(&path, &config);
    let store = RunStore::load(&path).unwrap();
    let baseline = metrics::score_records("m", config.task_id, config.strategy, 0.5, 5, &store.records);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let mut shuffled = store.records.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(metrics::score_records("m", config.task_id, config.strategy, 0.5, 5, &shuffled), baseline);
    }
}
