//! Scripted SST2 model shared by the pipeline and acceptance tests.
//!
//! Twenty reviews, each exactly 20 characters. The script for example `i`:
//! - i in 0..2: Step-1 reply unparseable.
//! - i in 2..4: Step-2 reply lacks the cue.
//! - i == 4: Step-2 SCE is bare punctuation.
//! - i in 5..20: kept. The SCE substitutes the last `k = i % 4 + 1` characters
//!   with `X`, so its normalized edit distance is `5k`.
//! - Without context, i in 5..14 re-predict the target; with context, i in 5..17.
//! - Every parseable Step-1 answer is Positive, so the target is Negative.
//!   Gold is Positive for even i.
#![allow(dead_code)]

pub mod extraction;
pub mod golden;

use std::sync::Arc;

use indexmap::IndexMap;
use sce_core::client::{BackendConfig, LlmClient};
use sce_core::dataset::Example;
use sce_core::mock::{MockBackend, MockReply, MockRequest};
use sce_core::pipeline::RunConfig;
use sce_core::task::{Label, Strategy, TaskId};

pub const N: usize = 20;
const REVIEW_PREFIX: &str = "The movie review is: ";

pub fn review(i: usize) -> String {
    let r = format!("film {i:02} was so good!");
    assert_eq!(r.chars().count(), 20);
    r
}

pub fn sce(i: usize) -> String {
    let k = i % 4 + 1;
    let r = review(i);
    format!("{}{}", &r[..20 - k], "X".repeat(k))
}

pub fn examples() -> Vec<Example> {
    (0..N)
        .map(|i| {
            let mut fields = IndexMap::new();
            fields.insert("review".to_string(), review(i));
            Example {
                example_id: format!("sst2-{i:02}"),
                fields,
                gold: Some(Label::from(if i % 2 == 0 { "Positive" } else { "Negative" })),
            }
        })
        .collect()
}

fn index_of_review(text: &str) -> Option<(usize, bool)> {
    (0..N).find_map(|i| {
        if text == review(i) {
            Some((i, true))
        } else if text == sce(i) {
            Some((i, false))
        } else {
            None
        }
    })
}

fn reply(messages: &[sce_core::client::WireMessage]) -> MockReply {
    let last = &messages.last().expect("non-empty").content;
    let reviewed = last.rsplit_once(REVIEW_PREFIX).map(|(_, r)| r);
    match (messages.len(), reviewed.and_then(index_of_review)) {
        (1, Some((i, true))) => MockReply::text(if i < 2 { "ANSWER: Maybe" } else { "ANSWER: Positive." }),
        (3, _) => {
            let (i, _) = index_of_review(messages[0].content.rsplit_once(REVIEW_PREFIX).unwrap().1).unwrap();
            match i {
                2 | 3 => MockReply::text("I would rather not rewrite this review."),
                4 => MockReply::text("REVISED REVIEW: ."),
                _ => MockReply::text(format!("REVISED REVIEW: {}", sce(i))),
            }
        }
        (1, Some((i, false))) => MockReply::text(if i < 14 { "ANSWER: Negative" } else { "ANSWER: Positive" }),
        (5, Some((i, false))) => MockReply::text(if i < 17 { "ANSWER: negative!" } else { "I am not sure." }),
        _ => MockReply::Status(400, "unexpected request".into()),
    }
}

pub fn scripted_backend() -> MockBackend {
    MockBackend::new(|req| match req {
        MockRequest::Chat { request, .. } => reply(&request.messages),
        MockRequest::Embed { .. } => MockReply::Status(404, "no embeddings".into()),
    })
}

pub fn backend_config() -> BackendConfig {
    let mut b = BackendConfig::new("http://mock/v1", "scripted");
    b.retry_base_delay_ms = 0;
    b
}

pub fn run_config() -> RunConfig {
    let mut c = RunConfig::new(TaskId::Sst2, Strategy::Unconstrained, 0.0, backend_config());
    c.seed = 42;
    c
}

pub fn client(backend: Arc<MockBackend>) -> LlmClient {
    LlmClient::new(backend, backend_config()).unwrap()
}

/// Hand-computed expectations for the fixture.
pub mod expected {
    /// 15 kept of 18 parseable.
    pub const GEN: f64 = 1500.0 / 18.0;
    /// 9 of 15 valid.
    pub const VAL: f64 = 60.0;
    /// 12 of 15 valid.
    pub const VAL_C: f64 = 80.0;
    /// k over i in 5..14 sums to 22; 5 * 22 / 9.
    pub const ED: f64 = 110.0 / 9.0;
    /// k over i in 5..17 sums to 30; 5 * 30 / 12.
    pub const ED_C: f64 = 12.5;
    /// 9 correct (even i in 2..20) out of 20 with gold.
    pub const ACCURACY: f64 = 45.0;
}
