//! Table-driven extraction cases loaded from `fixtures/extraction_cases.json`.

use serde::Deserialize;
use sce_core::extraction::{extract_after_cue, extract_rationales, extract_sce, filter_sce, normalize_answer, parse_reply};
use sce_core::task::{Label, Strategy, TaskId, TaskSpec};

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Case {
    Normalize { input: String, expected: String },
    AfterCue { text: String, cue: String, expected: Option<String> },
    Parse { task: TaskId, text: String, expected: Option<Label> },
    Sce { task: TaskId, strategy: Strategy, text: String, expected: Option<String> },
    Filter { task: TaskId, sce: String, expected: String },
    Rationales { text: String, expected: Option<Vec<String>> },
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ExpectedLabel {
    Label(String),
    Integer(i64),
}

pub fn cases() -> Vec<Case> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/extraction_cases.json");
    let raw: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    raw.into_iter()
        .map(|mut v| {
            // Parse expectations are tagged objects in the fixture.
            if v["kind"] == "parse" && !v["expected"].is_null() {
                let e: ExpectedLabel = serde_json::from_value(v["expected"].take()).unwrap();
                v["expected"] = match e {
                    ExpectedLabel::Label(s) => serde_json::json!(s),
                    ExpectedLabel::Integer(n) => serde_json::json!(n),
                };
            }
            serde_json::from_value(v).unwrap()
        })
        .collect()
}

/// `Err` carries a description of the mismatch.
pub fn check(case: &Case) -> Result<(), String> {
    let mismatch = |got: &dyn std::fmt::Debug| Err(format!("{case:?}: got {got:?}"));
    match case {
        Case::Normalize { input, expected } => {
            let got = normalize_answer(input);
            if got == expected { Ok(()) } else { mismatch(&got) }
        }
        Case::AfterCue { text, cue, expected } => {
            let got = extract_after_cue(text, cue);
            if got == expected.as_deref() { Ok(()) } else { mismatch(&got) }
        }
        Case::Parse { task, text, expected } => {
            let got = parse_reply(text, &TaskSpec::builtin(*task).label_space);
            if got.label() == expected.as_ref() { Ok(()) } else { mismatch(&got) }
        }
        Case::Sce { task, strategy, text, expected } => {
            let got = extract_sce(text, &TaskSpec::builtin(*task), *strategy);
            if got == expected.as_deref() { Ok(()) } else { mismatch(&got) }
        }
        Case::Filter { task, sce, expected } => {
            let got = filter_sce(sce, &TaskSpec::builtin(*task)).reason;
            let name = serde_json::to_value(got).unwrap();
            if name == expected.as_str() { Ok(()) } else { mismatch(&got) }
        }
        Case::Rationales { text, expected } => {
            let got = extract_rationales(text);
            if &got == expected { Ok(()) } else { mismatch(&got) }
        }
    }
}
