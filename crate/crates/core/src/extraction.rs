//! Post-processing of model replies: answer normalization, cue-based
//! segment extraction, label parsing and SCE filtering.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::task::{Label, LabelSpace, Strategy, TaskId, TaskSpec, ANSWER_CUE, RATIONALES_CUE};

/// Characters stripped from both ends of a short answer. The sequences `'.`
/// and `..` are covered by repeated stripping.
pub const STRIP_CHARS: [char; 6] = ['*', '\\', '\'', '.', '!', '?'];

/// Trims whitespace and the strip set from both ends until neither applies.
pub fn normalize_answer(text: &str) -> &str {
    text.trim_matches(|c: char| c.is_whitespace() || STRIP_CHARS.contains(&c))
}

/// Byte offset of the last ASCII-case-insensitive occurrence of `needle`.
fn rfind_ignore_case(haystack: &str, needle: &str) -> Option<usize> {
    let (h, n) = (haystack.as_bytes(), needle.as_bytes());
    if n.is_empty() || n.len() > h.len() {
        return None;
    }
    (0..=h.len() - n.len()).rev().find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

fn find_ignore_case(haystack: &str, needle: &str) -> Option<usize> {
    let (h, n) = (haystack.as_bytes(), needle.as_bytes());
    if n.is_empty() || n.len() > h.len() {
        return None;
    }
    (0..=h.len() - n.len()).find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

/// Text after the last occurrence of `cue` (case-insensitive), trimmed.
pub fn extract_after_cue<'a>(text: &'a str, cue: &str) -> Option<&'a str> {
    assert!(!cue.is_empty(), "cue must be non-empty");
    // Cues are ASCII, so a match never splits a multi-byte character.
    rfind_ignore_case(text, cue).map(|i| text[i + cue.len()..].trim())
}

/// The answer segment of a reply: after the last `ANSWER:` when present
/// (this also covers `FINAL ANSWER:`), the whole reply otherwise.
pub fn answer_segment(text: &str) -> &str {
    extract_after_cue(text, ANSWER_CUE).unwrap_or(text.trim())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParsedAnswer {
    Label { value: Label, raw: String },
    Unparseable { raw: String },
}

impl ParsedAnswer {
    pub fn label(&self) -> Option<&Label> {
        match self {
            ParsedAnswer::Label { value, .. } => Some(value),
            ParsedAnswer::Unparseable { .. } => None,
        }
    }

    pub fn is_parsed(&self) -> bool {
        self.label().is_some()
    }

    pub fn raw(&self) -> &str {
        match self {
            ParsedAnswer::Label { raw, .. } | ParsedAnswer::Unparseable { raw } => raw,
        }
    }
}

static INT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"-?(?:\d{1,3}(?:,\d{3})+|\d+)").unwrap());

/// First integer token, accepting comma digit grouping ("1,234").
pub fn first_integer(text: &str) -> Option<i64> {
    let m = INT_RE.find(text)?;
    m.as_str().replace(',', "").parse().ok()
}

/// Maps an answer segment into the label space.
pub fn parse_answer(text: &str, space: &LabelSpace) -> ParsedAnswer {
    let raw = text.to_string();
    let norm = normalize_answer(text);
    let value = match space {
        LabelSpace::Discrete { labels } => labels
            .iter()
            .find(|l| l.to_lowercase() == norm.to_lowercase())
            .map(|l| Label::Text(l.clone())),
        LabelSpace::PositiveInteger => first_integer(norm).map(Label::Integer),
    };
    match value {
        Some(v) if space.contains(&v) => ParsedAnswer::Label { value: v, raw },
        _ => ParsedAnswer::Unparseable { raw },
    }
}

/// Full reply → parsed label: cue extraction then parsing.
pub fn parse_reply(reply: &str, space: &LabelSpace) -> ParsedAnswer {
    match parse_answer(answer_segment(reply), space) {
        ParsedAnswer::Label { value, .. } => ParsedAnswer::Label { value, raw: reply.to_string() },
        ParsedAnswer::Unparseable { .. } => ParsedAnswer::Unparseable { raw: reply.to_string() },
    }
}

/// Cuts an embedded answer tag (`ANSWER:` or `FINAL ANSWER:`) and everything
/// after it out of an SCE.
pub fn strip_answer_tag(sce: &str) -> &str {
    let Some(mut cut) = find_ignore_case(sce, ANSWER_CUE) else {
        return sce.trim();
    };
    const FINAL: &str = "FINAL ";
    if cut >= FINAL.len() && sce.as_bytes()[cut - FINAL.len()..cut].eq_ignore_ascii_case(FINAL.as_bytes()) {
        cut -= FINAL.len();
    }
    sce[..cut].trim()
}

/// SCE text from a Step-2 reply, or `None` when the task/strategy cue is
/// absent.
pub fn extract_sce<'a>(text: &'a str, task: &TaskSpec, strategy: Strategy) -> Option<&'a str> {
    extract_after_cue(text, task.cue(strategy)).map(strip_answer_tag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Ok,
    TooShort,
    NoCue,
    StopwordOnly,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: bool,
    pub reason: FilterReason,
}

impl FilterOutcome {
    pub fn new(reason: FilterReason) -> Self {
        FilterOutcome { kept: reason == FilterReason::Ok, reason }
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

const MATH_SYMBOLS: &[char] = &['+', '*', '/', '=', '%', '^', '<', '>', '×', '÷'];

/// Decides whether an extracted SCE counts as generated.
pub fn filter_sce(sce: &str, task: &TaskSpec) -> FilterOutcome {
    let text = sce.trim();
    if text.is_empty() {
        return FilterOutcome::new(FilterReason::Empty);
    }
    if !text.chars().any(char::is_alphanumeric) {
        return FilterOutcome::new(FilterReason::StopwordOnly);
    }
    let words = word_count(text);
    let short = match task.task_id {
        TaskId::Gsm8k => {
            let numeric = text.chars().any(|c| c.is_ascii_digit() || MATH_SYMBOLS.contains(&c));
            words < task.min_words_filter && !numeric
        }
        _ => words < task.min_words_filter,
    };
    if short {
        FilterOutcome::new(FilterReason::TooShort)
    } else {
        FilterOutcome::new(FilterReason::Ok)
    }
}

/// Extraction plus filtering for a Step-2 reply.
pub fn screen_sce(reply: &str, task: &TaskSpec, strategy: Strategy) -> (Option<String>, FilterOutcome) {
    match extract_sce(reply, task, strategy) {
        None => (None, FilterOutcome::new(FilterReason::NoCue)),
        Some(sce) => (Some(sce.to_string()), filter_sce(sce, task)),
    }
}

/// Non-empty trimmed lines after `RATIONALES:`; `None` when the cue is
/// missing or the list is empty.
pub fn extract_rationales(text: &str) -> Option<Vec<String>> {
    let body = extract_after_cue(text, RATIONALES_CUE)?;
    let lines: Vec<String> = body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    (!lines.is_empty()).then_some(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::task::Strategy;

    #[test]
    fn normalizes_short_answers() {
        assert_eq!(normalize_answer("Yes."), "Yes");
        assert_eq!(normalize_answer("Yes!"), "Yes");
        assert_eq!(normalize_answer("**No**"), "No");
        assert_eq!(normalize_answer("  'Neutral'. "), "Neutral");
        assert_eq!(normalize_answer("Yes.."), "Yes");
        assert_eq!(normalize_answer("don't know"), "don't know");
    }

    #[test]
    fn extracts_after_last_cue() {
        assert_eq!(extract_after_cue("blah ANSWER: Yes", "ANSWER:"), Some("Yes"));
        assert_eq!(extract_after_cue("ANSWER: maybe … ANSWER: No", "ANSWER:"), Some("No"));
        assert_eq!(extract_after_cue("no cue here", "ANSWER:"), None);
        assert_eq!(extract_after_cue("answer: yes", "ANSWER:"), Some("yes"));
        assert_eq!(extract_after_cue("é ANSWER:é", "ANSWER:"), Some("é"));
    }

    #[test]
    fn parses_labels_and_integers() {
        let yn = LabelSpace::discrete(["Yes", "No"]).unwrap();
        assert_eq!(parse_answer("yes", &yn).label(), Some(&Label::from("Yes")));
        assert_eq!(parse_answer("Maybe", &yn).label(), None);
        let ints = LabelSpace::PositiveInteger;
        assert_eq!(parse_reply("FINAL ANSWER: 48", &ints).label(), Some(&Label::Integer(48)));
        assert_eq!(parse_answer("1,234 slices", &ints).label(), Some(&Label::Integer(1234)));
        assert_eq!(parse_answer("0", &ints).label(), None);
        assert_eq!(parse_answer("no idea", &ints).label(), None);
        // Reply without any cue falls back to the whole text.
        assert_eq!(parse_reply("48", &ints).label(), Some(&Label::Integer(48)));
    }

    #[test]
    fn sce_extraction_follows_cue_table() {
        let gsm = TaskSpec::builtin(TaskId::Gsm8k);
        assert_eq!(
            extract_sce("REVISED PROBLEM: Albert buys 3 pizzas.", &gsm, Strategy::Unconstrained),
            Some("Albert buys 3 pizzas.")
        );
        assert_eq!(
            extract_sce("REVISED PROBLEM: Albert buys 3 pizzas.", &gsm, Strategy::Cot),
            Some("Albert buys 3 pizzas.")
        );
        let tw = TaskSpec::builtin(TaskId::Twitter);
        assert_eq!(extract_sce("REVISED POST: stocks rally", &tw, Strategy::RationaleBased), None);
        assert_eq!(
            extract_sce("ALTERED TWITTER POST: stocks rally", &tw, Strategy::RationaleBased),
            Some("stocks rally")
        );
        assert_eq!(
            extract_sce("REVISED PROBLEM: He buys 3 pizzas. FINAL ANSWER: 50", &gsm, Strategy::Unconstrained),
            Some("He buys 3 pizzas.")
        );
        assert_eq!(
            extract_sce("REVISED PROBLEM: He buys 3 pizzas.\nANSWER: 50", &gsm, Strategy::Unconstrained),
            Some("He buys 3 pizzas.")
        );
    }

    #[test]
    fn filters_by_task_threshold() {
        let dev = TaskSpec::builtin(TaskId::DiscrimEval);
        let fourteen = vec!["word"; 14].join(" ");
        assert_eq!(filter_sce(&fourteen, &dev).reason, FilterReason::TooShort);
        assert!(filter_sce(&format!("{fourteen} more"), &dev).kept);
        let gsm = TaskSpec::builtin(TaskId::Gsm8k);
        assert_eq!(filter_sce("I cannot do that", &gsm).reason, FilterReason::TooShort);
        assert!(filter_sce("2 + 2 pizzas", &gsm).kept);
        let sst = TaskSpec::builtin(TaskId::Sst2);
        assert_eq!(filter_sce(".", &sst).reason, FilterReason::StopwordOnly);
        assert_eq!(filter_sce("!", &sst).reason, FilterReason::StopwordOnly);
        assert_eq!(filter_sce("", &sst).reason, FilterReason::Empty);
        assert!(filter_sce("dull", &sst).kept);
        let (sce, outcome) = screen_sce("nothing useful", &sst, Strategy::Unconstrained);
        assert_eq!((sce, outcome.reason), (None, FilterReason::NoCue));
    }

    #[test]
    fn rationales() {
        assert_eq!(
            extract_rationales("RATIONALES:\n- cheap\n- boring"),
            Some(vec!["- cheap".to_string(), "- boring".to_string()])
        );
        assert_eq!(extract_rationales("I think it was the acting"), None);
        assert_eq!(extract_rationales("RATIONALES:\n\n"), None);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in r"[ *\\'.!?a-zA-Z]{0,16}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(once), once);
        }

        #[test]
        fn cue_extraction_is_a_suffix(s in "[a-zA-Z :]{0,30}") {
            if let Some(rest) = extract_after_cue(&s, "ANSWER:") {
                prop_assert!(s.trim_end().ends_with(rest));
            }
        }

        #[test]
        fn parsed_labels_stay_in_space(s in "[a-zA-Z0-9 ,.!-]{0,12}") {
            for space in [LabelSpace::discrete(["Yes", "No"]).unwrap(), LabelSpace::PositiveInteger] {
                if let Some(l) = parse_answer(&s, &space).label() {
                    prop_assert!(space.contains(l));
                }
            }
        }
    }
}
