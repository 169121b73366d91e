//! Validation of the `<think>…</think> <answer>…</answer>` output contract.
//!
//! Tag counts are taken over the raw text, so tag-like strings quoted inside
//! the reasoning still count. The only text allowed outside the two blocks is
//! whitespace: before `<think>`, between `</think>` and `<answer>`, and after
//! `</answer>`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::ontology::{LabelSet, Ontology};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

/// One model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub id: String,
    pub text: String,
    /// Token length `L(y)`, filled in by the reward engine's counter.
    #[serde(default)]
    pub token_count: usize,
}

impl Completion {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Completion { id: id.into(), text: text.into(), token_count: 0 }
    }
}

/// Occurrence counts of the four tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TagCounts {
    pub think_open: usize,
    pub think_close: usize,
    pub answer_open: usize,
    pub answer_close: usize,
}

impl TagCounts {
    fn as_array(&self) -> [usize; 4] {
        [self.think_open, self.think_close, self.answer_open, self.answer_close]
    }

    pub fn all_once(&self) -> bool {
        self.as_array() == [1; 4]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FormatCheck {
    pub ok: bool,
    pub counts: TagCounts,
    /// Byte range of the think content (between the tags), when valid.
    #[serde(skip)]
    pub think_span: Option<Range<usize>>,
    #[serde(skip)]
    pub answer_span: Option<Range<usize>>,
    pub violations: Vec<String>,
}

pub fn count_tags(text: &str) -> TagCounts {
    TagCounts {
        think_open: text.matches(THINK_OPEN).count(),
        think_close: text.matches(THINK_CLOSE).count(),
        answer_open: text.matches(ANSWER_OPEN).count(),
        answer_close: text.matches(ANSWER_CLOSE).count(),
    }
}

pub fn validate_format(text: &str) -> FormatCheck {
    let counts = count_tags(text);
    let mut violations = Vec::new();
    for (tag, n) in TAGS.iter().zip(counts.as_array()) {
        if n != 1 {
            violations.push(format!("{tag} occurs {n} times (expected exactly once)"));
        }
    }
    let fail = |violations| FormatCheck { ok: false, counts, think_span: None, answer_span: None, violations };
    if !violations.is_empty() {
        return fail(violations);
    }

    // Each tag occurs exactly once, so `find` gives its only position.
    let pos = TAGS.map(|t| text.find(t).expect("counted above"));
    let [to, tc, ao, ac] = pos;
    if !(to < tc && tc < ao && ao < ac) {
        violations.push("tags out of order (expected <think> </think> <answer> </answer>)".to_string());
        return fail(violations);
    }
    if !text[..to].trim().is_empty() {
        violations.push("text before <think>".to_string());
    }
    if !text[tc + THINK_CLOSE.len()..ao].trim().is_empty() {
        violations.push("text between </think> and <answer>".to_string());
    }
    if !text[ac + ANSWER_CLOSE.len()..].trim().is_empty() {
        violations.push("text after </answer>".to_string());
    }
    if !violations.is_empty() {
        return fail(violations);
    }
    FormatCheck {
        ok: true,
        counts,
        think_span: Some(to + THINK_OPEN.len()..tc),
        answer_span: Some(ao + ANSWER_OPEN.len()..ac),
        violations,
    }
}

/// Result of running the deterministic parser over a completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseResult {
    pub format_ok: bool,
    pub think_span: Option<Range<usize>>,
    pub answer_span: Option<Range<usize>>,
    pub predicted: LabelSet,
    pub diagnostics: Vec<String>,
}

impl ParseResult {
    pub fn answer<'a>(&self, text: &'a str) -> Option<&'a str> {
        self.answer_span.clone().map(|r| &text[r])
    }
}

pub fn parse_completion(text: &str, ontology: &Ontology) -> ParseResult {
    let check = validate_format(text);
    if !check.ok {
        return ParseResult {
            format_ok: false,
            think_span: None,
            answer_span: None,
            predicted: LabelSet::empty(),
            diagnostics: check.violations,
        };
    }
    let span = check.answer_span.clone().expect("valid format has an answer span");
    let answer = &text[span];
    let mut diagnostics = Vec::new();
    if answer.trim().is_empty() {
        diagnostics.push("empty answer".to_string());
    }
    let parsed = ontology.parse_label_list(answer);
    diagnostics.extend(parsed.diagnostics());
    ParseResult {
        format_ok: true,
        think_span: check.think_span,
        answer_span: check.answer_span,
        predicted: parsed.labels,
        diagnostics,
    }
}
