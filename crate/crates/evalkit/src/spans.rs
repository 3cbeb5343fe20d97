//! Localization answer grammar.
//!
//! ```text
//! answer   := "Duration: " span ("," WS span)* | "Not Found"
//! span     := FLOAT "s" "-" FLOAT "s"
//! ```
//!
//! Parsing is case-insensitive and whitespace-tolerant; rendering is the
//! canonical form with one decimal place.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const NOT_FOUND: &str = "Not Found";
pub const DURATION_PREFIX: &str = "Duration: ";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

impl Span {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Sorted, disjoint, non-touching intervals, or the Not-Found value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "spans", rename_all = "snake_case")]
pub enum SpanSet {
    NotFound,
    Spans(Vec<Span>),
}

impl SpanSet {
    /// Sorts and merges overlapping or touching intervals. Empty or inverted
    /// intervals are discarded; no intervals at all yields `NotFound`.
    pub fn from_spans(spans: impl IntoIterator<Item = Span>) -> Self {
        let merged = merge(spans.into_iter().filter(|s| !s.is_empty()).collect());
        if merged.is_empty() {
            Self::NotFound
        } else {
            Self::Spans(merged)
        }
    }

    pub fn spans(&self) -> &[Span] {
        match self {
            Self::NotFound => &[],
            Self::Spans(s) => s,
        }
    }

    pub fn is_not_found(&self) -> bool {
        matches!(self, Self::NotFound)
    }

    pub fn total_len(&self) -> f64 {
        self.spans().iter().map(Span::len).sum()
    }

    /// Canonical answer text.
    pub fn render(&self) -> String {
        match self {
            Self::NotFound => NOT_FOUND.to_string(),
            Self::Spans(spans) => {
                let body: Vec<String> = spans
                    .iter()
                    .map(|s| format!("{:.1}s-{:.1}s", s.start, s.end))
                    .collect();
                format!("{DURATION_PREFIX}{}", body.join(", "))
            }
        }
    }
}

impl fmt::Display for SpanSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

pub fn merge(mut spans: Vec<Span>) -> Vec<Span> {
    spans.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    for s in spans {
        match out.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}

/// Outcome of parsing free text under the span grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SpanParse {
    Parsed { spans: SpanSet },
    Failure { text: String },
}

impl SpanParse {
    pub fn span_set(&self) -> Option<&SpanSet> {
        match self {
            Self::Parsed { spans } => Some(spans),
            Self::Failure { .. } => None,
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, Self::Failure { .. })
    }
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"\d+(?:\.\d+)?";
        let span = format!(r"{num}\s*s\s*-\s*{num}\s*s");
        Regex::new(&format!(r"(?i)^\s*duration\s*:\s*{span}(?:\s*,\s*{span})*\s*\.?\s*$")).expect("static regex")
    })
}

fn span_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(\d+(?:\.\d+)?)\s*s\s*-\s*(\d+(?:\.\d+)?)\s*s").expect("static regex"))
}

fn not_found_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*not\s+found\s*\.?\s*$").expect("static regex"))
}

/// Parses a model answer. Never fails; text outside the grammar, or spans
/// with `start >= end`, give [`SpanParse::Failure`].
pub fn parse_spans(answer: &str) -> SpanParse {
    let failure = || SpanParse::Failure {
        text: answer.to_string(),
    };
    if not_found_re().is_match(answer) {
        return SpanParse::Parsed {
            spans: SpanSet::NotFound,
        };
    }
    if !answer_re().is_match(answer) {
        return failure();
    }
    let mut spans = Vec::new();
    for cap in span_re().captures_iter(answer) {
        let (Ok(a), Ok(b)) = (cap[1].parse::<f64>(), cap[2].parse::<f64>()) else {
            return failure();
        };
        if a >= b {
            return failure();
        }
        spans.push(Span::new(a, b));
    }
    SpanParse::Parsed {
        spans: SpanSet::from_spans(spans),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parsed(s: &str) -> SpanSet {
        parse_spans(s).span_set().cloned().unwrap_or_else(|| panic!("failed: {s}"))
    }

    #[test]
    fn table_literals() {
        assert_eq!(parsed("Duration: 1.9s-3.7s").spans(), &[Span::new(1.9, 3.7)]);
        assert_eq!(
            parsed("Duration: 1.9s-3.1s, 6.8s-8.1s, 14.3s-15.0s").spans(),
            &[Span::new(1.9, 3.1), Span::new(6.8, 8.1), Span::new(14.3, 15.0)]
        );
        assert_eq!(parsed("Not Found"), SpanSet::NotFound);
        assert_eq!(parsed("  not   found. "), SpanSet::NotFound);
    }

    #[test]
    fn prose_is_a_failure() {
        assert!(parse_spans("The PVC is located in the V1-V2 region").is_failure());
        assert!(parse_spans("V2").is_failure());
        assert!(parse_spans("Duration: 3.0s-2.0s").is_failure());
        assert!(parse_spans("").is_failure());
    }

    #[test]
    fn tolerant_whitespace_and_overlap_merge() {
        let s = parsed("duration:2s - 3s ,2.5s-4.0s");
        assert_eq!(s.spans(), &[Span::new(2.0, 4.0)]);
    }

    #[test]
    fn render_canonical() {
        let s = SpanSet::from_spans([Span::new(6.8, 8.1), Span::new(1.9, 3.1)]);
        assert_eq!(s.render(), "Duration: 1.9s-3.1s, 6.8s-8.1s");
        assert_eq!(SpanSet::NotFound.render(), "Not Found");
    }
}
