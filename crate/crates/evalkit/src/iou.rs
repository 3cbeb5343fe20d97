//! Temporal intersection-over-union between span sets.

use crate::spans::{merge, Span, SpanParse, SpanSet};

/// Total length of the intersection of two merged interval lists.
fn intersection_len(a: &[Span], b: &[Span]) -> f64 {
    let (mut i, mut j, mut total) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        let lo = a[i].start.max(b[j].start);
        let hi = a[i].end.min(b[j].end);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].end < b[j].end {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Length of intersection over length of union. Both Not-Found is 1.0;
/// exactly one Not-Found is 0.0.
pub fn temporal_iou(pred: &SpanSet, truth: &SpanSet) -> f64 {
    match (pred, truth) {
        (SpanSet::NotFound, SpanSet::NotFound) => 1.0,
        (SpanSet::NotFound, _) | (_, SpanSet::NotFound) => 0.0,
        (SpanSet::Spans(p), SpanSet::Spans(t)) => {
            let p = merge(p.clone());
            let t = merge(t.clone());
            let inter = intersection_len(&p, &t);
            let union: f64 = merge(p.iter().chain(t.iter()).copied().collect())
                .iter()
                .map(Span::len)
                .sum();
            if union <= 0.0 {
                0.0
            } else {
                (inter / union).clamp(0.0, 1.0)
            }
        }
    }
}

/// IoU of a raw parse against the truth. A parse failure names no spans:
/// it scores 1.0 against a Not-Found truth and 0.0 otherwise.
pub fn score_answer(pred: &SpanParse, truth: &SpanSet) -> f64 {
    match pred {
        SpanParse::Parsed { spans } => temporal_iou(spans, truth),
        SpanParse::Failure { .. } => {
            if truth.is_not_found() {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spans::parse_spans;

    fn set(v: &[(f64, f64)]) -> SpanSet {
        SpanSet::from_spans(v.iter().map(|&(a, b)| Span::new(a, b)))
    }

    #[test]
    fn paper_case() {
        let iou = temporal_iou(&set(&[(1.9, 3.7)]), &set(&[(2.0, 3.7)]));
        assert!((iou - 1.7 / 1.8).abs() < 1e-9, "{iou}");
    }

    #[test]
    fn edge_values() {
        let a = set(&[(1.0, 2.0), (4.0, 5.0)]);
        assert_eq!(temporal_iou(&a, &a), 1.0);
        assert_eq!(temporal_iou(&a, &set(&[(2.5, 3.5)])), 0.0);
        assert_eq!(temporal_iou(&SpanSet::NotFound, &SpanSet::NotFound), 1.0);
        assert_eq!(temporal_iou(&SpanSet::NotFound, &a), 0.0);
        assert_eq!(temporal_iou(&a, &SpanSet::NotFound), 0.0);
    }

    #[test]
    fn failures() {
        let f = parse_spans("located in V1-V2");
        assert_eq!(score_answer(&f, &set(&[(1.0, 2.0)])), 0.0);
        assert_eq!(score_answer(&f, &SpanSet::NotFound), 1.0);
    }
}
