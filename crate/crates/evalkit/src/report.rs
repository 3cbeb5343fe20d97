//! Evaluation run reports: per-sample rows plus an aggregate block, as text
//! and as JSON lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub rows: Vec<BTreeMap<String, Value>>,
    pub aggregate: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(protocol: impl Into<String>) -> Self {
        Self {
            protocol: protocol.into(),
            ..Self::default()
        }
    }

    pub fn push_row<T: Serialize>(&mut self, row: &T) {
        if let Ok(Value::Object(m)) = serde_json::to_value(row) {
            self.rows.push(m.into_iter().collect());
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: f64) {
        self.aggregate.insert(key.into(), value);
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# {} evaluation\n\n", self.protocol);
        if let Some(first) = self.rows.first() {
            let cols: Vec<&String> = first.keys().collect();
            out.push_str(&cols.iter().map(|c| c.as_str()).collect::<Vec<_>>().join("\t"));
            out.push('\n');
            for row in &self.rows {
                let cells: Vec<String> = cols
                    .iter()
                    .map(|c| match row.get(*c) {
                        Some(Value::String(s)) => s.replace(['\t', '\n'], " "),
                        Some(Value::Number(n)) => n
                            .as_f64()
                            .filter(|_| n.is_f64())
                            .map(|f| format!("{f:.4}"))
                            .unwrap_or_else(|| n.to_string()),
                        Some(v) => v.to_string(),
                        None => String::new(),
                    })
                    .collect();
                out.push_str(&cells.join("\t"));
                out.push('\n');
            }
            out.push('\n');
        }
        out.push_str("## aggregate\n");
        for (k, v) in &self.aggregate {
            let _ = writeln!(out, "{k}: {v:.6}");
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }

    /// One JSON object per sample row, then one `{"aggregate": ...}` line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).unwrap_or_default());
            out.push('\n');
        }
        let agg = serde_json::json!({
            "protocol": self.protocol,
            "aggregate": self.aggregate,
            "notes": self.notes,
        });
        out.push_str(&agg.to_string());
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_and_jsonl() {
        let mut r = EvalReport::new("localization");
        r.push_row(&serde_json::json!({"id": "a", "iou": 0.5}));
        r.set("mean_iou", 0.5);
        let t = r.to_text();
        assert!(t.contains("id\tiou"));
        assert!(t.contains("mean_iou: 0.500000"));
        assert_eq!(r.to_jsonl().lines().count(), 2);
    }
}
