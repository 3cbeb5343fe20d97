//! QA sample schema and its line-oriented file format.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{DatagenError, Result};

pub const SCHEMA_NAME: &str = "anyecg-qa";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    Reportgen,
    Localization,
    LocalizationLong,
    Multiecg,
    Ecgqa,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Reportgen => "reportgen",
            Self::Localization => "localization",
            Self::LocalizationLong => "localization-long",
            Self::Multiecg => "multiecg",
            Self::Ecgqa => "ecgqa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Self::Reportgen,
            Self::Localization,
            Self::LocalizationLong,
            Self::Multiecg,
            Self::Ecgqa,
        ]
        .into_iter()
        .find(|x| x.name() == s)
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgRef {
    pub record_id: String,
    /// Clip window `[start, end)` in seconds within the recording.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<(f64, f64)>,
}

impl EcgRef {
    pub fn whole(record_id: impl Into<String>) -> Self {
        Self {
            record_id: record_id.into(),
            window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Times {
    pub acquired_at: Vec<String>,
    pub relative_days: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub id: String,
    pub subset: Subset,
    pub split: Split,
    /// Recording (or patient) the sample derives from; splits never share one.
    pub source: String,
    pub question: String,
    pub answer: String,
    pub ecg_refs: Vec<EcgRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Times>,
    /// Class queried by a localization sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

impl QaSample {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatagenError::InvalidSample(format!("{}: {m}", self.id)));
        if self.ecg_refs.is_empty() {
            return bad("no ECG references".into());
        }
        if self.subset == Subset::Multiecg && !(2..=6).contains(&self.ecg_refs.len()) {
            return bad(format!("{} ECGs in a multi-ECG sample", self.ecg_refs.len()));
        }
        if matches!(self.subset, Subset::Localization | Subset::LocalizationLong) {
            let parsed = anyecg_evalkit::parse_spans(&self.answer);
            match parsed.span_set() {
                Some(s) if s.render() == self.answer => {}
                _ => return bad(format!("answer `{}` is not canonical span text", self.answer)),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

/// Header line followed by one JSON object per sample.
pub fn to_jsonl(samples: &[QaSample]) -> Result<String> {
    let mut out = serde_json::to_string(&Header {
        schema: SCHEMA_NAME.into(),
        version: SCHEMA_VERSION,
    })?;
    out.push('\n');
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[QaSample]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| DatagenError::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| DatagenError::io(path, e))?;
    f.write_all(to_jsonl(samples)?.as_bytes())
        .map_err(|e| DatagenError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QaSample>> {
    let f = std::fs::File::open(path).map_err(|e| DatagenError::io(path, e))?;
    let mut lines = BufReader::new(f).lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l.map_err(|e| DatagenError::io(path, e))?,
        None => return Err(DatagenError::Malformed { line: 1, reason: "empty file".into() }),
    };
    let h: Header = serde_json::from_str(&header).map_err(|e| DatagenError::Malformed {
        line: 1,
        reason: format!("bad header: {e}"),
    })?;
    if h.schema != SCHEMA_NAME || h.version != SCHEMA_VERSION {
        return Err(DatagenError::Malformed {
            line: 1,
            reason: format!("unsupported schema {} v{}", h.schema, h.version),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| DatagenError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatagenError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
