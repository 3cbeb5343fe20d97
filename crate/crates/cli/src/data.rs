//! Raw inputs and built datasets on disk.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyecg_core::records::{canonicalize, ingest_record, write_interchange, EcgRecord, RecordFormat};
use anyecg_curriculum::Corpus;
use anyecg_datagen::fixtures::{arrhythmia_corpus, ecgqa_rows, patient_corpus, report_corpus};
use anyecg_datagen::{read_jsonl, PatientGroup, QaSample, Split, Subset};
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::{CliError, Result, RunDir};

pub const ALL_SUBSETS: [Subset; 5] = [
    Subset::Reportgen,
    Subset::Localization,
    Subset::LocalizationLong,
    Subset::Multiecg,
    Subset::Ecgqa,
];

/// Resolved raw input locations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inputs {
    pub records: PathBuf,
    pub reports: PathBuf,
    pub patients: PathBuf,
    pub ecgqa: PathBuf,
}

impl Inputs {
    pub fn resolve(data: &DataConfig, run: &RunDir) -> Self {
        let raw = run.raw();
        Self {
            records: data.records.clone().unwrap_or_else(|| raw.join("records")),
            reports: data.reports.clone().unwrap_or_else(|| raw.join("reports.jsonl")),
            patients: data.patients.clone().unwrap_or_else(|| raw.join("patients.json")),
            ecgqa: data.ecgqa.clone().unwrap_or_else(|| raw.join("ecgqa.jsonl")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportLine {
    pub record_id: String,
    pub report: String,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(format!("{what} {} does not exist", path.display())))
    }
}

/// Every record file in `dir`, in file-name order. `.dat` and `.ann`
/// companions are read through their header or signal file.
pub fn load_records(dir: &Path) -> Result<Vec<EcgRecord>> {
    require(dir, "record directory")?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| RecordFormat::from_path(p).is_some())
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let fmt = RecordFormat::from_path(&p).expect("filtered above");
        out.push(ingest_record(&p, fmt)?);
    }
    Ok(out)
}

pub fn read_reports(path: &Path) -> Result<Vec<(String, String)>> {
    require(path, "report file")?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: ReportLine = serde_json::from_str(line)?;
        out.push((r.record_id, r.report));
    }
    Ok(out)
}

pub fn read_patients(path: &Path) -> Result<Vec<PatientGroup>> {
    require(path, "patient file")?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Per-record report text: report-file lines plus the statements of every
/// patient record, joined with ", ".
pub fn report_map(inputs: &Inputs) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    if inputs.reports.exists() {
        map.extend(read_reports(&inputs.reports)?);
    }
    if inputs.patients.exists() {
        for g in read_patients(&inputs.patients)? {
            for r in g.records {
                map.insert(r.record_id, r.report.join(", "));
            }
        }
    }
    Ok(map)
}

/// Built datasets present under the run directory, in subset order.
pub fn load_samples(run: &RunDir) -> Result<Vec<QaSample>> {
    let mut out = Vec::new();
    for subset in ALL_SUBSETS {
        let p = run.dataset(subset.name());
        if p.exists() {
            out.extend(read_jsonl(&p)?);
        }
    }
    if out.is_empty() {
        return Err(CliError::MissingInput(format!(
            "no datasets under {}; run `anyecg build all` first",
            run.datasets().display()
        )));
    }
    Ok(out)
}

/// Datasets plus the canonical records they reference.
pub fn load_corpus(run: &RunDir, inputs: &Inputs) -> Result<Corpus> {
    let samples = load_samples(run)?;
    let records = load_records(&inputs.records)?;
    let corpus = Corpus::new(samples, records.iter().map(canonicalize));
    corpus.validate()?;
    Ok(corpus)
}

/// Training-split questions and answers.
pub fn training_texts(samples: &[QaSample]) -> Vec<String> {
    samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .flat_map(|s| [s.question.clone(), s.answer.clone()])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSizes {
    pub reports: usize,
    pub arrhythmia: usize,
    pub patients: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        Self {
            reports: 96,
            arrhythmia: 20,
            patients: 12,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub records: usize,
    pub reports: usize,
    pub patients: usize,
    pub ecgqa_rows: usize,
}

/// Writes a synthetic raw corpus in the layout [`Inputs`] expects.
pub fn write_synthetic(inputs: &Inputs, sizes: &SynthSizes, seed: u64) -> Result<SynthSummary> {
    std::fs::create_dir_all(&inputs.records).map_err(|e| CliError::io(&inputs.records, e))?;
    let reports = report_corpus(sizes.reports, seed)?;
    let arr = arrhythmia_corpus(sizes.arrhythmia, seed)?;
    let (groups, patient_records) = patient_corpus(sizes.patients, seed)?;
    let all = reports.iter().map(|(r, _)| r).chain(&arr).chain(&patient_records);
    let mut n = 0;
    for rec in all {
        write_interchange(rec, &inputs.records.join(format!("{}.aecg", rec.record_id())))?;
        n += 1;
    }
    let mut lines = String::new();
    for (rec, report) in &reports {
        lines.push_str(&serde_json::to_string(&ReportLine {
            record_id: rec.record_id().to_string(),
            report: report.clone(),
        })?);
        lines.push('\n');
    }
    write_file(&inputs.reports, lines.as_bytes())?;
    write_file(&inputs.patients, serde_json::to_string_pretty(&groups)?.as_bytes())?;
    let rows = ecgqa_rows(&reports, 2);
    let mut qa = String::new();
    for r in &rows {
        qa.push_str(&serde_json::to_string(r)?);
        qa.push('\n');
    }
    write_file(&inputs.ecgqa, qa.as_bytes())?;
    Ok(SynthSummary {
        records: n,
        reports: reports.len(),
        patients: groups.len(),
        ecgqa_rows: rows.len(),
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))
}
