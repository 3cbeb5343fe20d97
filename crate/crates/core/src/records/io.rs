//! Readers and writers for the three on-disk record formats. The exact
//! layouts are documented in `docs/formats.md`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Annotation, EcgRecord, LeadRegistry};
use crate::error::{Error, Result};

pub const INTERCHANGE_MAGIC: &[u8; 4] = b"AECG";
pub const INTERCHANGE_VERSION: u16 = 1;

/// Default half-width of a beat annotation with no neighbour to bound it.
const LONE_BEAT_HALF_WIDTH_S: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordFormat {
    WaveformDb,
    ColumnarText,
    InterchangeBinary,
}

impl FromStr for RecordFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "waveform-db" | "wfdb" => Ok(Self::WaveformDb),
            "columnar-text" | "csv" => Ok(Self::ColumnarText),
            "interchange-binary" | "aecg" => Ok(Self::InterchangeBinary),
            other => Err(format!("unknown record format `{other}`")),
        }
    }
}

impl RecordFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "hea" => Some(Self::WaveformDb),
            "csv" => Some(Self::ColumnarText),
            "aecg" => Some(Self::InterchangeBinary),
            _ => None,
        }
    }
}

pub fn ingest_record(path: &Path, format: RecordFormat) -> Result<EcgRecord> {
    ingest_record_with(path, format, &LeadRegistry::default())
}

pub fn ingest_record_with(
    path: &Path,
    format: RecordFormat,
    registry: &LeadRegistry,
) -> Result<EcgRecord> {
    match format {
        RecordFormat::WaveformDb => read_waveform_db(path, registry),
        RecordFormat::ColumnarText => read_columnar_text(path, registry),
        RecordFormat::InterchangeBinary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_interchange(&bytes, path, registry)
        }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("ann")
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------------------
// annotation sidecar: `sample_index label [end_sample_index]` per line

#[derive(Debug, Clone, PartialEq)]
struct SidecarMark {
    sample: usize,
    end: Option<usize>,
    label: String,
}

fn read_sidecar(path: &Path, n_samples: usize, fs: f64) -> Result<Vec<Annotation>> {
    let ann_path = sidecar_path(path);
    if !ann_path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    parse_annotation_sidecar(&text, n_samples, fs)
}

/// Parses an annotation sidecar. Lines with an end index are intervals;
/// lines without are beat marks, widened to half-way to their neighbours.
pub fn parse_annotation_sidecar(text: &str, n_samples: usize, fs: f64) -> Result<Vec<Annotation>> {
    let mut marks = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::LengthMismatch(format!("annotation line {}: `{line}`", lineno + 1));
        if fields.len() < 2 || fields.len() > 3 {
            return Err(bad());
        }
        let sample: usize = fields[0].parse().map_err(|_| bad())?;
        let end = match fields.get(2) {
            Some(f) => Some(f.parse::<usize>().map_err(|_| bad())?),
            None => None,
        };
        if sample >= n_samples || end.is_some_and(|e| e > n_samples || e < sample) {
            return Err(Error::LengthMismatch(format!(
                "annotation at sample {sample} outside signal of {n_samples} samples"
            )));
        }
        marks.push(SidecarMark {
            sample,
            end,
            label: fields[1].to_string(),
        });
    }
    Ok(marks_to_annotations(marks, n_samples, fs))
}

fn marks_to_annotations(mut marks: Vec<SidecarMark>, n_samples: usize, fs: f64) -> Vec<Annotation> {
    marks.sort_by_key(|m| m.sample);
    let beats: Vec<usize> = marks
        .iter()
        .filter(|m| m.end.is_none())
        .map(|m| m.sample)
        .collect();
    let duration = n_samples as f64 / fs;
    let mut beat_idx = 0;
    let mut out = Vec::with_capacity(marks.len());
    for m in &marks {
        let (onset, offset) = match m.end {
            Some(end) => (m.sample as f64 / fs, end as f64 / fs),
            None => {
                let i = beat_idx;
                beat_idx += 1;
                let cur = beats[i] as f64;
                let prev = i.checked_sub(1).map(|j| beats[j] as f64);
                let next = beats.get(i + 1).map(|&b| b as f64);
                let lone = LONE_BEAT_HALF_WIDTH_S * fs;
                let left = match (prev, next) {
                    (Some(p), _) => (cur - p) / 2.0,
                    (None, Some(n)) => (n - cur) / 2.0,
                    (None, None) => lone,
                };
                let right = match (prev, next) {
                    (_, Some(n)) => (n - cur) / 2.0,
                    (Some(p), None) => (cur - p) / 2.0,
                    (None, None) => lone,
                };
                (
                    ((cur - left) / fs).max(0.0),
                    ((cur + right) / fs).min(duration),
                )
            }
        };
        out.push(Annotation::new(onset, offset, m.label.clone()));
    }
    out
}

// ---------------------------------------------------------------------------
// waveform-db

fn read_waveform_db(path: &Path, registry: &LeadRegistry) -> Result<EcgRecord> {
    let header = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = header
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let first = lines.next().ok_or_else(|| malformed(path, "empty header"))?;
    let f: Vec<&str> = first.split_whitespace().collect();
    if f.len() < 4 {
        return Err(malformed(path, "record line needs: id n_leads fs n_samples"));
    }
    let record_id = f[0].to_string();
    let n_leads: usize = f[1].parse().map_err(|_| malformed(path, "bad lead count"))?;
    let fs: f64 = f[2].parse().map_err(|_| malformed(path, "bad sampling rate"))?;
    let n_samples: usize = f[3].parse().map_err(|_| malformed(path, "bad sample count"))?;
    let acquired_at = f.get(4).map(|s| s.to_string());
    if n_leads == 0 || n_samples == 0 || !(fs > 0.0) {
        return Err(malformed(path, "lead count, fs and sample count must be positive"));
    }

    let mut dat_file: Option<String> = None;
    let mut gains = Vec::with_capacity(n_leads);
    let mut baselines = Vec::with_capacity(n_leads);
    let mut names = Vec::with_capacity(n_leads);
    for _ in 0..n_leads {
        let line = lines
            .next()
            .ok_or_else(|| malformed(path, "fewer signal lines than leads"))?;
        let s: Vec<&str> = line.split_whitespace().collect();
        if s.len() != 5 {
            return Err(malformed(path, format!("signal line `{line}` needs 5 fields")));
        }
        if s[1] != "16" {
            return Err(malformed(path, format!("unsupported sample format `{}`", s[1])));
        }
        match &dat_file {
            None => dat_file = Some(s[0].to_string()),
            Some(d) if d != s[0] => {
                return Err(malformed(path, "all leads must share one data file"))
            }
            _ => {}
        }
        let gain: f64 = s[2].parse().map_err(|_| malformed(path, "bad gain"))?;
        if gain == 0.0 {
            return Err(malformed(path, "gain must be nonzero"));
        }
        gains.push(gain);
        baselines.push(s[3].parse::<f64>().map_err(|_| malformed(path, "bad baseline"))?);
        names.push(s[4].to_string());
    }
    for name in &names {
        if !registry.is_known(name) {
            return Err(Error::UnknownLead(name.clone()));
        }
    }

    let dat_path = path.with_file_name(dat_file.expect("n_leads > 0"));
    let bytes = fs::read(&dat_path).map_err(|e| Error::io(&dat_path, e))?;
    if bytes.len() != n_leads * n_samples * 2 {
        return Err(Error::LengthMismatch(format!(
            "{} holds {} bytes, header implies {}",
            dat_path.display(),
            bytes.len(),
            n_leads * n_samples * 2
        )));
    }
    let mut signal = vec![Vec::with_capacity(n_samples); n_leads];
    for (k, chunk) in bytes.chunks_exact(2).enumerate() {
        let lead = k % n_leads;
        let adc = i16::from_le_bytes([chunk[0], chunk[1]]) as f64;
        signal[lead].push(((adc - baselines[lead]) / gains[lead]) as f32);
    }
    let annotations = read_sidecar(path, n_samples, fs)?;
    let mut rec = EcgRecord::with_registry(record_id, names, fs, signal, annotations, registry)?;
    rec.acquired_at = acquired_at;
    Ok(rec)
}

/// Writes `<dir>/<id>.hea`, `<dir>/<id>.dat` and, when the record carries
/// annotations, an interval sidecar `<dir>/<id>.ann`. Returns the header path.
pub fn write_waveform_db(rec: &EcgRecord, dir: &Path, gain: f64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = rec.record_id();
    let hea = dir.join(format!("{id}.hea"));
    let dat_name = format!("{id}.dat");
    let mut header = format!("{id} {} {} {}", rec.n_leads(), rec.fs(), rec.n_samples());
    if let Some(at) = rec.acquired_at() {
        header.push(' ');
        header.push_str(at);
    }
    header.push('\n');
    for name in rec.lead_names() {
        header.push_str(&format!("{dat_name} 16 {gain} 0 {name}\n"));
    }
    fs::write(&hea, header).map_err(|e| Error::io(&hea, e))?;

    let mut bytes = Vec::with_capacity(rec.n_leads() * rec.n_samples() * 2);
    for t in 0..rec.n_samples() {
        for row in rec.signal() {
            let adc = (row[t] as f64 * gain)
                .round()
                .clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            bytes.extend_from_slice(&adc.to_le_bytes());
        }
    }
    let dat = dir.join(&dat_name);
    fs::write(&dat, bytes).map_err(|e| Error::io(&dat, e))?;
    write_interval_sidecar(rec, &hea)?;
    Ok(hea)
}

fn write_interval_sidecar(rec: &EcgRecord, primary: &Path) -> Result<()> {
    if rec.annotations().is_empty() {
        return Ok(());
    }
    let mut text = String::new();
    for a in rec.annotations() {
        let start = (a.onset * rec.fs()).round() as usize;
        let end = ((a.offset * rec.fs()).round() as usize).min(rec.n_samples());
        text.push_str(&format!("{start} {} {end}\n", a.label));
    }
    let path = sidecar_path(primary);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

// ---------------------------------------------------------------------------
// columnar-text

fn read_columnar_text(path: &Path, registry: &LeadRegistry) -> Result<EcgRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rec = parse_columnar_text(&text, path, registry)?;
    let annotations = read_sidecar(path, rec.n_samples(), rec.fs())?;
    let mut out = EcgRecord::with_registry(
        rec.record_id,
        rec.lead_names,
        rec.fs,
        rec.signal,
        annotations,
        registry,
    )?;
    out.acquired_at = rec.acquired_at;
    Ok(out)
}

/// Parses columnar text already in memory. `path` names the source in
/// errors and supplies the default record id; no sidecar is read.
pub fn parse_columnar_text(text: &str, path: &Path, registry: &LeadRegistry) -> Result<EcgRecord> {
    let mut fs_hz: Option<f64> = None;
    let mut record_id: Option<String> = None;
    let mut acquired_at: Option<String> = None;
    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            for pair in meta.split(',') {
                if let Some((k, v)) = pair.split_once('=') {
                    let v = v.trim();
                    match k.trim() {
                        "fs" => {
                            fs_hz = Some(v.parse().map_err(|_| malformed(path, "bad fs"))?)
                        }
                        "record_id" => record_id = Some(v.to_string()),
                        "acquired_at" => acquired_at = Some(v.to_string()),
                        _ => {}
                    }
                }
            }
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        match &header {
            None => header = Some(cells.iter().map(|s| s.to_string()).collect()),
            Some(h) => {
                if cells.len() != h.len() {
                    return Err(Error::LengthMismatch(format!(
                        "row {} has {} cells, header has {}",
                        lineno + 1,
                        cells.len(),
                        h.len()
                    )));
                }
                let row = cells
                    .iter()
                    .map(|c| c.parse::<f32>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| malformed(path, format!("non-numeric row {}", lineno + 1)))?;
                rows.push(row);
            }
        }
    }
    let header = header.ok_or_else(|| malformed(path, "missing column header"))?;
    let fs = fs_hz.ok_or_else(|| malformed(path, "missing `# fs=` line"))?;
    let skip_time = matches!(
        header.first().map(|s| s.to_ascii_lowercase()).as_deref(),
        Some("time" | "t" | "sample")
    );
    let names: Vec<String> = header.into_iter().skip(skip_time as usize).collect();
    if names.is_empty() || rows.is_empty() {
        return Err(malformed(path, "no leads or no samples"));
    }
    for name in &names {
        if !registry.is_known(name) {
            return Err(Error::UnknownLead(name.clone()));
        }
    }
    let offset = skip_time as usize;
    let signal: Vec<Vec<f32>> = (0..names.len())
        .map(|k| rows.iter().map(|r| r[k + offset]).collect())
        .collect();
    let id = record_id.unwrap_or_else(|| {
        path.file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("record")
            .to_string()
    });
    let mut rec = EcgRecord::with_registry(id, names, fs, signal, Vec::new(), registry)?;
    rec.acquired_at = acquired_at;
    Ok(rec)
}

pub fn write_columnar_text(rec: &EcgRecord, path: &Path) -> Result<()> {
    let mut text = format!("# record_id={}, fs={}", rec.record_id(), rec.fs());
    if let Some(at) = rec.acquired_at() {
        text.push_str(&format!(", acquired_at={at}"));
    }
    text.push('\n');
    text.push_str(&rec.lead_names().join(","));
    text.push('\n');
    for t in 0..rec.n_samples() {
        let row: Vec<String> = rec.signal().iter().map(|r| r[t].to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    write_interval_sidecar(rec, path)
}

// ---------------------------------------------------------------------------
// interchange-binary

#[derive(Debug, Serialize, Deserialize)]
struct InterchangeHeader {
    record_id: String,
    fs: f64,
    lead_names: Vec<String>,
    n_samples: usize,
    #[serde(default)]
    acquired_at: Option<String>,
    #[serde(default)]
    annotations: Vec<Annotation>,
}

/// Serializes a record into the self-describing interchange container.
pub fn encode_interchange(rec: &EcgRecord) -> Result<Vec<u8>> {
    let header = InterchangeHeader {
        record_id: rec.record_id().to_string(),
        fs: rec.fs(),
        lead_names: rec.lead_names().to_vec(),
        n_samples: rec.n_samples(),
        acquired_at: rec.acquired_at.clone(),
        annotations: rec.annotations().to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(10 + json.len() + rec.n_leads() * rec.n_samples() * 4);
    out.extend_from_slice(INTERCHANGE_MAGIC);
    out.extend_from_slice(&INTERCHANGE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for row in rec.signal() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_interchange(bytes: &[u8], path: &Path, registry: &LeadRegistry) -> Result<EcgRecord> {
    if bytes.len() < 10 || &bytes[..4] != INTERCHANGE_MAGIC {
        return Err(malformed(path, "missing AECG magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != INTERCHANGE_VERSION {
        return Err(malformed(path, format!("unsupported container version {version}")));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = bytes
        .get(10..10 + hlen)
        .ok_or_else(|| malformed(path, "truncated header"))?;
    let header: InterchangeHeader =
        serde_json::from_slice(body).map_err(|e| malformed(path, e.to_string()))?;
    for name in &header.lead_names {
        if !registry.is_known(name) {
            return Err(Error::UnknownLead(name.clone()));
        }
    }
    let payload = &bytes[10 + hlen..];
    let expected = header.lead_names.len() * header.n_samples * 4;
    if payload.len() != expected {
        return Err(Error::LengthMismatch(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let n = header.n_samples.max(1);
    let signal = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect::<Vec<_>>()
        .chunks(n)
        .map(<[f32]>::to_vec)
        .collect();
    let mut rec = EcgRecord::with_registry(
        header.record_id,
        header.lead_names,
        header.fs,
        signal,
        header.annotations,
        registry,
    )?;
    rec.acquired_at = header.acquired_at;
    Ok(rec)
}

pub fn write_interchange(rec: &EcgRecord, path: &Path) -> Result<()> {
    let bytes = encode_interchange(rec)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
