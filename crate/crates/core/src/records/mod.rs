//! ECG record model and the canonical preprocessing every other module
//! consumes: linear resampling to 100 Hz, per-lead min-max scaling to
//! [-1, 1], and placement into the 12 canonical lead slots.

mod io;
mod leads;

pub use io::{
    decode_interchange, encode_interchange, ingest_record, ingest_record_with,
    parse_annotation_sidecar, parse_columnar_text, write_columnar_text, write_interchange, write_waveform_db,
    RecordFormat,
};
pub use leads::{Lead, LeadRegistry, CANONICAL_LEAD_NAMES, NUM_LEADS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANONICAL_FS: f64 = 100.0;

/// Clipped annotations shorter than this are dropped by [`CanonicalRecord::slice`].
pub const MIN_CLIPPED_ANNOTATION_S: f64 = 0.05;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub onset: f64,
    pub offset: f64,
    pub label: String,
}

impl Annotation {
    pub fn new(onset: f64, offset: f64, label: impl Into<String>) -> Self {
        Self {
            onset,
            offset,
            label: label.into(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// A multi-lead recording at its native sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    record_id: String,
    signal: Vec<Vec<f32>>,
    lead_names: Vec<String>,
    slots: Vec<Lead>,
    fs: f64,
    annotations: Vec<Annotation>,
    acquired_at: Option<String>,
}

impl EcgRecord {
    pub fn new(
        record_id: impl Into<String>,
        lead_names: Vec<String>,
        fs: f64,
        signal: Vec<Vec<f32>>,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        Self::with_registry(
            record_id,
            lead_names,
            fs,
            signal,
            annotations,
            &LeadRegistry::default(),
        )
    }

    pub fn with_registry(
        record_id: impl Into<String>,
        lead_names: Vec<String>,
        fs: f64,
        signal: Vec<Vec<f32>>,
        annotations: Vec<Annotation>,
        registry: &LeadRegistry,
    ) -> Result<Self> {
        if signal.is_empty() {
            return Err(Error::InvalidRecord("record has no leads".into()));
        }
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::InvalidRecord(format!("sampling rate {fs} must be > 0")));
        }
        let t = signal[0].len();
        if t == 0 {
            return Err(Error::InvalidRecord("record has no samples".into()));
        }
        if signal.iter().any(|row| row.len() != t) {
            return Err(Error::LengthMismatch("leads have unequal lengths".into()));
        }
        if lead_names.len() != signal.len() {
            return Err(Error::LengthMismatch(format!(
                "{} lead names for {} signal rows",
                lead_names.len(),
                signal.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &lead_names {
            if !seen.insert(name.trim().to_ascii_uppercase()) {
                return Err(Error::InvalidRecord(format!("duplicate lead name `{name}`")));
            }
        }
        let slots = registry.resolve(&lead_names)?;
        let duration = t as f64 / fs;
        for a in &annotations {
            if !(a.onset >= 0.0 && a.onset <= a.offset && a.offset <= duration + TIME_EPS) {
                return Err(Error::LengthMismatch(format!(
                    "annotation `{}` [{}, {}] s outside signal of {duration} s",
                    a.label, a.onset, a.offset
                )));
            }
        }
        Ok(Self {
            record_id: record_id.into(),
            signal,
            lead_names,
            slots,
            fs,
            annotations,
            acquired_at: None,
        })
    }

    pub fn with_acquired_at(mut self, at: impl Into<String>) -> Self {
        self.acquired_at = Some(at.into());
        self
    }

    pub fn record_id(&self) -> &str {
        &self.record_id
    }
    pub fn signal(&self) -> &[Vec<f32>] {
        &self.signal
    }
    pub fn lead_names(&self) -> &[String] {
        &self.lead_names
    }
    pub fn fs(&self) -> f64 {
        self.fs
    }
    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }
    pub fn acquired_at(&self) -> Option<&str> {
        self.acquired_at.as_deref()
    }
    pub fn n_leads(&self) -> usize {
        self.signal.len()
    }
    pub fn n_samples(&self) -> usize {
        self.signal[0].len()
    }
    pub fn duration(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }
}

/// A record at 100 Hz with amplitudes in [-1, 1] laid out in the 12 canonical
/// slots. Absent slots are all-zero rows with `lead_mask[slot] == false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalRecord {
    pub record_id: String,
    pub signal: Vec<Vec<f32>>,
    pub lead_mask: [bool; NUM_LEADS],
    pub annotations: Vec<Annotation>,
    pub acquired_at: Option<String>,
}

impl CanonicalRecord {
    pub fn n_samples(&self) -> usize {
        self.signal[0].len()
    }

    pub fn duration(&self) -> f64 {
        self.n_samples() as f64 / CANONICAL_FS
    }

    pub fn present_leads(&self) -> Vec<Lead> {
        Lead::all().filter(|l| self.lead_mask[l.slot()]).collect()
    }

    /// Back to a plain record holding only the present leads.
    pub fn to_record(&self) -> EcgRecord {
        let present = self.present_leads();
        EcgRecord {
            record_id: self.record_id.clone(),
            signal: present.iter().map(|l| self.signal[l.slot()].clone()).collect(),
            lead_names: present.iter().map(|l| l.name().to_string()).collect(),
            slots: present,
            fs: CANONICAL_FS,
            annotations: self.annotations.clone(),
            acquired_at: self.acquired_at.clone(),
        }
    }

    /// Sub-window `[start, end)` in seconds, snapped to the 100 Hz grid.
    /// Annotations are clipped to the window and re-based to window time.
    pub fn slice(&self, start: f64, end: f64) -> Result<CanonicalRecord> {
        let duration = self.duration();
        if !(start >= 0.0 && start < end && end <= duration + TIME_EPS) {
            return Err(Error::WindowOutOfRange {
                start,
                end,
                duration,
            });
        }
        let i0 = (start * CANONICAL_FS).round() as usize;
        let i1 = ((end * CANONICAL_FS).round() as usize).min(self.n_samples());
        if i1 <= i0 {
            return Err(Error::WindowOutOfRange {
                start,
                end,
                duration,
            });
        }
        let w0 = i0 as f64 / CANONICAL_FS;
        let w1 = i1 as f64 / CANONICAL_FS;
        let annotations = self
            .annotations
            .iter()
            .filter_map(|a| clip_annotation(a, w0, w1))
            .collect();
        Ok(CanonicalRecord {
            record_id: self.record_id.clone(),
            signal: self.signal.iter().map(|row| row[i0..i1].to_vec()).collect(),
            lead_mask: self.lead_mask,
            annotations,
            acquired_at: self.acquired_at.clone(),
        })
    }

    /// Zeroes every lead not named in `keep`.
    pub fn mask_leads<S: AsRef<str>>(&self, keep: &[S]) -> Result<CanonicalRecord> {
        if keep.is_empty() {
            return Err(Error::LeadSelection("at least one lead must be kept".into()));
        }
        let mut kept = [false; NUM_LEADS];
        for name in keep {
            let name = name.as_ref();
            let lead = Lead::from_name(name)
                .ok_or_else(|| Error::LeadSelection(format!("`{name}` is not a canonical lead")))?;
            if !self.lead_mask[lead.slot()] {
                return Err(Error::LeadSelection(format!(
                    "lead {lead} is not present in {}",
                    self.record_id
                )));
            }
            kept[lead.slot()] = true;
        }
        let mut out = self.clone();
        for slot in 0..NUM_LEADS {
            if !kept[slot] {
                out.lead_mask[slot] = false;
                out.signal[slot].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(out)
    }

    /// Zero-pads at the end to `n_samples`; no-op when already that long.
    pub fn pad_to(&self, n_samples: usize) -> CanonicalRecord {
        let mut out = self.clone();
        for row in &mut out.signal {
            if row.len() < n_samples {
                row.resize(n_samples, 0.0);
            }
        }
        out
    }
}

fn clip_annotation(a: &Annotation, w0: f64, w1: f64) -> Option<Annotation> {
    let onset = a.onset.max(w0);
    let offset = a.offset.min(w1);
    if offset < onset || (offset == onset && a.offset > a.onset) {
        return None;
    }
    let clipped = onset > a.onset || offset < a.offset;
    if clipped && offset - onset < MIN_CLIPPED_ANNOTATION_S - TIME_EPS {
        return None;
    }
    Some(Annotation {
        onset: onset - w0,
        offset: offset - w0,
        label: a.label.clone(),
    })
}

/// Resamples to 100 Hz, scales each lead to [-1, 1], and lays the leads out
/// in canonical slot order.
pub fn canonicalize(rec: &EcgRecord) -> CanonicalRecord {
    let n_out = ((rec.n_samples() as f64 * CANONICAL_FS / rec.fs).round() as usize).max(1);
    let mut signal = vec![vec![0.0f32; n_out]; NUM_LEADS];
    let mut lead_mask = [false; NUM_LEADS];
    for (row, lead) in rec.signal.iter().zip(&rec.slots) {
        let resampled = resample_linear(row, rec.fs, n_out);
        signal[lead.slot()] = normalize_min_max(resampled);
        lead_mask[lead.slot()] = true;
    }
    CanonicalRecord {
        record_id: rec.record_id.clone(),
        signal,
        lead_mask,
        annotations: rec.annotations.clone(),
        acquired_at: rec.acquired_at.clone(),
    }
}

/// Linear interpolation onto the 100 Hz grid `t_i = i / 100`.
pub fn resample_linear(x: &[f32], fs: f64, n_out: usize) -> Vec<f32> {
    if fs == CANONICAL_FS && n_out == x.len() {
        return x.to_vec();
    }
    let last = x.len() - 1;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * fs / CANONICAL_FS;
            let i0 = pos.floor() as usize;
            if i0 >= last {
                return x[last];
            }
            let frac = pos - i0 as f64;
            let (a, b) = (x[i0] as f64, x[i0 + 1] as f64);
            (a + (b - a) * frac) as f32
        })
        .collect()
}

/// Per-lead min-max map to [-1, 1]; a constant lead becomes all zeros.
pub fn normalize_min_max(mut x: Vec<f32>) -> Vec<f32> {
    let (min, max) = x
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if min == -1.0 && max == 1.0 {
        return x;
    }
    if max == min {
        x.iter_mut().for_each(|v| *v = 0.0);
        return x;
    }
    let (min, range) = (min as f64, max as f64 - min as f64);
    for v in &mut x {
        *v = ((2.0 * (*v as f64 - min) / range - 1.0) as f32).clamp(-1.0, 1.0);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(leads: &[&str], fs: f64, t: usize) -> EcgRecord {
        let signal = leads
            .iter()
            .enumerate()
            .map(|(k, _)| (0..t).map(|i| ((i + k) as f32 * 0.37).sin()).collect())
            .collect();
        EcgRecord::new(
            "r",
            leads.iter().map(|s| s.to_string()).collect(),
            fs,
            signal,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn twelve_lead_500hz_ten_seconds() {
        let c = canonicalize(&rec(&CANONICAL_LEAD_NAMES, 500.0, 5000));
        assert_eq!(c.signal.len(), 12);
        assert!(c.signal.iter().all(|r| r.len() == 1000));
        assert!(c.lead_mask.iter().all(|&m| m));
        for row in &c.signal {
            let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!((lo, hi), (-1.0, 1.0));
        }
    }

    #[test]
    fn constant_lead_maps_to_zeros() {
        let r = EcgRecord::new("c", vec!["I".into()], 100.0, vec![vec![3.5; 50]], vec![]).unwrap();
        let c = canonicalize(&r);
        assert!(c.signal[0].iter().all(|&v| v == 0.0));
        assert!(c.lead_mask[0]);
    }

    #[test]
    fn two_lead_record_is_padded_to_twelve_slots() {
        let c = canonicalize(&rec(&["MLII", "V1"], 360.0, 3600));
        assert_eq!(c.lead_mask.iter().filter(|&&m| m).count(), 2);
        let zero_rows = c.signal.iter().filter(|r| r.iter().all(|&v| v == 0.0)).count();
        assert_eq!(zero_rows, 10);
        assert_eq!(c.present_leads(), vec![Lead::II, Lead::from_name("V1").unwrap()]);
    }

    #[test]
    fn minimal_record() {
        let r = EcgRecord::new("m", vec!["I".into()], 250.0, vec![vec![0.2]], vec![]).unwrap();
        assert_eq!((r.n_leads(), r.n_samples()), (1, 1));
        assert_eq!(canonicalize(&r).n_samples(), 1);
    }

    #[test]
    fn annotation_past_end_rejected() {
        let err = EcgRecord::new(
            "a",
            vec!["I".into()],
            100.0,
            vec![vec![0.0; 100]],
            vec![Annotation::new(0.5, 1.5, "V")],
        );
        assert!(matches!(err, Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn slice_examples() {
        let long = canonicalize(&rec(&["I"], 100.0, 60_000));
        let s = long.slice(0.0, 10.0).unwrap();
        assert_eq!(s.n_samples(), 1000);

        let mut ten = canonicalize(&rec(&["I"], 100.0, 1000));
        assert_eq!(ten.slice(0.0, 10.0).unwrap(), ten);

        ten.annotations = vec![Annotation::new(9.5, 10.0, "V")];
        let mut twenty = ten.pad_to(2000);
        twenty.annotations = vec![Annotation::new(9.5, 10.5, "V")];
        let s = twenty.slice(0.0, 10.0).unwrap();
        assert_eq!(s.annotations, vec![Annotation::new(9.5, 10.0, "V")]);
        // clipped remnant below 50 ms disappears
        let s = twenty.slice(10.47, 12.0).unwrap();
        assert!(s.annotations.is_empty());
        assert!(twenty.slice(5.0, 25.0).is_err());
        assert!(twenty.slice(3.0, 3.0).is_err());
    }

    #[test]
    fn mask_leads_rules() {
        let c = canonicalize(&rec(&["I", "II"], 100.0, 500));
        let one = c.mask_leads(&["I"]).unwrap();
        assert_eq!(one.present_leads(), vec![Lead::I]);
        assert!(one.signal[1].iter().all(|&v| v == 0.0));
        assert_eq!(c.mask_leads(&["I", "II"]).unwrap(), c);
        assert!(c.mask_leads::<&str>(&[]).is_err());
        assert!(c.mask_leads(&["V3"]).is_err());
    }
}
