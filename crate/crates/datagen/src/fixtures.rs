//! Small synthetic corpora standing in for the public datasets: an
//! arrhythmia corpus with beat annotations, a 12-lead corpus with reports,
//! and same-patient record groups.

use anyecg_core::records::{EcgRecord, CANONICAL_LEAD_NAMES};
use anyecg_core::synth::{synth_record, synth_report, SynthSpec, LBBB, PVC, RBBB};
use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::multiecg::{PatientGroup, PatientRecord};
use crate::Result;

/// Two-lead 360 Hz recordings of 30 to 75 s with PVC runs, plus LBBB or
/// RBBB beats on every fourth record.
pub fn arrhythmia_corpus(n: usize, seed: u64) -> Result<Vec<EcgRecord>> {
    (0..n)
        .map(|i| {
            let mut spec = SynthSpec::new(format!("arr{i:03}"), 360.0, 30.0 + (i % 4) as f64 * 15.0, &["MLII", "V1"]);
            spec.heart_rate = 60.0 + (i % 5) as f64 * 8.0;
            spec.ectopy = vec![(PVC.into(), 0.08)];
            match i % 4 {
                1 => spec.ectopy.push((LBBB.into(), 0.05)),
                2 => spec.ectopy.push((RBBB.into(), 0.05)),
                _ => {}
            }
            Ok(synth_record(&spec, seed.wrapping_add(i as u64))?)
        })
        .collect()
}

fn twelve_lead(id: String, rate: f64, ectopy: Vec<(String, f64)>, at: Option<String>, seed: u64) -> Result<EcgRecord> {
    let mut spec = SynthSpec::new(id, 500.0, 10.0, &CANONICAL_LEAD_NAMES);
    spec.heart_rate = rate;
    spec.ectopy = ectopy;
    spec.acquired_at = at;
    Ok(synth_record(&spec, seed)?)
}

fn draw_ectopy(rng: &mut ChaCha8Rng) -> Vec<(String, f64)> {
    match rng.random_range(0..5) {
        0 => vec![(PVC.into(), 0.15)],
        1 => vec![(LBBB.into(), 0.9)],
        2 => vec![(RBBB.into(), 0.9)],
        _ => Vec::new(),
    }
}

/// Ten-second 12-lead records at 500 Hz with a generated report each.
pub fn report_corpus(n: usize, seed: u64) -> Result<Vec<(EcgRecord, String)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let rate = rng.random_range(45.0..115.0);
            let ectopy = draw_ectopy(&mut rng);
            let rec = twelve_lead(format!("rep{i:04}"), rate, ectopy, None, rng.random())?;
            let report = synth_report(&rec);
            Ok((rec, report))
        })
        .collect()
}

/// Patients with 2 to 6 dated 12-lead records each, and the records.
pub fn patient_corpus(n_patients: usize, seed: u64) -> Result<(Vec<PatientGroup>, Vec<EcgRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epoch = NaiveDate::from_ymd_opt(2148, 1, 1).expect("valid date");
    let mut groups = Vec::with_capacity(n_patients);
    let mut records = Vec::new();
    for p in 0..n_patients {
        let k = rng.random_range(2..=6usize);
        let mut day = epoch + Duration::days(rng.random_range(0..365));
        let mut members = Vec::with_capacity(k);
        for j in 0..k {
            let date = day.format("%Y-%m-%d").to_string();
            let rec = twelve_lead(
                format!("pat{p:03}-{j}"),
                rng.random_range(50.0..110.0),
                draw_ectopy(&mut rng),
                Some(date.clone()),
                rng.random(),
            )?;
            members.push(PatientRecord {
                record_id: rec.record_id().to_string(),
                report: synth_report(&rec).split(", ").map(str::to_string).collect(),
                acquired_at: date,
            });
            records.push(rec);
            day += Duration::days(rng.random_range(30..400));
        }
        groups.push(PatientGroup {
            patient_id: format!("pat{p:03}"),
            records: members,
        });
    }
    Ok((groups, records))
}

/// A well-formed generation reply built from a group's reports, used when
/// no external model is configured.
pub fn template_reply(group: &PatientGroup) -> String {
    let n = group.records.len();
    let summary: Vec<String> = group
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| format!("ECG{}: {}.", i + 1, r.report.join(", ")))
        .collect();
    let first = &group.records[0];
    let last = &group.records[n - 1];
    let pairs = [
        ("Provide a report for each electrocardiogram.".to_string(), summary.join(" ")),
        (
            "What does the most recent ECG show?".to_string(),
            format!("The most recent ECG shows {}.", last.report.join(", ").to_lowercase()),
        ),
        (
            "What did the first ECG show?".to_string(),
            format!("The first ECG shows {}.", first.report.join(", ").to_lowercase()),
        ),
        (
            format!("These ECGs were taken on {}. Please help me take a look.", group.records.iter().map(|r| r.acquired_at.as_str()).collect::<Vec<_>>().join(", ")),
            summary.join(" "),
        ),
        (
            "How many ECGs are provided?".to_string(),
            format!("There are {n} ECGs."),
        ),
        (
            "Has the rhythm changed between the first and the last ECG?".to_string(),
            if first.report.first() == last.report.first() {
                format!("No, both show {}.", first.report[0].to_lowercase())
            } else {
                format!(
                    "Yes, from {} to {}.",
                    first.report[0].to_lowercase(),
                    last.report[0].to_lowercase()
                )
            },
        ),
        (
            "Is the latest ECG normal?".to_string(),
            if last.report.iter().any(|s| s == "Normal ECG") { "Yes.".into() } else { "No.".into() },
        ),
        (
            "What can be found by combining these ECGs?".to_string(),
            summary.join(" "),
        ),
    ];
    pairs
        .iter()
        .map(|(q, a)| serde_json::json!({"q": q, "a": a}).to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Offline generation client answering each group's prompt with
/// [`template_reply`].
pub fn template_client(groups: &[PatientGroup]) -> Result<anyecg_llm::ScriptedClient> {
    let mut replies = std::collections::HashMap::new();
    for g in groups {
        let mut sorted = g.clone();
        sorted.records.sort_by(|a, b| a.acquired_at.cmp(&b.acquired_at));
        let (prompt, _) = crate::multiecg::fill_prompt(&sorted)?;
        replies.insert(prompt, template_reply(&sorted));
    }
    Ok(anyecg_llm::ScriptedClient::from_fn(move |req| {
        let text = req.text();
        replies
            .get(&text)
            .cloned()
            .ok_or_else(|| anyecg_llm::LlmError::Decode("no template for this prompt".into()))
    })
    .with_tag("template"))
}

/// Yes/no questions over report-corpus records, in the source QA format.
pub fn ecgqa_rows(corpus: &[(EcgRecord, String)], per_record: usize) -> Vec<crate::ecgqa::EcgQaRow> {
    let findings = [
        ("premature ventricular contractions", "premature ventricular contractions"),
        ("left bundle branch block", "left bundle branch block"),
        ("right bundle branch block", "right bundle branch block"),
        ("sinus bradycardia", "Sinus bradycardia"),
        ("sinus tachycardia", "Sinus tachycardia"),
    ];
    let mut rows = Vec::new();
    for (i, (rec, report)) in corpus.iter().enumerate() {
        for k in 0..per_record {
            let (name, needle) = findings[(i + k) % findings.len()];
            rows.push(crate::ecgqa::EcgQaRow {
                question: format!("Does this ECG show {name}?"),
                answer: serde_json::json!([if report.contains(needle) { "yes" } else { "no" }]),
                ecg_id: serde_json::json!([rec.record_id()]),
                split: crate::sample::Split::Train,
            });
        }
    }
    rows
}
