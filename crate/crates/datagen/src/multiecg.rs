//! Multi-ECG QA generated by an external chat model from a patient's
//! reports and acquisition dates.

use anyecg_llm::{complete_all, ChatClient, ChatRequest};
use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::sample::{EcgRef, QaSample, Split, Subset, Times};
use crate::templates::{py_list, MULTIECG_PROMPT};
use crate::{record_rng, DatagenError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub record_id: String,
    /// Report statements, in report order.
    pub report: Vec<String>,
    /// `YYYY-MM-DD`.
    pub acquired_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientGroup {
    pub patient_id: String,
    pub records: Vec<PatientRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiEcgConfig {
    pub seed: u64,
    pub temperature: f64,
    pub pairs_per_patient: usize,
    pub max_in_flight: usize,
    /// Forward a per-patient seed to the client.
    pub pass_seed: bool,
}

impl Default for MultiEcgConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            temperature: 0.7,
            pairs_per_patient: 8,
            max_in_flight: 4,
            pass_seed: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiEcgOutput {
    pub samples: Vec<QaSample>,
    /// Malformed reply lines left after the retry.
    pub skipped_lines: usize,
    pub retried_patients: usize,
    pub patients_without_pairs: Vec<String>,
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| DatagenError::Config(format!("acquisition date `{s}`: {e}")))
}

/// Days since the earliest acquisition in the group.
pub fn relative_days(dates: &[String]) -> Result<Vec<i64>> {
    let parsed = dates.iter().map(|d| parse_date(d)).collect::<Result<Vec<_>>>()?;
    let first = parsed.iter().min().copied();
    Ok(parsed
        .iter()
        .map(|d| first.map_or(0, |f| (*d - f).num_days()))
        .collect())
}

/// The generation prompt for one patient; records are taken in date order.
pub fn fill_prompt(group: &PatientGroup) -> Result<(String, Times)> {
    let dates: Vec<String> = group.records.iter().map(|r| r.acquired_at.trim().to_string()).collect();
    let rel = relative_days(&dates)?;
    let reports: Vec<String> = group.records.iter().map(|r| py_list(&r.report)).collect();
    let rel_text = format!(
        "[{}] days",
        rel.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
    );
    let prompt = MULTIECG_PROMPT
        .replace("{reports}", &format!("[{}]", reports.join(", ")))
        .replace("{acquisition_time}", &py_list(&dates))
        .replace("{acquisition_time_relative}", &rel_text);
    Ok((
        prompt,
        Times {
            acquired_at: dates,
            relative_days: rel,
        },
    ))
}

#[derive(Debug, Deserialize)]
struct Pair {
    q: String,
    a: String,
}

/// Pairs found in a reply and the number of malformed lines. Blank lines
/// and code fences are ignored.
pub fn parse_pairs(reply: &str) -> (Vec<(String, String)>, usize) {
    let mut pairs = Vec::new();
    let mut bad = 0;
    for line in reply.lines().map(str::trim) {
        if line.is_empty() || line.starts_with("```") {
            continue;
        }
        let line = line.trim_end_matches(',');
        match serde_json::from_str::<Pair>(line) {
            Ok(p) if !p.q.trim().is_empty() && !p.a.trim().is_empty() => {
                pairs.push((p.q.trim().to_string(), p.a.trim().to_string()))
            }
            _ => bad += 1,
        }
    }
    (pairs, bad)
}

fn sort_group(group: &PatientGroup) -> Result<PatientGroup> {
    if !(2..=6).contains(&group.records.len()) {
        return Err(DatagenError::Config(format!(
            "patient {} has {} records, expected 2 to 6",
            group.patient_id,
            group.records.len()
        )));
    }
    let mut g = group.clone();
    let mut keyed = Vec::with_capacity(g.records.len());
    for r in g.records.drain(..) {
        keyed.push((parse_date(&r.acquired_at)?, r));
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.record_id.cmp(&b.1.record_id)));
    g.records = keyed.into_iter().map(|(_, r)| r).collect();
    Ok(g)
}

/// Generates QA pairs for each patient. Patients are processed in id order.
/// A reply with malformed lines is requested once more and the attempt with
/// more valid pairs is kept. Client errors on the first attempt are fatal.
pub fn build_multiecg<C: ChatClient + ?Sized>(
    groups: &[PatientGroup],
    client: &C,
    cfg: &MultiEcgConfig,
) -> Result<MultiEcgOutput> {
    let mut sorted = groups.iter().map(sort_group).collect::<Result<Vec<_>>>()?;
    sorted.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));

    let mut prompts = Vec::with_capacity(sorted.len());
    let mut requests = Vec::with_capacity(sorted.len());
    for g in &sorted {
        let (prompt, times) = fill_prompt(g)?;
        let seed = cfg.pass_seed.then(|| record_rng(cfg.seed, &g.patient_id).random::<u64>());
        requests.push(
            ChatRequest::user(prompt.clone())
                .with_temperature(cfg.temperature)
                .with_seed(seed),
        );
        prompts.push(times);
    }

    let mut attempts = Vec::with_capacity(sorted.len());
    for r in complete_all(client, &requests, cfg.max_in_flight) {
        attempts.push(parse_pairs(&r?));
    }

    let retry_idx: Vec<usize> = (0..attempts.len()).filter(|&i| attempts[i].1 > 0).collect();
    let retry_reqs: Vec<ChatRequest> = retry_idx
        .iter()
        .map(|&i| {
            let mut r = requests[i].clone();
            r.seed = r.seed.map(|s| s.wrapping_add(1));
            r
        })
        .collect();
    let mut out = MultiEcgOutput {
        retried_patients: retry_idx.len(),
        ..Default::default()
    };
    for (&i, r) in retry_idx.iter().zip(complete_all(client, &retry_reqs, cfg.max_in_flight)) {
        match r {
            Ok(reply) => {
                let second = parse_pairs(&reply);
                if second.0.len() > attempts[i].0.len() {
                    attempts[i] = second;
                }
            }
            Err(e) => warn!(patient = %sorted[i].patient_id, error = %e, "retry failed, keeping first reply"),
        }
    }

    for ((g, times), (pairs, bad)) in sorted.iter().zip(prompts).zip(attempts) {
        out.skipped_lines += bad;
        if pairs.is_empty() {
            out.patients_without_pairs.push(g.patient_id.clone());
            continue;
        }
        debug!(patient = %g.patient_id, pairs = pairs.len(), skipped = bad, "generated");
        for (k, (q, a)) in pairs.into_iter().take(cfg.pairs_per_patient).enumerate() {
            out.samples.push(QaSample {
                id: format!("multiecg/{}/{:02}", g.patient_id, k + 1),
                subset: Subset::Multiecg,
                split: Split::Train,
                source: g.patient_id.clone(),
                question: q,
                answer: a,
                ecg_refs: g.records.iter().map(|r| EcgRef::whole(r.record_id.clone())).collect(),
                times: Some(times.clone()),
                class: None,
            });
        }
    }
    if out.samples.is_empty() {
        return Err(DatagenError::NoPairs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_days_from_paper_example() {
        let dates = ["2148-11-12", "2149-06-06", "2149-12-24"].map(String::from);
        assert_eq!(relative_days(&dates).unwrap(), vec![0, 206, 407]);
    }

    #[test]
    fn parse_counts_bad_lines() {
        let reply = "```json\n{\"q\": \"a?\", \"a\": \"b\"}\nnot json\n\n{\"q\": \"c?\", \"a\": \"d\"}\n```";
        let (pairs, bad) = parse_pairs(reply);
        assert_eq!(pairs.len(), 2);
        assert_eq!(bad, 1);
    }
}
