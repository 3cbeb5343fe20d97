//! Evaluation protocols over the test split of built datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use anyecg_core::fusion::{with_placeholders, ChatMessage, Decoding, EcgChatModel};
use anyecg_core::records::CanonicalRecord;
use anyecg_curriculum::Corpus;
use anyecg_datagen::localization::materialize;
use anyecg_datagen::{Split, Subset};
use anyecg_evalkit::sweep::render_table;
use anyecg_evalkit::{
    exact_match, judge_all, macro_auc, masking_sweep, mean_score, parse_spans, report_to_scores, EvalError,
    EvalReport, HashingEmbedder, JudgeInput, LabelScoreMatrix, MaskMode, Responder, SweepItem,
};
use anyecg_llm::ChatClient;
use serde::Serialize;
use serde_json::json;

use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Localization,
    Reportgen,
    Ecgqa,
    Multiecg,
}

impl FromStr for Protocol {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "localization" => Ok(Self::Localization),
            "reportgen" => Ok(Self::Reportgen),
            "ecgqa" => Ok(Self::Ecgqa),
            "multiecg" => Ok(Self::Multiecg),
            other => Err(CliError::Usage(format!(
                "unknown protocol `{other}` (localization, reportgen, ecgqa, multiecg)"
            ))),
        }
    }
}

/// `all` or a comma-separated list such as `none,second`.
pub fn parse_masks(s: &str) -> Result<Vec<MaskMode>> {
    if s.trim() == "all" {
        return Ok(MaskMode::all().to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let m: MaskMode = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

/// Greedy model answers for single-turn questions.
pub struct ModelResponder<'a> {
    pub model: &'a EcgChatModel,
    pub max_new_tokens: usize,
}

impl Responder for ModelResponder<'_> {
    fn respond(&self, ecgs: &[&CanonicalRecord], question: &str) -> anyecg_evalkit::Result<String> {
        let messages = [ChatMessage::user(with_placeholders(question, ecgs.len()))];
        Ok(self
            .model
            .reply(ecgs, &messages, Decoding::Greedy, self.max_new_tokens)?)
    }
}

/// `limit` caps the test samples taken from each subset.
fn test_indices(corpus: &Corpus, subsets: &[Subset], limit: Option<usize>) -> Result<Vec<usize>> {
    let tasks: BTreeSet<Subset> = subsets.iter().copied().collect();
    let mut idx = Vec::new();
    for mut stream in corpus.streams(&tasks, Split::Test).into_values() {
        stream.sort_unstable();
        if let Some(n) = limit {
            stream.truncate(n);
        }
        idx.extend(stream);
    }
    idx.sort_unstable();
    if idx.is_empty() {
        let names: Vec<&str> = subsets.iter().map(|s| s.name()).collect();
        return Err(CliError::MissingInput(format!("no test samples for {}", names.join(", "))));
    }
    Ok(idx)
}

fn predict(responder: &ModelResponder<'_>, corpus: &Corpus, index: usize) -> Result<String> {
    let ex = corpus.example(index)?;
    let ecgs: Vec<&CanonicalRecord> = ex.ecgs.iter().collect();
    Ok(responder
        .model
        .reply(&ecgs, &ex.prompt, Decoding::Greedy, responder.max_new_tokens)?)
}

/// Mean IoU per dataset and mask mode, rows as datasets.
pub fn eval_localization(
    responder: &ModelResponder<'_>,
    corpus: &Corpus,
    modes: &[MaskMode],
    seed: u64,
    limit: Option<usize>,
) -> Result<(EvalReport, String)> {
    let idx = test_indices(corpus, &[Subset::Localization, Subset::LocalizationLong], limit)?;
    let mut items = Vec::with_capacity(idx.len());
    for i in idx {
        let s = &corpus.samples[i];
        let r = &s.ecg_refs[0];
        let rec = corpus
            .records
            .get(&r.record_id)
            .ok_or_else(|| anyecg_curriculum::TrainError::MissingRecord(r.record_id.clone()))?;
        let truth = parse_spans(&s.answer)
            .span_set()
            .cloned()
            .ok_or_else(|| EvalError::Config(format!("{}: answer is not span text", s.id)))?;
        items.push(SweepItem {
            dataset: s.subset.name().to_string(),
            record: materialize(r, rec)?,
            question: s.question.clone(),
            truth,
        });
    }
    let outcome = masking_sweep(&items, responder, modes, seed)?;
    let mut report = EvalReport::new("localization");
    for s in &outcome.samples {
        report.push_row(s);
    }
    for row in &outcome.rows {
        report.set(format!("{}/{}", row.dataset, row.mode.label()), row.mean_iou);
        report.set(
            format!("{}/{}/parse_failures", row.dataset, row.mode.label()),
            row.parse_failures as f64,
        );
    }
    report
        .notes
        .push("IoU is averaged over samples; unparseable answers score 1 against Not Found, else 0".into());
    let table = render_table(&outcome.rows);
    Ok((report, table))
}

fn statements(report: &str) -> Vec<String> {
    report
        .trim()
        .trim_start_matches("Report:")
        .split(',')
        .map(|s| s.trim().trim_end_matches('.').to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Serialize)]
struct TextRow<'a> {
    id: &'a str,
    question: &'a str,
    reference: &'a str,
    prediction: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact_match: Option<bool>,
}

/// Report generation scored as multi-label classification: each reference
/// statement is a label, predictions are scored by embedding similarity.
pub fn eval_reportgen(
    responder: &ModelResponder<'_>,
    corpus: &Corpus,
    embed_dim: usize,
    limit: Option<usize>,
) -> Result<EvalReport> {
    let idx = test_indices(corpus, &[Subset::Reportgen], limit)?;
    let refs: Vec<Vec<String>> = idx.iter().map(|&i| statements(&corpus.samples[i].answer)).collect();
    let labels: Vec<String> = refs.iter().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let embedder = HashingEmbedder { dim: embed_dim };
    let mut report = EvalReport::new("reportgen");
    let mut scores = Vec::with_capacity(idx.len());
    let mut truth = Vec::with_capacity(idx.len());
    for (&i, r) in idx.iter().zip(&refs) {
        let s = &corpus.samples[i];
        let prediction = predict(responder, corpus, i)?;
        scores.push(report_to_scores(&prediction, &labels, &embedder)?);
        truth.push(labels.iter().map(|l| r.contains(l)).collect());
        report.push_row(&TextRow {
            id: &s.id,
            question: &s.question,
            reference: &s.answer,
            prediction,
            exact_match: None,
        });
    }
    match macro_auc(&LabelScoreMatrix::new(labels, scores, truth)?) {
        Ok(auc) => {
            report.set("macro_auc", auc.macro_auc);
            report.set("classes_scored", auc.per_class.iter().flatten().count() as f64);
            if !auc.skipped.is_empty() {
                report
                    .notes
                    .push(format!("classes without both outcomes: {}", auc.skipped.join("; ")));
            }
        }
        Err(EvalError::NoValidClass) => report.notes.push("no class has both positive and negative samples".into()),
        Err(e) => return Err(e.into()),
    }
    Ok(report)
}

pub fn eval_ecgqa(responder: &ModelResponder<'_>, corpus: &Corpus, limit: Option<usize>) -> Result<EvalReport> {
    let idx = test_indices(corpus, &[Subset::Ecgqa], limit)?;
    let mut report = EvalReport::new("ecgqa");
    let mut hits = 0usize;
    for &i in &idx {
        let s = &corpus.samples[i];
        let prediction = predict(responder, corpus, i)?;
        let em = exact_match(&prediction, &s.answer);
        hits += em as usize;
        report.push_row(&TextRow {
            id: &s.id,
            question: &s.question,
            reference: &s.answer,
            prediction,
            exact_match: Some(em),
        });
    }
    report.set("exact_match", hits as f64 / idx.len() as f64);
    report.set("n", idx.len() as f64);
    Ok(report)
}

/// Judge inputs carry the question, each ECG's report and the prediction;
/// reference answers stay out of the request.
pub fn eval_multiecg<C: ChatClient + ?Sized>(
    responder: &ModelResponder<'_>,
    corpus: &Corpus,
    reports: &BTreeMap<String, String>,
    judge: &C,
    max_in_flight: usize,
    limit: Option<usize>,
) -> Result<EvalReport> {
    let idx = test_indices(corpus, &[Subset::Multiecg], limit)?;
    let mut inputs = Vec::with_capacity(idx.len());
    for &i in &idx {
        let s = &corpus.samples[i];
        let per_ecg = s
            .ecg_refs
            .iter()
            .map(|r| {
                reports
                    .get(&r.record_id)
                    .cloned()
                    .ok_or_else(|| CliError::MissingInput(format!("no report for record {}", r.record_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        inputs.push(JudgeInput {
            question: s.question.clone(),
            reports: per_ecg,
            prediction: predict(responder, corpus, i)?,
        });
    }
    let outcomes = judge_all(&inputs, judge, max_in_flight)?;
    let mut report = EvalReport::new("multiecg");
    for ((&i, input), outcome) in idx.iter().zip(&inputs).zip(&outcomes) {
        report.push_row(&json!({
            "id": corpus.samples[i].id,
            "question": input.question,
            "prediction": input.prediction,
            "score": outcome.score(),
        }));
    }
    let (mean, invalid) = mean_score(&outcomes);
    if let Some(m) = mean {
        report.set("judge_mean", m);
    }
    report.set("judge_invalid", invalid as f64);
    report.set("n", outcomes.len() as f64);
    report.notes.push(format!("judge: {}", judge.model_tag()));
    Ok(report)
}
