//! One line per acceptance criterion, each checked against an independent
//! oracle at the stated tolerance. Run with `--nocapture` to see the table.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use anyecg_cli::commands::{self, BuildTarget, Generator};
use anyecg_cli::data::{load_corpus, report_map, write_synthetic, Inputs, SynthSizes};
use anyecg_cli::eval::{eval_multiecg, ModelResponder};
use anyecg_cli::repl::run_repl;
use anyecg_cli::service::ChatService;
use anyecg_cli::{AppConfig, RunDir};
use anyecg_core::encoder::EncoderConfig;
use anyecg_core::fusion::{
    with_placeholders, ChatMessage, Decoding, EcgChatModel, LanguageModel, LmConfig, ModelConfig, Precision,
    Tokenizer, TrainExample,
};
use anyecg_core::nn::ParamGroup;
use anyecg_core::records::{canonicalize, CanonicalRecord, CANONICAL_LEAD_NAMES};
use anyecg_core::synth::{synth_record, SynthSpec};
use anyecg_curriculum::desk::{desk_corpus, prepare_desk_base, tiny_model_config, DeskCorpus, DeskSizes};
use anyecg_curriculum::{
    overfit_localization, run_stage, ContrastiveConfig, OverfitConfig, StageSpec, Trainer, WarmupConfig,
};
use anyecg_datagen::fixtures::arrhythmia_corpus;
use anyecg_datagen::sample::to_jsonl;
use anyecg_datagen::templates::ECGQA_SUFFIX;
use anyecg_datagen::{
    build_localization, materialize, read_ecgqa, split_by_record, subset_ecgqa, ClipMode, EcgQaConfig,
    LocalizationConfig, QaSample, Split, Subset,
};
use anyecg_evalkit::spans::{Span, SpanSet};
use anyecg_evalkit::judge::JUDGE_TEMPLATE;
use anyecg_evalkit::{class_auc, macro_auc, parse_spans, score_answer, temporal_iou, LabelScoreMatrix};
use anyecg_llm::{RecordingClient, ScriptedClient};
use anyhow::{ensure, Context, Result};
use base64::Engine as _;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn toy_config(precision: Precision) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            depth: 2,
            width: 32,
            heads: 4,
            ..EncoderConfig::desk()
        },
        lm: LmConfig {
            layers: 2,
            width: 32,
            heads: 4,
            ..LmConfig::default()
        },
        precision,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn toy_tokenizer() -> Tokenizer {
    Tokenizer::build(["sinus rhythm with premature ventricular contractions", "normal ecg"], 200, 1)
}

fn twelve_lead(id: &str, seconds: f64, seed: u64) -> CanonicalRecord {
    canonicalize(&synth_record(&SynthSpec::new(id, 500.0, seconds, &CANONICAL_LEAD_NAMES), seed).unwrap())
}

fn patch_count_law() -> Result<String> {
    let model = EcgChatModel::new(toy_config(Precision::F64), toy_tokenizer())?;
    let ten = twelve_lead("a", 10.0, 1);
    ensure!(ten.n_samples() == 1000);
    let seq = model.encoder().patchify(&ten)?;
    ensure!(seq.n == 60, "{} patches", seq.n);
    ensure!(seq.tokens.dims()[0] == 61, "{:?} tokens with CLS", seq.tokens.dims());

    let twenty = twelve_lead("b", 20.0, 2);
    let (cls, patches) = model.encode_dynamic(&twenty)?;
    ensure!(patches.dims()[0] == 120, "{:?}", patches.dims());
    let mut mean = vec![0.0; cls.elem_count()];
    for (a, b) in [(0.0, 10.0), (10.0, 20.0)] {
        let e = model.encoder().encode_clip(&model.encoder().patchify(&twenty.slice(a, b)?)?)?;
        for (m, c) in mean.iter_mut().zip(flat(&e.cls)) {
            *m += c / 2.0;
        }
    }
    let dev = flat(&cls).iter().zip(&mean).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    ensure!(dev <= 1e-6, "CLS deviates from the per-clip mean by {dev}");
    Ok(format!("10 s -> 60 + CLS, 20 s -> 120, CLS mean deviation {dev:.1e}"))
}

fn lora_identity() -> Result<String> {
    let model = EcgChatModel::new(toy_config(Precision::F32), toy_tokenizer())?;
    let lm = model.lm();
    let base = lm.without_adapters();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let t = rng.random_range(1..24);
        let x = randn(&mut rng, &[1, t, lm.width()], DType::F32);
        ensure!(
            flat(&lm.forward_embeddings(&x)?) == flat(&base.forward_embeddings(&x)?),
            "fresh adapters changed the logits"
        );
    }
    for (name, var) in model.store().iter() {
        if name.starts_with("lora.") && name.ends_with(".b") {
            var.set(&(randn(&mut rng, var.dims(), DType::F32) * 0.05)?)?;
        }
    }
    let merged = lm.merged()?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = randn(&mut rng, &[2, 16, lm.width()], DType::F32);
        let a = flat(&lm.forward_embeddings(&x)?);
        let m = flat(&merged.forward_embeddings(&x)?);
        let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        worst = worst.max(a.iter().zip(&m).fold(0.0f64, |s, (x, y)| s.max((x - y).abs())) / scale);
    }
    ensure!(worst <= 1e-5, "merged vs adapter relative {worst}");
    Ok(format!("100/100 exact with B=0, merged relative {worst:.1e}"))
}

fn small_desk() -> DeskCorpus {
    desk_corpus(
        &DeskSizes {
            report_records: 32,
            arrhythmia_records: 4,
            patients: 3,
            max_per_subset: Some(24),
            max_long: Some(4),
            test_fraction: 0.2,
        },
        21,
    )
    .unwrap()
}

fn toy_stage1(batch: usize, steps: usize) -> StageSpec {
    let mut s = StageSpec::table3(1);
    s.batch = batch;
    s.epochs = 100;
    s.max_steps = Some(steps);
    s.lr = 1e-3;
    s.seed = 9;
    s
}

fn stage_freeze_audit() -> Result<String> {
    let desk = small_desk();
    let model = EcgChatModel::new(tiny_model_config(2), desk.tokenizer.clone())?;
    let before = model.store().hashes()?;
    let steps = Trainer::new(&model, toy_stage1(4, 50), &desk.corpus)?.run(None)?.len();
    ensure!(steps == 50, "{steps} steps");
    let after = model.store().hashes()?;
    let group = |n: &str| ParamGroup::from_name(n);
    let changed = |g: ParamGroup| before.iter().any(|(n, h)| group(n) == Some(g) && after[n] != *h);
    let lm_moved: Vec<&String> = before
        .iter()
        .filter(|(n, h)| group(n) == Some(ParamGroup::LmBase) && after[*n] != **h)
        .map(|(n, _)| n)
        .collect();
    ensure!(lm_moved.is_empty(), "base LM tensors changed: {lm_moved:?}");
    ensure!(changed(ParamGroup::Connector), "connector unchanged");
    ensure!(changed(ParamGroup::Encoder), "encoder unchanged");
    let n_lm = before.keys().filter(|n| group(n) == Some(ParamGroup::LmBase)).count();
    Ok(format!("{n_lm} base-LM tensors unchanged after 50 steps; connector and encoder moved"))
}

/// Disjoint spans on a `step`-second grid within [0, 60].
fn random_set(rng: &mut ChaCha8Rng, step: f64) -> SpanSet {
    let n = rng.random_range(1..=4);
    let ticks = (60.0 / step).round() as i64;
    let mut cuts: Vec<i64> = (0..2 * n).map(|_| rng.random_range(0..=ticks)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let set = SpanSet::from_spans(
        cuts.chunks_exact(2)
            .map(|c| Span::new(c[0] as f64 * step, c[1] as f64 * step))
            .collect::<Vec<_>>(),
    );
    if set.is_not_found() {
        random_set(rng, step)
    } else {
        set
    }
}

fn raster_iou(a: &SpanSet, b: &SpanSet) -> f64 {
    let cells = |s: &SpanSet| -> Vec<bool> {
        (0..60_000)
            .map(|i| {
                let t = (i as f64 + 0.5) / 1000.0;
                s.spans().iter().any(|x| t >= x.start && t < x.end)
            })
            .collect()
    };
    let (ra, rb) = (cells(a), cells(b));
    let inter = ra.iter().zip(&rb).filter(|(x, y)| **x && **y).count();
    let union = ra.iter().zip(&rb).filter(|(x, y)| **x || **y).count();
    inter as f64 / union as f64
}

fn pair_count_auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0usize);
    for (i, &ti) in truth.iter().enumerate() {
        for (j, &tj) in truth.iter().enumerate() {
            if ti && !tj {
                pairs += 1;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

fn metric_oracles() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let step = if k % 2 == 0 { 0.1 } else { 0.001 };
        let (p, t) = (random_set(&mut rng, step), random_set(&mut rng, step));
        worst = worst.max((temporal_iou(&p, &t) - raster_iou(&p, &t)).abs());
    }
    ensure!(worst <= 2e-3, "IoU vs raster {worst}");

    let truth = SpanSet::from_spans([Span::new(2.0, 3.7)]);
    let t9 = score_answer(&parse_spans("Duration: 1.9s-3.7s"), &truth);
    ensure!((t9 - 1.7 / 1.8).abs() <= 1e-9, "Table 9 case scored {t9}");

    let mut fixtures = 0;
    for n in 2..=6usize {
        for mask in 0..(1u32 << n) {
            let truth: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            for code in 0..3usize.pow(n as u32) {
                let s: Vec<f64> = (0..n).map(|i| (code / 3usize.pow(i as u32) % 3) as f64).collect();
                ensure!(class_auc(&s, &truth) == pair_count_auc(&s, &truth), "{s:?} {truth:?}");
                fixtures += 1;
            }
        }
    }
    for _ in 0..2000 {
        let n = rng.random_range(2..=12);
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(0..5) as f64 / 4.0).collect()).collect();
        let truth: Vec<Vec<bool>> = (0..n).map(|_| (0..4).map(|_| rng.random_bool(0.4)).collect()).collect();
        let oracle: Vec<Option<f64>> = (0..4)
            .map(|j| {
                let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
                let t: Vec<bool> = truth.iter().map(|r| r[j]).collect();
                pair_count_auc(&s, &t)
            })
            .collect();
        let names = ["a", "b", "c", "d"].map(String::from).to_vec();
        let m = LabelScoreMatrix::new(names, scores, truth)?;
        if let Ok(r) = macro_auc(&m) {
            ensure!(r.per_class == oracle, "per-class AUC differs from pair counting");
            let valid: Vec<f64> = oracle.iter().flatten().copied().collect();
            ensure!(r.macro_auc == valid.iter().sum::<f64>() / valid.len() as f64);
        } else {
            ensure!(oracle.iter().all(Option::is_none));
        }
        fixtures += 1;
    }
    let constant = LabelScoreMatrix::new(
        vec!["x".into(), "y".into()],
        vec![vec![0.3, 0.3]; 6],
        (0..6).map(|i| vec![i % 2 == 0, i < 3]).collect(),
    )?;
    let c = macro_auc(&constant)?.macro_auc;
    ensure!(c == 0.5, "constant scores gave {c}");
    Ok(format!("raster worst {worst:.1e}, Table 9 {t9:.6}, AUC exact on {fixtures} fixtures, constant 0.5"))
}

fn grammar_round_trip() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let s = random_set(&mut rng, 0.1);
        let text = s.render();
        let back = parse_spans(&text).span_set().cloned().context("render did not parse")?;
        ensure!(back.spans().len() == s.spans().len(), "{text}");
        for (a, b) in back.spans().iter().zip(s.spans()) {
            ensure!((a.start - b.start).abs() < 1e-9 && (a.end - b.end).abs() < 1e-9, "{text}");
        }
    }
    let cases: [(&str, &[(f64, f64)]); 3] = [
        ("Duration: 1.9s-3.1s, 6.8s-8.1s, 14.3s-15.0s", &[(1.9, 3.1), (6.8, 8.1), (14.3, 15.0)]),
        ("Duration: 1.9s-3.7s", &[(1.9, 3.7)]),
        ("Duration: 2.0s-3.7s", &[(2.0, 3.7)]),
    ];
    for (text, want) in cases {
        let got: Vec<(f64, f64)> = parse_spans(text)
            .span_set()
            .context(text)?
            .spans()
            .iter()
            .map(|s| (s.start, s.end))
            .collect();
        ensure!(got == want, "{text} parsed to {got:?}");
    }
    let nf = parse_spans("Not Found").span_set().cloned().context("Not Found")?;
    ensure!(nf == SpanSet::NotFound && nf.render() == "Not Found");
    Ok("1000 random sets, 3 literals, Not Found".into())
}

fn dataset_builders() -> Result<String> {
    let build = |seed: u64| -> Result<(Vec<CanonicalRecord>, Vec<QaSample>, Vec<anyecg_datagen::localization::WindowProvenance>)> {
        let recs: Vec<CanonicalRecord> = arrhythmia_corpus(20, seed)?.iter().map(canonicalize).collect();
        let short = build_localization(&recs, &LocalizationConfig::new(ClipMode::Short, seed))?;
        let long = build_localization(&recs, &LocalizationConfig::new(ClipMode::Long, seed))?;
        let mut all: Vec<QaSample> = short.samples.iter().chain(&long.samples).cloned().collect();
        split_by_record(&mut all, 0.2, seed);
        let prov = short.provenance.into_iter().chain(long.provenance).collect();
        Ok((recs, all, prov))
    };
    let (recs, all, prov) = build(1)?;
    let by_id: HashMap<&str, &CanonicalRecord> = recs.iter().map(|r| (r.record_id.as_str(), r)).collect();

    let ids = |split: Split| -> BTreeSet<&str> {
        all.iter()
            .filter(|s| s.split == split)
            .flat_map(|s| s.ecg_refs.iter().map(|r| r.record_id.as_str()))
            .collect()
    };
    ensure!(ids(Split::Train).is_disjoint(&ids(Split::Test)), "record in both splits");

    let (mut n_short, mut n_long, mut n_neg) = (0, 0, 0);
    for s in &all {
        let (a, b) = s.ecg_refs[0].window.context("clip without window")?;
        let rec = by_id[s.source.as_str()];
        match s.subset {
            Subset::Localization => {
                ensure!((b - a - 10.0).abs() < 1e-9, "{}: {} s", s.id, b - a);
                ensure!(materialize(&s.ecg_refs[0], rec)?.n_samples() == 1000);
                n_short += 1;
            }
            _ => {
                ensure!((10.0 - 1e-9..=60.0 + 1e-9).contains(&(b - a)), "{}: {} s", s.id, b - a);
                n_long += 1;
            }
        }
        if s.answer == "Not Found" {
            let class = s.class.as_deref().context("negative without class")?;
            ensure!(
                !rec.annotations.iter().any(|x| x.label == class && x.offset >= a && x.onset <= b),
                "{} touches {class}",
                s.id
            );
            n_neg += 1;
        }
    }
    let mut n_mid = 0;
    for p in &prov {
        if let Some((r0, r1)) = p.region {
            let mid = (r0 + r1) / 2.0;
            ensure!(p.window.0 <= mid + 1e-9 && mid <= p.window.1 + 1e-9, "{}", p.sample_id);
            n_mid += 1;
        }
    }
    ensure!(n_short > 0 && n_long > 0 && n_neg > 0 && n_mid > 0);
    let again = build(1)?.1;
    ensure!(to_jsonl(&all)?.as_bytes() == to_jsonl(&again)?.as_bytes(), "rebuild differs");
    Ok(format!(
        "{n_short} short, {n_long} long, {n_neg} negatives, {n_mid} midpoints, no leakage, byte-identical rebuild"
    ))
}

fn ecgqa_subsetter() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("train.jsonl");
    let rows: String = (0..200)
        .map(|i| {
            let q = if i % 10 == 0 {
                format!("Does ECG {i} show atrial fibrillation?{ECGQA_SUFFIX}")
            } else {
                format!("Does ECG {i} show atrial fibrillation?")
            };
            serde_json::json!({"question": q, "answer": "no", "ecg_id": i}).to_string() + "\n"
        })
        .collect();
    std::fs::write(&path, rows)?;
    let rows = read_ecgqa(&path)?;
    ensure!(rows.len() == 200);
    let out = subset_ecgqa(&rows, &EcgQaConfig { fraction: 0.10, seed: 8 })?;
    ensure!(out.samples.len() == 20, "{} rows emitted", out.samples.len());
    for s in &out.samples {
        ensure!(s.question.ends_with(ECGQA_SUFFIX), "{}", s.question);
        ensure!(s.question.matches(ECGQA_SUFFIX.trim()).count() == 1, "{}", s.question);
    }
    Ok("200 -> 20, suffix exactly once".into())
}

fn set_element(var: &Var, i: usize, value: f64) {
    let mut v = flat(var.as_tensor());
    v[i] = value;
    var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
}

fn gradient_checks() -> Result<String> {
    let mut worst = 0.0f64;
    for param in ["connector.fc1.weight", "connector.fc2.weight", "encoder.signal_proj.weight"] {
        let model = EcgChatModel::new(toy_config(Precision::F64), toy_tokenizer())?;
        let ecg = twelve_lead("g", 10.0, 4);
        let example = TrainExample {
            ecgs: vec![&ecg],
            prompt: vec![ChatMessage::user("<ecg>\nnormal ecg")],
            answer: "sinus rhythm with premature ventricular contractions".into(),
        };
        let loss = |m: &EcgChatModel| m.batch_loss(std::slice::from_ref(&example)).unwrap();
        let var = model.store().get(param).context(param)?.clone();
        let g = flat(loss(&model).backward()?.get(var.as_tensor()).context("no gradient")?);
        let orig = flat(var.as_tensor());
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        let mut picks = order[..6].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        while picks.len() < 12 {
            let i = rng.random_range(0..g.len());
            if g[i].abs() > 1e-6 && !picks.contains(&i) {
                picks.push(i);
            }
        }
        let eps = 1e-5;
        for i in picks {
            set_element(&var, i, orig[i] + eps);
            let up = loss(&model).to_scalar::<f64>()?;
            set_element(&var, i, orig[i] - eps);
            let down = loss(&model).to_scalar::<f64>()?;
            set_element(&var, i, orig[i]);
            let fd = (up - down) / (2.0 * eps);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs());
            ensure!(rel <= 1e-3, "{param}[{i}] analytic {} numeric {fd}", g[i]);
            worst = worst.max(rel);
        }
    }
    Ok(format!("connector and signal projection, worst relative {worst:.1e}"))
}

fn curriculum_smoke() -> Result<String> {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let desk = desk_corpus(&DeskSizes::default(), 11)?;
    ensure!(desk.corpus.samples.len() == 256, "{} samples", desk.corpus.samples.len());
    let base = prepare_desk_base(
        &desk,
        &tiny_model_config(11),
        &ContrastiveConfig {
            epochs: 2,
            ..ContrastiveConfig::default()
        },
        &WarmupConfig {
            steps: 150,
            ..WarmupConfig::default()
        },
        dir.path(),
    )?;
    let mut init = base;
    let mut heldout = (0.0, 0.0);
    for stage in 1..=3u8 {
        let mut spec = StageSpec::table3(stage);
        spec.batch = 8;
        spec.lr = 1e-3;
        spec.seed = 5;
        let out = dir.path().join(format!("stage{stage}.safetensors"));
        let (_, report) = run_stage(&spec, &desk.corpus, &init, &out, None)?;
        ensure!(report.frozen_violations.is_empty(), "{:?}", report.frozen_violations);
        if stage == 2 {
            heldout = (report.heldout_before, report.heldout_after);
        }
        init = out;
    }
    let elapsed = start.elapsed();
    ensure!(heldout.1 < heldout.0, "stage-2 held-out {:.4} -> {:.4}", heldout.0, heldout.1);
    ensure!(elapsed.as_secs() < 20 * 60, "took {elapsed:?}");

    let small = small_desk();
    let bits = |steps: Vec<anyecg_curriculum::StepRecord>| -> Vec<u64> { steps.iter().map(|r| r.loss.to_bits()).collect() };
    let straight = {
        let m = EcgChatModel::new(tiny_model_config(4), small.tokenizer.clone())?;
        let mut t = Trainer::new(&m, toy_stage1(2, 60), &small.corpus)?;
        let steps = t.run(None)?;
        bits(steps)
    };
    let state = dir.path().join("state.safetensors");
    let mut resumed: Vec<u64> = {
        let m = EcgChatModel::new(tiny_model_config(4), small.tokenizer.clone())?;
        let mut t = Trainer::new(&m, toy_stage1(2, 60), &small.corpus)?;
        let l = bits(t.run(Some(30))?);
        t.save_state(&state)?;
        l
    };
    let m = EcgChatModel::new(tiny_model_config(99), small.tokenizer.clone())?;
    let mut t = Trainer::resume(&m, toy_stage1(2, 60), &small.corpus, &state)?;
    resumed.extend(bits(t.run(None)?));
    ensure!(resumed == straight, "resumed losses differ");
    Ok(format!(
        "256 samples, 3 stages in {:.0} s, stage-2 held-out {:.3} -> {:.3}, resume bit-exact over 60 steps",
        elapsed.as_secs_f64(),
        heldout.0,
        heldout.1
    ))
}

fn overfit_sanity() -> Result<String> {
    let report = overfit_localization(&OverfitConfig::default())?;
    ensure!(report.items.len() == 32, "{} samples", report.items.len());
    ensure!(report.mean_iou >= 0.8, "mean IoU {:.3}", report.mean_iou);
    Ok(format!("mean IoU {:.3} on 32 samples", report.mean_iou))
}

fn judge_payload_audit() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let run = RunDir::new(dir.path());
    let cfg = AppConfig::default().with_seed(4);
    let inputs = Inputs::resolve(&cfg.data, &run);
    write_synthetic(
        &inputs,
        &SynthSizes {
            reports: 8,
            arrhythmia: 2,
            patients: 6,
        },
        4,
    )?;
    commands::build(&cfg, &run, &inputs, BuildTarget::Multiecg, Generator::Template)?;
    let corpus = load_corpus(&run, &inputs)?;
    let reports = report_map(&inputs)?;
    let model = EcgChatModel::load(&common::tiny_checkpoint(dir.path(), 4096))?;
    let responder = ModelResponder {
        model: &model,
        max_new_tokens: 8,
    };
    let client = RecordingClient::new(ScriptedClient::from_fn(|_| Ok("4".into())));
    let limit = Some(6);
    let report = eval_multiecg(&responder, &corpus, &reports, &client, 2, limit)?;

    // expected payloads rebuilt from the template, the raw reports and an
    // independent greedy prediction
    let test: Vec<&QaSample> = corpus
        .samples
        .iter()
        .filter(|s| s.subset == Subset::Multiecg && s.split == Split::Test)
        .take(6)
        .collect();
    let mut expected = BTreeSet::new();
    for s in &test {
        let ecgs: Vec<CanonicalRecord> = s
            .ecg_refs
            .iter()
            .map(|r| materialize(r, &corpus.records[&r.record_id]))
            .collect::<std::result::Result<_, _>>()?;
        let refs: Vec<&CanonicalRecord> = ecgs.iter().collect();
        let q = with_placeholders(&s.question, refs.len());
        let pred = model.reply(&refs, &[ChatMessage::user(q)], Decoding::Greedy, 8)?;
        let per_ecg: Vec<&String> = s.ecg_refs.iter().map(|r| &reports[&r.record_id]).collect();
        expected.insert(
            JUDGE_TEMPLATE
                .replace("{question}", &s.question)
                .replace("{reports}", &format!("{per_ecg:?}"))
                .replace("{prediction}", &pred),
        );
    }
    let slots: BTreeSet<&str> = JUDGE_TEMPLATE
        .split('{')
        .skip(1)
        .filter_map(|p| p.split_once('}').map(|x| x.0))
        .collect();
    ensure!(slots == BTreeSet::from(["question", "reports", "prediction"]), "template slots {slots:?}");
    let requests = client.requests();
    let seen: BTreeSet<String> = requests.iter().map(|r| r.text()).collect();
    ensure!(requests.len() == test.len() && !test.is_empty(), "{} requests", requests.len());
    ensure!(seen == expected, "judge payload differs from question + reports + prediction");
    for s in &test {
        let inputs_text = format!("{}{:?}", s.question, s.ecg_refs.iter().map(|r| &reports[&r.record_id]).collect::<Vec<_>>());
        if !inputs_text.contains(&s.answer) {
            ensure!(seen.iter().all(|t| !t.contains(&s.answer)), "reference answer leaked for {}", s.id);
        }
    }
    ensure!(report.aggregate.get("judge_mean") == Some(&4.0));
    Ok(format!("{} requests carry only question, per-ECG reports and prediction", requests.len()))
}

fn serve_repl_parity() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let ckpt = common::tiny_checkpoint(dir.path(), 1024);
    let a = common::write_aecg(dir.path(), &common::record("a", 10.0, 1));
    let b = common::write_aecg(dir.path(), &common::record("b", 20.0, 2));

    let repl_svc = ChatService::open(&ckpt, common::options(6))?;
    let mut out = Vec::new();
    let load = format!(":load {}\n:load {}\n", a.display(), b.display());
    run_repl(&repl_svc, load.as_bytes(), &mut out)?;
    let refs: BTreeMap<String, String> = repl_svc.list_ecgs()?.into_iter().map(|(r, id)| (id, r)).collect();
    let turns: Vec<(&str, Vec<String>)> = vec![
        ("what rhythm is this", vec![refs["a"].clone()]),
        ("is it normal", vec![]),
        ("compare <ecg> with <ecg>", vec![refs["b"].clone(), refs["a"].clone()]),
        ("which one is longer", vec![]),
    ];
    let mut script = String::new();
    for (text, atts) in &turns {
        for r in atts {
            script += &format!(":attach {r}\n");
        }
        script += &format!("{text}\n");
    }
    let used = run_repl(&repl_svc, script.as_bytes(), &mut out)?;
    let terminal = repl_svc.session(&used[0])?;
    ensure!(terminal.messages.len() == 2 * turns.len(), "{}", String::from_utf8_lossy(&out));

    let http_svc = Arc::new(ChatService::open(&ckpt, common::options(6))?);
    let rt = tokio::runtime::Runtime::new()?;
    let http = rt.block_on(async {
        let base = common::spawn(http_svc).await;
        let c = reqwest::Client::new();
        for p in [&a, &b] {
            let body = serde_json::json!({
                "format": "interchange-binary",
                "content_base64": base64::engine::general_purpose::STANDARD.encode(std::fs::read(p)?),
            });
            let r = c.post(format!("{base}/v1/ecg")).json(&body).send().await?;
            ensure!(r.status().is_success(), "upload {}", r.status());
        }
        let s: serde_json::Value = c.post(format!("{base}/v1/session")).send().await?.json().await?;
        let id = s["id"].as_str().context("session id")?.to_string();
        for (text, atts) in &turns {
            let r = c
                .post(format!("{base}/v1/session/{id}/message"))
                .json(&serde_json::json!({"text": text, "attachments": atts}))
                .send()
                .await?;
            ensure!(r.status().is_success(), "message {}", r.status());
        }
        let t: serde_json::Value = c.get(format!("{base}/v1/session/{id}")).send().await?.json().await?;
        anyhow::Ok(t)
    })?;
    ensure!(
        http["messages"] == serde_json::to_value(&terminal.messages)?,
        "HTTP and terminal transcripts differ"
    );
    Ok(format!("{} messages identical over HTTP and terminal", terminal.messages.len()))
}

type Check = (&'static str, fn() -> Result<String>);

#[test]
fn acceptance() {
    let checks: [Check; 12] = [
        ("patch-count law", patch_count_law),
        ("LoRA identity and merge", lora_identity),
        ("stage freeze audit", stage_freeze_audit),
        ("metric oracles", metric_oracles),
        ("grammar round-trip", grammar_round_trip),
        ("dataset-builder properties", dataset_builders),
        ("ECG-QA subsetter", ecgqa_subsetter),
        ("gradient checks", gradient_checks),
        ("curriculum smoke", curriculum_smoke),
        ("overfit sanity", overfit_sanity),
        ("judge payload audit", judge_payload_audit),
        ("serve/REPL parity", serve_repl_parity),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(detail)) => Ok(detail),
            Ok(Err(e)) => Err(format!("{e:#}")),
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name}: {d} ({secs:.1} s)"),
            Err(e) => {
                println!("FAIL  {name}: {e} ({secs:.1} s)");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
