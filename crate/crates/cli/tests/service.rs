//! The chat service over HTTP: sessions, attachments, uploads, error codes
//! and persistence.

mod common;

use std::sync::Arc;

use anyecg_cli::service::{ChatService, MessageRequest, ServiceOptions};
use anyecg_core::fusion::{with_placeholders, ChatMessage, Decoding, EcgChatModel, Role};
use anyecg_core::records::{canonicalize, decode_interchange, encode_interchange, CanonicalRecord, LeadRegistry};
use base64::Engine as _;
use common::{options, record, spawn, tiny_checkpoint};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

async fn post(c: &Client, url: String, body: Value) -> (StatusCode, Value) {
    let r = c.post(url).json(&body).send().await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

async fn get(c: &Client, url: String) -> (StatusCode, Value) {
    let r = c.get(url).send().await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

async fn upload(c: &Client, base: &str, bytes: &[u8], format: &str, name: &str) -> Value {
    let (st, v) = post(
        c,
        format!("{base}/v1/ecg"),
        json!({"format": format, "content_base64": b64(bytes), "name": name}),
    )
    .await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    v
}

fn round_trip(rec: &anyecg_core::records::EcgRecord) -> CanonicalRecord {
    let bytes = encode_interchange(rec).unwrap();
    canonicalize(&decode_interchange(&bytes, "x.aecg".as_ref(), &LeadRegistry::default()).unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn multi_turn_session_sees_the_whole_history() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), 1024);
    let svc = Arc::new(ChatService::open(&ckpt, options(6)).unwrap());
    let base = spawn(svc.clone()).await;
    let c = Client::new();

    let (st, health) = get(&c, format!("{base}/healthz")).await;
    assert_eq!((st, health), (StatusCode::OK, json!({"status": "ok"})));

    let recs = [record("a", 10.0, 1), record("b", 10.0, 2), record("c", 10.0, 3)];
    let mut refs = Vec::new();
    for r in &recs {
        let v = upload(&c, &base, &encode_interchange(r).unwrap(), "interchange-binary", "x.aecg").await;
        refs.push(v["ref"].as_str().unwrap().to_string());
    }
    assert_eq!(refs.iter().collect::<std::collections::BTreeSet<_>>().len(), 3);

    let (st, s) = post(&c, format!("{base}/v1/session"), json!({})).await;
    assert_eq!(st, StatusCode::CREATED);
    let id = s["id"].as_str().unwrap().to_string();
    assert_eq!(s["messages"], json!([]));

    let turns = [
        ("what rhythm is this", vec![refs[0].clone()]),
        ("compare these two ecgs <ecg> and <ecg>", vec![refs[1].clone(), refs[2].clone()]),
        ("where is the abnormal beat", vec![]),
    ];
    // Every earlier attachment still reaches the model on the third turn.
    let (_, blocks) = svc.prompt_len(&id, &MessageRequest::new(turns[0].0, turns[0].1.clone())).unwrap();
    assert_eq!(blocks, 1);
    for (k, (text, atts)) in turns.iter().enumerate() {
        if k == 2 {
            let (_, blocks) = svc.prompt_len(&id, &MessageRequest::new(*text, atts.clone())).unwrap();
            assert_eq!(blocks, 3);
        }
        let (st, v) = post(
            &c,
            format!("{base}/v1/session/{id}/message"),
            json!({"text": text, "attachments": atts}),
        )
        .await;
        assert_eq!(st, StatusCode::OK, "{v}");
        assert_eq!(v["session_id"], json!(id));
        assert_eq!(v["index"], json!(2 * k + 1));
        assert_eq!(v["message"]["role"], json!("assistant"));
    }

    let (st, t) = get(&c, format!("{base}/v1/session/{id}")).await;
    assert_eq!(st, StatusCode::OK);
    let msgs = t["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 6);
    assert_eq!(msgs[2]["attachments"], json!([refs[1], refs[2]]));
    assert_eq!(t["checkpoint"], json!("tiny"));

    // Replaying the full transcript on an independent copy of the model gives
    // the same final reply.
    let model = EcgChatModel::load(&ckpt).unwrap();
    let ecgs: Vec<CanonicalRecord> = recs.iter().map(round_trip).collect();
    let mut history = Vec::new();
    for (k, (text, atts)) in turns.iter().enumerate() {
        history.push(ChatMessage::new(Role::User, with_placeholders(text, atts.len())));
        if k < 2 {
            history.push(ChatMessage::new(Role::Assistant, msgs[2 * k + 1]["text"].as_str().unwrap()));
        }
    }
    let refs_all: Vec<&CanonicalRecord> = ecgs.iter().collect();
    let expect = model.reply(&refs_all, &history, Decoding::Greedy, 6).unwrap();
    assert_eq!(msgs[5]["text"], json!(expect));

    let fresh = svc.create_session().unwrap().id;
    let (alone, _) = svc.prompt_len(&fresh, &MessageRequest::new(turns[2].0, vec![])).unwrap();
    let (full, _) = svc.prompt_len(&id, &MessageRequest::new(turns[2].0, vec![])).unwrap();
    assert!(full > alone + 3 * 61);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), 150);
    let svc = Arc::new(ChatService::open(&ckpt, options(4)).unwrap());
    let base = spawn(svc.clone()).await;
    let c = Client::new();

    let (st, v) = post(&c, format!("{base}/v1/session/s999999/message"), json!({"text": "hi"})).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], json!("session_not_found"));

    let id = svc.create_session().unwrap().id;
    let url = format!("{base}/v1/session/{id}/message");

    let (st, v) = post(&c, url.clone(), json!({"text": "hi", "attachments": ["ecg-0000000000000000"]})).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], json!("ecg_not_found"));
    let (st, _) = get(&c, format!("{base}/v1/ecg/ecg-0000000000000000")).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let r = svc.register_record(record("a", 10.0, 1)).unwrap();
    let seven = vec![r.clone(); 7];
    let (st, v) = post(&c, url.clone(), json!({"text": "hi", "attachments": seven})).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], json!("too_many_attachments"));

    let (st, v) = post(&c, url.clone(), json!({"text": "<ecg> <ecg>", "attachments": [r]})).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], json!("placeholder_mismatch"));

    // One ECG fits a 150-token context, three do not.
    let (st, v) = post(&c, url.clone(), json!({"text": "hi", "attachments": [r]})).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let (st, v) = post(&c, url.clone(), json!({"text": "hi", "attachments": [r, r, r]})).await;
    assert_eq!(st, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(v["error"]["code"], json!("context_overflow"));
    assert_eq!(svc.session(&id).unwrap().messages.len(), 2);

    let (st, v) = post(
        &c,
        format!("{base}/v1/ecg"),
        json!({"format": "interchange-binary", "content_base64": b64(b"not an ecg")}),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], json!("bad_upload"));
    let r = c.post(format!("{base}/v1/session/{id}/message")).body("{").header("content-type", "application/json");
    assert!(r.send().await.unwrap().status().is_client_error());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn uploads_preview_and_localize() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), 1024);
    let opts = ServiceOptions {
        preview_points: 100,
        ..options(6)
    };
    let svc = Arc::new(ChatService::open(&ckpt, opts).unwrap());
    let base = spawn(svc).await;
    let c = Client::new();

    let rec = record("rec7", 12.0, 7);
    let v = upload(&c, &base, &encode_interchange(&rec).unwrap(), "interchange-binary", "rec7.aecg").await;
    let r = v["ref"].as_str().unwrap();
    assert!(r.starts_with("ecg-") && r.len() == 20);
    assert_eq!(v["record_id"], json!("rec7"));
    assert_eq!(v["source_fs"], json!(250.0));
    assert!((v["duration_s"].as_f64().unwrap() - 12.0).abs() < 1e-9);
    assert_eq!(v["leads"], json!(["I", "II", "V1"]));
    let preview = v["preview"].as_array().unwrap();
    assert_eq!(preview.len(), 3);
    for p in preview {
        let pts = p["points"].as_array().unwrap();
        assert!(!pts.is_empty() && pts.len() <= 100);
        for pt in pts {
            let a = pt[1].as_f64().unwrap();
            assert!((-1.0..=1.0).contains(&a));
        }
    }
    assert!(v.get("localization").is_none());

    // The same record uploaded again keeps its ref.
    let again = upload(&c, &base, &encode_interchange(&rec).unwrap(), "interchange-binary", "copy.aecg").await;
    assert_eq!(again["ref"], v["ref"]);
    let (_, got) = get(&c, format!("{base}/v1/ecg/{r}")).await;
    assert_eq!(got, v);

    let csv = "# record_id=csv1, fs=100\ntime,I,II\n".to_string()
        + &(0..500)
            .map(|i| format!("{:.2},{:.3},{:.3}\n", i as f64 / 100.0, (i as f64 / 9.0).sin(), (i as f64 / 5.0).cos()))
            .collect::<String>();
    let (st, v) = post(
        &c,
        format!("{base}/v1/ecg"),
        json!({"format": "columnar-text", "content_base64": b64(csv.as_bytes()), "name": "csv1.csv", "localize": "Premature ventricular contraction"}),
    )
    .await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    assert_eq!(v["record_id"], json!("csv1"));
    assert!((v["duration_s"].as_f64().unwrap() - 5.0).abs() < 1e-9);
    let loc = &v["localization"];
    assert_eq!(loc["class"], json!("Premature ventricular contraction"));
    assert!(loc["question"].as_str().unwrap().contains("Premature ventricular contraction"));
    assert!(loc["answer"].is_string());

    let (_, list) = get(&c, format!("{base}/v1/ecg")).await;
    assert_eq!(list["ecgs"].as_array().unwrap().len(), 2);
}

#[test]
fn sessions_and_uploads_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), 1024);
    let opts = ServiceOptions {
        sessions_dir: Some(dir.path().join("sessions")),
        ..options(5)
    };
    let (id, r, transcript) = {
        let svc = ChatService::open(&ckpt, opts.clone()).unwrap();
        let bytes = encode_interchange(&record("p", 10.0, 4)).unwrap();
        let r = svc
            .ingest_bytes(anyecg_core::records::RecordFormat::InterchangeBinary, &bytes, None, None)
            .unwrap()
            .info
            .ecg_ref;
        let id = svc.create_session().unwrap().id;
        svc.post_message(&id, &MessageRequest::new("what rhythm", vec![r.clone()])).unwrap();
        let t = svc.session(&id).unwrap();
        (id, r, t)
    };
    let svc = ChatService::open(&ckpt, opts).unwrap();
    assert_eq!(svc.session(&id).unwrap(), transcript);
    assert!(svc.ecg(&r).is_ok());
    let next = svc.create_session().unwrap().id;
    assert_ne!(next, id);
    let reply = svc.post_message(&id, &MessageRequest::new("and now", vec![])).unwrap();
    assert_eq!(reply.index, 3);
}
