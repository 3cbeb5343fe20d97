#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyecg_cli::http;
use anyecg_cli::service::{ChatService, ServiceOptions};
use anyecg_core::encoder::EncoderConfig;
use anyecg_core::fusion::{EcgChatModel, LmConfig, ModelConfig, Tokenizer};
use anyecg_core::records::{write_interchange, EcgRecord};
use anyecg_core::synth::{synth_record, SynthSpec};

pub fn tiny_config(max_context: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            depth: 1,
            width: 32,
            heads: 4,
            ..EncoderConfig::desk()
        },
        lm: LmConfig {
            layers: 1,
            width: 32,
            heads: 4,
            max_context,
            ..LmConfig::default()
        },
        seed: 11,
        ..ModelConfig::default()
    }
}

/// Saves an untrained tiny model; greedy replies are arbitrary but repeatable.
pub fn tiny_checkpoint(dir: &Path, max_context: usize) -> PathBuf {
    let tok = Tokenizer::build(
        [
            "sinus rhythm with premature ventricular contractions",
            "where is the abnormal beat duration not found",
            "compare these two ecgs",
        ],
        200,
        1,
    );
    let model = EcgChatModel::new(tiny_config(max_context), tok).unwrap();
    let path = dir.join("tiny.safetensors");
    model.save(&path).unwrap();
    path
}

pub fn record(id: &str, seconds: f64, seed: u64) -> EcgRecord {
    synth_record(&SynthSpec::new(id, 250.0, seconds, &["I", "II", "V1"]), seed).unwrap()
}

pub fn write_aecg(dir: &Path, rec: &EcgRecord) -> PathBuf {
    let p = dir.join(format!("{}.aecg", rec.record_id()));
    write_interchange(rec, &p).unwrap();
    p
}

pub fn options(max_new_tokens: usize) -> ServiceOptions {
    ServiceOptions {
        max_new_tokens,
        ..ServiceOptions::default()
    }
}

/// Serves `svc` on an ephemeral port; returns the base URL.
pub async fn spawn(svc: Arc<ChatService>) -> String {
    let app = http::router(svc, 4, 8 << 20);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(http::serve(listener, app, std::future::pending()));
    base
}
