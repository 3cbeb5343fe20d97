//! Chat sessions over a loaded checkpoint. The HTTP API and the terminal
//! REPL both drive this type, so identical inputs give identical replies.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use anyecg_core::fusion::{count_placeholders, with_placeholders, ChatMessage, Decoding, EcgChatModel, Role};
use anyecg_core::records::{
    canonicalize, decode_interchange, encode_interchange, parse_columnar_text, CanonicalRecord, EcgRecord,
    LeadRegistry, RecordFormat, CANONICAL_FS,
};
use anyecg_datagen::templates::LOCALIZATION_QUESTIONS;
use anyecg_evalkit::{parse_spans, SpanSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::config::ServeConfig;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session `{0}` does not exist")]
    SessionNotFound(String),
    #[error("ECG `{0}` is not in the record library")]
    EcgNotFound(String),
    #[error("{n} attachments on one message; at most {max} are allowed")]
    TooManyAttachments { n: usize, max: usize },
    #[error("message has {placeholders} <ecg> placeholders but {attachments} attachments")]
    PlaceholderMismatch { placeholders: usize, attachments: usize },
    #[error("conversation needs {len} tokens but the model context holds {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("upload rejected: {0}")]
    BadUpload(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("the model queue is full; retry later")]
    Busy,
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            Self::SessionNotFound(_) | Self::EcgNotFound(_) => 404,
            Self::TooManyAttachments { .. }
            | Self::PlaceholderMismatch { .. }
            | Self::BadUpload(_)
            | Self::BadRequest(_) => 400,
            Self::ContextOverflow { .. } => 413,
            Self::Busy => 503,
            Self::Internal(_) => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::SessionNotFound(_) => "session_not_found",
            Self::EcgNotFound(_) => "ecg_not_found",
            Self::TooManyAttachments { .. } => "too_many_attachments",
            Self::PlaceholderMismatch { .. } => "placeholder_mismatch",
            Self::ContextOverflow { .. } => "context_overflow",
            Self::BadUpload(_) => "bad_upload",
            Self::BadRequest(_) => "bad_request",
            Self::Busy => "busy",
            Self::Internal(_) => "internal",
        }
    }

    /// `{"error": {"code", "message"}}`
    pub fn body(&self) -> serde_json::Value {
        serde_json::json!({"error": {"code": self.code(), "message": self.to_string()}})
    }
}

impl From<anyecg_core::Error> for ServiceError {
    fn from(e: anyecg_core::Error) -> Self {
        use anyecg_core::Error as E;
        match e {
            E::ContextOverflow { len, max } => Self::ContextOverflow { len, max },
            E::PlaceholderMismatch { placeholders, ecgs } => Self::PlaceholderMismatch {
                placeholders,
                attachments: ecgs,
            },
            other => Self::Internal(other.to_string()),
        }
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMessage {
    pub role: Role,
    pub text: String,
    #[serde(default)]
    pub attachments: Vec<String>,
    /// Spans parsed from an assistant reply, when it follows the span grammar.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<SpanSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub checkpoint: String,
    pub messages: Vec<SessionMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRequest {
    pub text: String,
    #[serde(default)]
    pub attachments: Vec<String>,
    /// Greedy unless given; ignored in deterministic mode.
    #[serde(default)]
    pub decoding: Option<Decoding>,
    #[serde(default)]
    pub max_new_tokens: Option<usize>,
}

impl MessageRequest {
    pub fn new(text: impl Into<String>, attachments: Vec<String>) -> Self {
        Self {
            text: text.into(),
            attachments,
            decoding: None,
            max_new_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageReply {
    pub session_id: String,
    /// Position of the reply in the transcript.
    pub index: usize,
    pub message: SessionMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadRequest {
    pub format: RecordFormat,
    pub content_base64: String,
    /// File name; names the record when the content carries no id.
    #[serde(default)]
    pub name: Option<String>,
    /// Class to localize right after ingestion, e.g. "Premature ventricular contraction".
    #[serde(default)]
    pub localize: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadPreview {
    pub lead: String,
    /// `[t seconds, amplitude]`, amplitude on the canonical [-1, 1] scale.
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgInfo {
    #[serde(rename = "ref")]
    pub ecg_ref: String,
    pub record_id: String,
    pub duration_s: f64,
    pub source_fs: f64,
    /// Present leads in canonical order.
    pub leads: Vec<String>,
    pub preview: Vec<LeadPreview>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub class: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<SpanSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadReply {
    #[serde(flatten)]
    pub info: EcgInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localization: Option<Localization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceOptions {
    pub max_new_tokens: usize,
    pub max_attachments: usize,
    pub preview_points: usize,
    pub sessions_dir: Option<PathBuf>,
    /// Forces greedy decoding for every request.
    pub deterministic: bool,
}

impl ServiceOptions {
    pub fn from_config(cfg: &ServeConfig, deterministic: bool) -> Self {
        Self {
            max_new_tokens: cfg.max_new_tokens,
            max_attachments: cfg.max_attachments,
            preview_points: cfg.preview_points,
            sessions_dir: cfg.sessions_dir.clone(),
            deterministic,
        }
    }
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self::from_config(&ServeConfig::default(), false)
    }
}

struct StoredEcg {
    record: EcgRecord,
    canonical: CanonicalRecord,
}

pub struct ChatService {
    model: Mutex<EcgChatModel>,
    checkpoint: String,
    opts: ServiceOptions,
    library: RwLock<BTreeMap<String, Arc<StoredEcg>>>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    next_session: AtomicU64,
}

/// Content address of a record: its interchange encoding, hashed.
pub fn ecg_ref(record: &EcgRecord) -> ServiceResult<String> {
    let bytes = encode_interchange(record)?;
    let digest = Sha256::digest(&bytes);
    Ok(format!("ecg-{}", &hex::encode(digest)[..16]))
}

/// Min-max decimation: each column contributes its lowest and highest
/// sample in time order, so narrow peaks survive.
pub fn decimate(signal: &[f32], fs: f64, max_points: usize) -> Vec<[f64; 2]> {
    let n = signal.len();
    let point = |i: usize| [i as f64 / fs, signal[i] as f64];
    if n <= max_points.max(2) {
        return (0..n).map(point).collect();
    }
    let columns = (max_points / 2).max(1);
    let mut out = Vec::with_capacity(columns * 2);
    for c in 0..columns {
        let lo = c * n / columns;
        let hi = ((c + 1) * n / columns).max(lo + 1);
        let (mut imin, mut imax) = (lo, lo);
        for i in lo..hi {
            if signal[i] < signal[imin] {
                imin = i;
            }
            if signal[i] > signal[imax] {
                imax = i;
            }
        }
        let (a, b) = if imin <= imax { (imin, imax) } else { (imax, imin) };
        out.push(point(a));
        if b != a {
            out.push(point(b));
        }
    }
    out
}

fn lock_err<T>(_: T) -> ServiceError {
    ServiceError::Internal("lock poisoned".into())
}

impl ChatService {
    pub fn new(model: EcgChatModel, checkpoint: impl Into<String>, opts: ServiceOptions) -> ServiceResult<Self> {
        let svc = Self {
            model: Mutex::new(model),
            checkpoint: checkpoint.into(),
            opts,
            library: RwLock::new(BTreeMap::new()),
            sessions: RwLock::new(BTreeMap::new()),
            next_session: AtomicU64::new(1),
        };
        svc.restore()?;
        Ok(svc)
    }

    pub fn open(checkpoint: &Path, opts: ServiceOptions) -> ServiceResult<Self> {
        let model = EcgChatModel::load(checkpoint)?;
        let tag = checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        Self::new(model, tag, opts)
    }

    pub fn checkpoint(&self) -> &str {
        &self.checkpoint
    }

    pub fn options(&self) -> &ServiceOptions {
        &self.opts
    }

    fn restore(&self) -> ServiceResult<()> {
        let Some(dir) = &self.opts.sessions_dir else { return Ok(()) };
        let io = |p: &Path, e: std::io::Error| ServiceError::Internal(format!("{}: {e}", p.display()));
        let ecg_dir = dir.join("ecgs");
        if ecg_dir.is_dir() {
            for entry in std::fs::read_dir(&ecg_dir).map_err(|e| io(&ecg_dir, e))? {
                let p = entry.map_err(|e| io(&ecg_dir, e))?.path();
                let bytes = std::fs::read(&p).map_err(|e| io(&p, e))?;
                let rec = decode_interchange(&bytes, &p, &LeadRegistry::default())?;
                self.insert_record(rec, false)?;
            }
        }
        let mut max_id = 0;
        if dir.is_dir() {
            for entry in std::fs::read_dir(dir).map_err(|e| io(dir, e))? {
                let p = entry.map_err(|e| io(dir, e))?.path();
                if p.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let text = std::fs::read_to_string(&p).map_err(|e| io(&p, e))?;
                let s: Session = serde_json::from_str(&text)
                    .map_err(|e| ServiceError::Internal(format!("{}: {e}", p.display())))?;
                if let Some(n) = s.id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                    max_id = max_id.max(n);
                }
                self.sessions
                    .write()
                    .map_err(lock_err)?
                    .insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        self.next_session.store(max_id + 1, Ordering::SeqCst);
        Ok(())
    }

    fn persist_session(&self, s: &Session) {
        let Some(dir) = &self.opts.sessions_dir else { return };
        let path = dir.join(format!("{}.json", s.id));
        let res = std::fs::create_dir_all(dir)
            .and_then(|_| std::fs::write(&path, serde_json::to_vec_pretty(s).unwrap_or_default()));
        if let Err(e) = res {
            warn!(path = %path.display(), error = %e, "could not persist session");
        }
    }

    fn insert_record(&self, record: EcgRecord, persist: bool) -> ServiceResult<String> {
        let r = ecg_ref(&record)?;
        if persist {
            if let Some(dir) = &self.opts.sessions_dir {
                let ecgs = dir.join("ecgs");
                let p = ecgs.join(format!("{r}.aecg"));
                if !p.exists() {
                    std::fs::create_dir_all(&ecgs).map_err(|e| ServiceError::Internal(format!("{}: {e}", ecgs.display())))?;
                    anyecg_core::records::write_interchange(&record, &p)?;
                }
            }
        }
        let canonical = canonicalize(&record);
        self.library
            .write()
            .map_err(lock_err)?
            .entry(r.clone())
            .or_insert_with(|| Arc::new(StoredEcg { record, canonical }));
        Ok(r)
    }

    /// Adds a record to the library; returns its content-addressed ref.
    pub fn register_record(&self, record: EcgRecord) -> ServiceResult<String> {
        self.insert_record(record, true)
    }

    fn stored(&self, r: &str) -> ServiceResult<Arc<StoredEcg>> {
        self.library
            .read()
            .map_err(lock_err)?
            .get(r)
            .cloned()
            .ok_or_else(|| ServiceError::EcgNotFound(r.to_string()))
    }

    fn info(&self, r: &str, stored: &StoredEcg) -> EcgInfo {
        let c = &stored.canonical;
        let present = c.present_leads();
        EcgInfo {
            ecg_ref: r.to_string(),
            record_id: stored.record.record_id().to_string(),
            duration_s: stored.record.duration(),
            source_fs: stored.record.fs(),
            leads: present.iter().map(|l| l.name().to_string()).collect(),
            preview: present
                .iter()
                .map(|l| LeadPreview {
                    lead: l.name().to_string(),
                    points: decimate(&c.signal[l.slot()], CANONICAL_FS, self.opts.preview_points),
                })
                .collect(),
        }
    }

    pub fn ecg(&self, r: &str) -> ServiceResult<EcgInfo> {
        let stored = self.stored(r)?;
        Ok(self.info(r, &stored))
    }

    /// `(ref, record id)` for every library record, by ref.
    pub fn list_ecgs(&self) -> ServiceResult<Vec<(String, String)>> {
        Ok(self
            .library
            .read()
            .map_err(lock_err)?
            .iter()
            .map(|(r, s)| (r.clone(), s.record.record_id().to_string()))
            .collect())
    }

    /// Decodes an uploaded file, stores it and optionally localizes a class.
    pub fn ingest_bytes(
        &self,
        format: RecordFormat,
        bytes: &[u8],
        name: Option<&str>,
        localize: Option<&str>,
    ) -> ServiceResult<UploadReply> {
        let name = name.unwrap_or("upload");
        let path = Path::new(name);
        let registry = LeadRegistry::default();
        let bad = |e: anyecg_core::Error| ServiceError::BadUpload(e.to_string());
        let record = match format {
            RecordFormat::InterchangeBinary => decode_interchange(bytes, path, &registry).map_err(bad)?,
            RecordFormat::ColumnarText => {
                let text = std::str::from_utf8(bytes)
                    .map_err(|_| ServiceError::BadUpload("columnar text is not UTF-8".into()))?;
                parse_columnar_text(text, path, &registry).map_err(bad)?
            }
            RecordFormat::WaveformDb => {
                return Err(ServiceError::BadUpload(
                    "waveform-db records span several files; upload interchange-binary or columnar-text".into(),
                ))
            }
        };
        let r = self.insert_record(record, true)?;
        let stored = self.stored(&r)?;
        let localization = match localize {
            Some(class) => Some(self.localize(&stored, class)?),
            None => None,
        };
        Ok(UploadReply {
            info: self.info(&r, &stored),
            localization,
        })
    }

    pub fn upload(&self, req: &UploadRequest) -> ServiceResult<UploadReply> {
        use base64::Engine as _;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(req.content_base64.trim())
            .map_err(|e| ServiceError::BadUpload(format!("content is not base64: {e}")))?;
        self.ingest_bytes(req.format, &bytes, req.name.as_deref(), req.localize.as_deref())
    }

    fn localize(&self, stored: &StoredEcg, class: &str) -> ServiceResult<Localization> {
        let class = class.trim();
        if class.is_empty() {
            return Err(ServiceError::BadRequest("empty class name".into()));
        }
        let question = LOCALIZATION_QUESTIONS[0].replace("{abnormal}", class);
        let messages = [ChatMessage::user(with_placeholders(&question, 1))];
        let answer = {
            let model = self.model.lock().map_err(lock_err)?;
            model.reply(&[&stored.canonical], &messages, Decoding::Greedy, self.opts.max_new_tokens)?
        };
        Ok(Localization {
            class: class.to_string(),
            question,
            spans: parse_spans(&answer).span_set().cloned(),
            answer,
        })
    }

    pub fn create_session(&self) -> ServiceResult<Session> {
        let n = self.next_session.fetch_add(1, Ordering::SeqCst);
        let s = Session {
            id: format!("s{n:06}"),
            checkpoint: self.checkpoint.clone(),
            messages: Vec::new(),
        };
        self.persist_session(&s);
        self.sessions
            .write()
            .map_err(lock_err)?
            .insert(s.id.clone(), Arc::new(Mutex::new(s.clone())));
        Ok(s)
    }

    fn session_handle(&self, id: &str) -> ServiceResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .map_err(lock_err)?
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::SessionNotFound(id.to_string()))
    }

    pub fn session(&self, id: &str) -> ServiceResult<Session> {
        Ok(self.session_handle(id)?.lock().map_err(lock_err)?.clone())
    }

    pub fn session_ids(&self) -> ServiceResult<Vec<String>> {
        Ok(self.sessions.read().map_err(lock_err)?.keys().cloned().collect())
    }

    fn check_message(&self, req: &MessageRequest) -> ServiceResult<()> {
        let n = req.attachments.len();
        if n > self.opts.max_attachments {
            return Err(ServiceError::TooManyAttachments {
                n,
                max: self.opts.max_attachments,
            });
        }
        let p = count_placeholders(&req.text);
        if p > 0 && p != n {
            return Err(ServiceError::PlaceholderMismatch {
                placeholders: p,
                attachments: n,
            });
        }
        if req.text.trim().is_empty() && n == 0 {
            return Err(ServiceError::BadRequest("empty message".into()));
        }
        Ok(())
    }

    /// Model-side transcript and ECGs for `history` followed by `next`.
    fn conversation(
        &self,
        history: &[SessionMessage],
        next: &SessionMessage,
    ) -> ServiceResult<(Vec<ChatMessage>, Vec<Arc<StoredEcg>>)> {
        let mut messages = Vec::with_capacity(history.len() + 1);
        let mut ecgs = Vec::new();
        for m in history.iter().chain(std::iter::once(next)) {
            for r in &m.attachments {
                ecgs.push(self.stored(r)?);
            }
            messages.push(ChatMessage::new(m.role, with_placeholders(&m.text, m.attachments.len())));
        }
        Ok((messages, ecgs))
    }

    /// Token count the model would see for `req` appended to the session.
    pub fn prompt_len(&self, id: &str, req: &MessageRequest) -> ServiceResult<(usize, usize)> {
        self.check_message(req)?;
        let handle = self.session_handle(id)?;
        let session = handle.lock().map_err(lock_err)?;
        let user = SessionMessage {
            role: Role::User,
            text: req.text.clone(),
            attachments: req.attachments.clone(),
            spans: None,
        };
        let (messages, stored) = self.conversation(&session.messages, &user)?;
        let ecgs: Vec<&CanonicalRecord> = stored.iter().map(|s| &s.canonical).collect();
        let model = self.model.lock().map_err(lock_err)?;
        let prompt = model.assemble_prompt(&ecgs, &messages, None)?;
        let start = model.tokenizer().ecg_start_id();
        let blocks = prompt.ids.iter().filter(|i| **i == Some(start)).count();
        Ok((prompt.len(), blocks))
    }

    /// Appends a user turn and the model's reply. On error the transcript
    /// is left unchanged.
    pub fn post_message(&self, id: &str, req: &MessageRequest) -> ServiceResult<MessageReply> {
        self.check_message(req)?;
        let handle = self.session_handle(id)?;
        let mut session = handle.lock().map_err(lock_err)?;
        let user = SessionMessage {
            role: Role::User,
            text: req.text.clone(),
            attachments: req.attachments.clone(),
            spans: None,
        };
        let (messages, stored) = self.conversation(&session.messages, &user)?;
        let ecgs: Vec<&CanonicalRecord> = stored.iter().map(|s| &s.canonical).collect();
        let decoding = match req.decoding {
            Some(d) if !self.opts.deterministic => d,
            _ => Decoding::Greedy,
        };
        let max_new = req.max_new_tokens.unwrap_or(self.opts.max_new_tokens);
        let text = {
            let model = self.model.lock().map_err(lock_err)?;
            model.reply(&ecgs, &messages, decoding, max_new)?
        };
        let reply = SessionMessage {
            role: Role::Assistant,
            spans: parse_spans(&text).span_set().cloned(),
            text,
            attachments: Vec::new(),
        };
        session.messages.push(user);
        session.messages.push(reply.clone());
        self.persist_session(&session);
        Ok(MessageReply {
            session_id: session.id.clone(),
            index: session.messages.len() - 1,
            message: reply,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimation_keeps_extremes() {
        let mut x = vec![0.0f32; 1000];
        x[137] = 5.0;
        x[600] = -4.0;
        let pts = decimate(&x, 100.0, 50);
        assert!(pts.len() <= 50);
        assert!(pts.iter().any(|p| p[1] == 5.0 && (p[0] - 1.37).abs() < 1e-12));
        assert!(pts.iter().any(|p| p[1] == -4.0));
        assert!(pts.windows(2).all(|w| w[0][0] < w[1][0]));
        assert_eq!(decimate(&x[..10], 100.0, 50).len(), 10);
    }

    #[test]
    fn error_statuses() {
        assert_eq!(ServiceError::EcgNotFound("x".into()).status(), 404);
        assert_eq!(ServiceError::ContextOverflow { len: 9, max: 8 }.status(), 413);
        let e: ServiceError = anyecg_core::Error::ContextOverflow { len: 9, max: 8 }.into();
        assert_eq!(e.body()["error"]["code"], "context_overflow");
    }
}
