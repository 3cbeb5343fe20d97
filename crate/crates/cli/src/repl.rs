//! Terminal chat over [`ChatService`].

use std::io::{BufRead, Write};
use std::path::Path;

use anyecg_core::records::{ingest_record, RecordFormat};
use anyecg_evalkit::SpanSet;

use crate::service::{ChatService, MessageRequest, ServiceError};

pub const HELP: &str = "\
:load PATH      add a record file (.aecg, .csv, .hea) to the library
:attach REF     attach a library ECG to the next message
:detach         drop pending attachments
:ecgs           list library ECGs
:history        print the transcript
:new            start a new session
:quit           leave
anything else is sent as a message with the pending attachments";

fn spans_line(spans: &SpanSet) -> String {
    match spans {
        SpanSet::NotFound => "spans: Not Found".into(),
        SpanSet::Spans(v) => {
            let parts: Vec<String> = v.iter().map(|s| format!("[{:.1}, {:.1}]", s.start, s.end)).collect();
            format!("spans: {}", parts.join(" "))
        }
    }
}

/// Reads a record file the same way an upload of its bytes would be read.
pub fn load_file(service: &ChatService, path: &Path) -> Result<String, ServiceError> {
    let fmt = RecordFormat::from_path(path)
        .ok_or_else(|| ServiceError::BadUpload(format!("{}: unknown record extension", path.display())))?;
    match fmt {
        RecordFormat::WaveformDb => {
            let rec = ingest_record(path, fmt).map_err(|e| ServiceError::BadUpload(e.to_string()))?;
            service.register_record(rec)
        }
        _ => {
            let bytes = std::fs::read(path).map_err(|e| ServiceError::BadUpload(format!("{}: {e}", path.display())))?;
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned());
            Ok(service.ingest_bytes(fmt, &bytes, name.as_deref(), None)?.info.ecg_ref)
        }
    }
}

/// Runs the REPL until `:quit` or end of input; returns the ids of the
/// sessions it used.
pub fn run_repl(service: &ChatService, input: impl BufRead, mut out: impl Write) -> std::io::Result<Vec<String>> {
    let fail = |e: ServiceError| std::io::Error::other(e.to_string());
    let mut session = service.create_session().map_err(fail)?.id;
    let mut used = vec![session.clone()];
    let mut pending: Vec<String> = Vec::new();
    writeln!(out, "session {session} on {} (:help for commands)", service.checkpoint())?;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (cmd, arg) = match line.split_once(char::is_whitespace) {
            Some((c, a)) => (c, a.trim()),
            None => (line, ""),
        };
        match cmd {
            ":quit" | ":q" => break,
            ":help" => writeln!(out, "{HELP}")?,
            ":load" => match load_file(service, Path::new(arg)) {
                Ok(r) => writeln!(out, "loaded {r}")?,
                Err(e) => writeln!(out, "error: {e}")?,
            },
            ":attach" => match service.ecg(arg) {
                Ok(info) => {
                    pending.push(info.ecg_ref);
                    writeln!(out, "attached {arg} ({} pending)", pending.len())?;
                }
                Err(e) => writeln!(out, "error: {e}")?,
            },
            ":detach" => {
                pending.clear();
                writeln!(out, "no pending attachments")?;
            }
            ":ecgs" => {
                for (r, id) in service.list_ecgs().map_err(fail)? {
                    writeln!(out, "{r}\t{id}")?;
                }
            }
            ":history" => {
                for m in service.session(&session).map_err(fail)?.messages {
                    let refs = if m.attachments.is_empty() {
                        String::new()
                    } else {
                        format!(" [{}]", m.attachments.join(", "))
                    };
                    writeln!(out, "{:?}{refs}: {}", m.role, m.text)?;
                }
            }
            ":new" => {
                session = service.create_session().map_err(fail)?.id;
                used.push(session.clone());
                pending.clear();
                writeln!(out, "session {session}")?;
            }
            c if c.starts_with(':') => writeln!(out, "unknown command {c}; :help lists commands")?,
            _ => {
                let req = MessageRequest::new(line, std::mem::take(&mut pending));
                match service.post_message(&session, &req) {
                    Ok(reply) => {
                        writeln!(out, "assistant: {}", reply.message.text)?;
                        if let Some(s) = &reply.message.spans {
                            writeln!(out, "{}", spans_line(s))?;
                        }
                    }
                    Err(e) => {
                        pending = req.attachments;
                        writeln!(out, "error: {e}")?;
                    }
                }
            }
        }
        out.flush()?;
    }
    Ok(used)
}
