//! Word-piece tokenizer with byte fallback for the desk-scale LM.
//!
//! Text is pre-split into special tokens, words with an optional leading
//! space, single digits, single punctuation marks and whitespace runs. Pieces
//! in the vocabulary map to one id; anything else falls back to one id per
//! UTF-8 byte, so `decode(encode(s)) == s` for every string.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
/// Marks where an ECG block goes inside message text.
pub const ECG_PLACEHOLDER: &str = "<ecg>";
pub const SYSTEM: &str = "<|system|>";
pub const USER: &str = "<|user|>";
pub const ASSISTANT: &str = "<|assistant|>";
pub const ECG_START: &str = "<ECG_start>";
pub const ECG_END: &str = "<ECG_end>";

const RESERVED: [&str; 7] = [PAD, BOS, EOS, ECG_PLACEHOLDER, SYSTEM, USER, ASSISTANT];
const BYTE_BASE: u32 = RESERVED.len() as u32;
const FIRST_PIECE: u32 = BYTE_BASE + 256;

fn special_tokens() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"<ECG_start>|<ECG_end>|<ecg>|<pad>|<bos>|<eos>|<\|(?:system|user|assistant)\|>")
            .expect("static regex")
    })
}

fn pretokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r" ?[A-Za-z]+| ?[0-9]| ?[^\sA-Za-z0-9]|\s+").expect("static regex"))
}

/// Special tokens whole, everything between them pre-tokenized.
fn split_pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut at = 0;
    for m in special_tokens().find_iter(text) {
        out.extend(pretokenizer().find_iter(&text[at..m.start()]).map(|p| p.as_str()));
        out.push(m.as_str());
        at = m.end();
    }
    out.extend(pretokenizer().find_iter(&text[at..]).map(|p| p.as_str()));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pieces: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a vocabulary from the most frequent pieces of `corpus`
    /// (ties broken lexicographically), capped at `max_pieces`.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_pieces: usize, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in corpus {
            for piece in split_pieces(text) {
                if piece.len() > 1 && !RESERVED.contains(&piece) && piece != ECG_START && piece != ECG_END {
                    *counts.entry(piece).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let pieces = ranked
            .into_iter()
            .take(max_pieces)
            .map(|(p, _)| p.to_string())
            .collect();
        Self::from_pieces(pieces)
    }

    pub fn from_pieces(pieces: Vec<String>) -> Self {
        let mut t = Self {
            pieces,
            index: HashMap::new(),
        };
        t.reindex();
        t
    }

    fn reindex(&mut self) {
        self.index = self
            .pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), FIRST_PIECE + i as u32))
            .chain(RESERVED.iter().enumerate().map(|(i, s)| (s.to_string(), i as u32)))
            .collect();
    }

    /// Must be called after deserializing.
    pub fn restore_index(&mut self) {
        self.reindex();
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Size of the base vocabulary (the LM output head width).
    pub fn vocab_size(&self) -> usize {
        FIRST_PIECE as usize + self.pieces.len()
    }

    pub fn ecg_start_id(&self) -> u32 {
        self.vocab_size() as u32
    }

    pub fn ecg_end_id(&self) -> u32 {
        self.vocab_size() as u32 + 1
    }

    pub fn pad_id(&self) -> u32 {
        0
    }
    pub fn bos_id(&self) -> u32 {
        1
    }
    pub fn eos_id(&self) -> u32 {
        2
    }
    pub fn placeholder_id(&self) -> u32 {
        3
    }
    pub fn role_id(&self, role: Role) -> u32 {
        match role {
            Role::System => 4,
            Role::User => 5,
            Role::Assistant => 6,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in split_pieces(text) {
            if piece == ECG_START {
                ids.push(self.ecg_start_id());
            } else if piece == ECG_END {
                ids.push(self.ecg_end_id());
            } else if let Some(&id) = self.index.get(piece) {
                ids.push(id);
            } else {
                ids.extend(piece.bytes().map(|b| BYTE_BASE + b as u32));
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if id < BYTE_BASE {
                bytes.extend_from_slice(RESERVED[id as usize].as_bytes());
            } else if id < FIRST_PIECE {
                bytes.push((id - BYTE_BASE) as u8);
            } else if id == self.ecg_start_id() {
                bytes.extend_from_slice(ECG_START.as_bytes());
            } else if id == self.ecg_end_id() {
                bytes.extend_from_slice(ECG_END.as_bytes());
            } else if let Some(p) = self.pieces.get((id - FIRST_PIECE) as usize) {
                bytes.extend_from_slice(p.as_bytes());
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Ids the decoder must never emit.
    pub fn non_generable(&self) -> [u32; 5] {
        [
            self.pad_id(),
            self.bos_id(),
            self.placeholder_id(),
            self.role_id(Role::System),
            self.role_id(Role::User),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}
