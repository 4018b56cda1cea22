//! Language-model client boundary.
//!
//! Requests and responses travel as single JSON lines over a [`Transport`].
//! The in-process [`MockTransport`] answers deterministically from the
//! vocabulary and a bank of sentence frames; network adapters implement the
//! same trait outside this crate.

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::organ::Organ;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Extract,
    Generate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmRequest {
    pub role: Role,
    pub prompt: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmResponse {
    pub text: String,
}

pub const EXTRACT_PROMPT: &str =
    "List every lesion descriptor (texture, margin, attenuation, pathology) used in the report, one per line.";
pub const GENERATE_PROMPT: &str =
    "Rewrite the lesion description using a new sentence structure. Keep every descriptor word unchanged.";

/// Payload of an extraction request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractPayload {
    pub organ: Organ,
    pub report: String,
}

/// Payload of a generation request; `index` selects the phrasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratePayload {
    pub organ: Organ,
    pub terms: Vec<String>,
    pub index: usize,
}

pub trait Transport: Send + Sync {
    /// Sends one request line and returns one response line.
    fn roundtrip(&self, line: &str) -> Result<String>;
}

pub struct LmClient {
    transport: Box<dyn Transport>,
}

impl LmClient {
    pub fn new(transport: impl Transport + 'static) -> Self {
        LmClient {
            transport: Box::new(transport),
        }
    }

    pub fn mock() -> Self {
        LmClient::new(MockTransport::new(Vocabulary::builtin().clone()))
    }

    pub fn call(&self, req: &LmRequest) -> Result<LmResponse> {
        let line = serde_json::to_string(req).expect("request serializes");
        let reply = self.transport.roundtrip(&line)?;
        serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::Transport(format!("malformed response line: {e}")))
    }
}

pub(crate) const FRAMES: [&str; 12] = [
    "a {d} lesion in the {o}{l}",
    "the {o} shows a {d} lesion{l}",
    "there is a {d} lesion in the {o}{l}",
    "a {d} lesion is seen in the {o}{l}",
    "{d} lesion noted in the {o}{l}",
    "the {o} contains a {d} lesion{l}",
    "a {d} lesion is present in the {o}{l}",
    "findings include a {d} {o} lesion{l}",
    "{o} lesion, {d}{l}",
    "a {d} {o} lesion{l}",
    "a {d} lesion is identified in the {o}{l}",
    "imaging demonstrates a {d} lesion in the {o}{l}",
];

pub(crate) const QUALIFIERS: [&str; 9] = [
    "",
    " on this study",
    ", unchanged",
    ", new",
    " centrally",
    " peripherally",
    ", solitary",
    " on the current scan",
    " again",
];

pub(crate) fn render_frame(index: usize, terms: &[String], organ: Organ) -> String {
    let frame = FRAMES[index % FRAMES.len()];
    let qualifier = QUALIFIERS[(index / FRAMES.len()) % QUALIFIERS.len()];
    frame
        .replace("{d}", &terms.join(" "))
        .replace("{o}", organ.as_str())
        .replace("{l}", qualifier)
}

/// Deterministic stand-in for a hosted language model.
#[derive(Debug, Clone)]
pub struct MockTransport {
    vocab: Vocabulary,
}

impl MockTransport {
    pub fn new(vocab: Vocabulary) -> Self {
        MockTransport { vocab }
    }

    /// Case-insensitive, left-to-right longest-match scan at word boundaries.
    pub fn scan(&self, organ: Organ, report: &str) -> Vec<String> {
        let text = report.to_lowercase();
        let bytes = text.as_bytes();
        let is_word = |b: u8| b.is_ascii_alphanumeric();
        let mut phrases: Vec<&str> = self.vocab.terms(organ).iter().map(|t| t.phrase.as_str()).collect();
        phrases.sort_by_key(|p| std::cmp::Reverse(p.len()));
        let mut found: Vec<String> = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            if i > 0 && is_word(bytes[i - 1]) || !text.is_char_boundary(i) {
                i += 1;
                continue;
            }
            let hit = phrases.iter().find(|p| {
                text[i..].starts_with(**p) && bytes.get(i + p.len()).is_none_or(|&b| !is_word(b))
            });
            match hit {
                Some(p) => {
                    if !found.iter().any(|f| f == p) {
                        found.push((*p).to_owned());
                    }
                    i += p.len();
                }
                None => i += 1,
            }
        }
        found
    }

    fn answer(&self, req: &LmRequest) -> Result<LmResponse> {
        let bad = |e: serde_json::Error| Error::Transport(format!("bad payload: {e}"));
        match req.role {
            Role::Extract => {
                let p: ExtractPayload = serde_json::from_str(&req.payload).map_err(bad)?;
                Ok(LmResponse {
                    text: self.scan(p.organ, &p.report).join("\n"),
                })
            }
            Role::Generate => {
                let p: GeneratePayload = serde_json::from_str(&req.payload).map_err(bad)?;
                Ok(LmResponse {
                    text: render_frame(p.index, &p.terms, p.organ),
                })
            }
        }
    }
}

impl Transport for MockTransport {
    fn roundtrip(&self, line: &str) -> Result<String> {
        let req: LmRequest = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Transport(format!("malformed request line: {e}")))?;
        let resp = self.answer(&req)?;
        Ok(serde_json::to_string(&resp).expect("response serializes") + "\n")
    }
}
