//! Backend and session abstractions shared by in-process and remote models.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::logits::LogitVector;

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("backend reported {code}: {message}")]
    Remote { code: String, message: String },
    #[error("unknown image {0:?}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// What a backend reports during the handshake.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub vocab_size: usize,
    pub vocab_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_token: Option<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_table: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<String>>,
}

impl BackendInfo {
    pub fn from_token_table(tokens: Vec<String>, end_token: Option<TokenId>) -> Self {
        Self {
            vocab_size: tokens.len(),
            vocab_digest: vocab_digest(&tokens),
            end_token,
            token_table: Some(tokens),
            images: None,
        }
    }

    pub fn token_text(&self, token: TokenId) -> String {
        self.token_table
            .as_ref()
            .and_then(|t| t.get(token as usize).cloned())
            .unwrap_or_else(|| format!("<{token}>"))
    }

    pub fn token_id(&self, text: &str) -> Option<TokenId> {
        self.token_table
            .as_ref()?
            .iter()
            .position(|t| t == text)
            .map(|i| i as TokenId)
    }
}

/// SHA-256 over the newline-joined token table, hex encoded.
pub fn vocab_digest(tokens: &[String]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Engine-side view of one generation context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session: String,
    pub image_id: String,
    pub prompt: Vec<TokenId>,
    pub fed_tokens: Vec<TokenId>,
    pub last_step: Option<u64>,
}

impl SessionState {
    pub fn new(session: &str, image_id: &str, prompt: &[TokenId]) -> Self {
        Self {
            session: session.to_owned(),
            image_id: image_id.to_owned(),
            prompt: prompt.to_vec(),
            fed_tokens: Vec::new(),
            last_step: None,
        }
    }

    /// Index of the next step to request.
    pub fn next_step(&self) -> u64 {
        self.fed_tokens.len() as u64
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("sessions {left:?} and {right:?} diverge at {position}: {detail}")]
pub struct SessionMismatch {
    pub left: String,
    pub right: String,
    pub position: usize,
    pub detail: String,
}

/// Both sessions must have been fed the same tokens and be at the same step.
pub fn lockstep_barrier(a: &SessionState, b: &SessionState) -> Result<(), SessionMismatch> {
    let mismatch = |position, detail: String| SessionMismatch {
        left: a.session.clone(),
        right: b.session.clone(),
        position,
        detail,
    };
    if a.prompt != b.prompt {
        let pos = a.prompt.iter().zip(&b.prompt).take_while(|(x, y)| x == y).count();
        return Err(mismatch(pos, "prompts differ".into()));
    }
    let common = a.fed_tokens.iter().zip(&b.fed_tokens).take_while(|(x, y)| x == y).count();
    if common != a.fed_tokens.len() || common != b.fed_tokens.len() {
        return Err(mismatch(
            common,
            format!("fed {} vs {} tokens", a.fed_tokens.len(), b.fed_tokens.len()),
        ));
    }
    if a.last_step != b.last_step {
        return Err(mismatch(common, format!("last step {:?} vs {:?}", a.last_step, b.last_step)));
    }
    Ok(())
}

/// One generation context bound to one image.
pub trait Session: Send {
    fn state(&self) -> &SessionState;

    /// Logits for the next token given everything fed so far.
    fn step_logits(&mut self) -> Result<LogitVector, BackendError>;

    fn feed(&mut self, token: TokenId) -> Result<(), BackendError>;

    fn close(&mut self) -> Result<(), BackendError> {
        Ok(())
    }
}

/// A model that can open sessions.
pub trait Backend: Send + Sync {
    fn info(&self) -> &BackendInfo;

    fn open_session(
        &self,
        session_id: &str,
        image_id: &str,
        prompt: &[TokenId],
    ) -> Result<Box<dyn Session>, BackendError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(tokens: &[TokenId]) -> SessionState {
        let mut s = SessionState::new("a", "img", &[1, 2]);
        s.fed_tokens = tokens.to_vec();
        s
    }

    #[test]
    fn fresh_pair_passes() {
        let a = SessionState::new("a", "x", &[]);
        let b = SessionState::new("b", "y", &[]);
        assert!(lockstep_barrier(&a, &b).is_ok());
    }

    #[test]
    fn extra_token_reports_position() {
        let a = state(&[4, 5, 6]);
        let b = state(&[4, 5]);
        assert_eq!(lockstep_barrier(&a, &b).unwrap_err().position, 2);
    }

    #[test]
    fn divergent_token_reports_position() {
        let a = state(&[4, 5, 6]);
        let b = state(&[4, 9, 6]);
        assert_eq!(lockstep_barrier(&a, &b).unwrap_err().position, 1);
    }

    #[test]
    fn long_identical_prefix() {
        let toks: Vec<TokenId> = (0..100).collect();
        assert!(lockstep_barrier(&state(&toks), &state(&toks)).is_ok());
    }

    #[test]
    fn step_counter_must_match() {
        let a = state(&[1]);
        let mut b = state(&[1]);
        b.last_step = Some(0);
        assert!(lockstep_barrier(&a, &b).is_err());
    }
}
