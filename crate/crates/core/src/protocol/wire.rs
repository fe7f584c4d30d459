//! JSON-lines framing for the `cicd/1` protocol.
//!
//! Every frame is one JSON object on one line:
//!
//! ```text
//! {"v":"cicd/1","session":"a","type":"feed","token":5}
//! ```

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::session::{BackendInfo, TokenId};

pub const PROTOCOL_VERSION: &str = "cicd/1";

pub const MESSAGE_TYPES: [&str; 10] = [
    "hello",
    "hello_ack",
    "init",
    "init_ack",
    "step_request",
    "logits",
    "feed",
    "feed_ack",
    "close",
    "error",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("malformed frame at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("protocol version {found:?}, expected {PROTOCOL_VERSION:?}")]
    Version { found: Option<String> },
    #[error("cannot encode frame: {0}")]
    Encoding(String),
    #[error("logits payload has {found} entries, negotiated vocabulary has {expected}")]
    Length { expected: usize, found: usize },
}

impl WireError {
    /// Code used in `error` frames.
    pub fn code(&self) -> &'static str {
        match self {
            WireError::Parse { .. } => "parse_error",
            WireError::UnknownType(_) => "unknown_type",
            WireError::Version { .. } => "version_mismatch",
            WireError::Encoding(_) => "encoding_error",
            WireError::Length { .. } => "length_mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Payload {
    Hello,
    HelloAck(BackendInfo),
    Init {
        image_id: String,
        #[serde(default)]
        prompt: Vec<TokenId>,
    },
    InitAck,
    StepRequest {
        step: u64,
    },
    Logits {
        step: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        logits: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        logits_f32_b64: Option<String>,
    },
    Feed {
        token: TokenId,
    },
    FeedAck,
    Close,
    Error {
        code: String,
        message: String,
    },
}

impl Payload {
    pub fn type_name(&self) -> &'static str {
        match self {
            Payload::Hello => "hello",
            Payload::HelloAck(_) => "hello_ack",
            Payload::Init { .. } => "init",
            Payload::InitAck => "init_ack",
            Payload::StepRequest { .. } => "step_request",
            Payload::Logits { .. } => "logits",
            Payload::Feed { .. } => "feed",
            Payload::FeedAck => "feed_ack",
            Payload::Close => "close",
            Payload::Error { .. } => "error",
        }
    }

    pub fn dense_logits(step: u64, values: Vec<f64>) -> Self {
        Payload::Logits { step, logits: Some(values), logits_f32_b64: None }
    }

    /// Little-endian `f32` logits, base64 encoded.
    pub fn packed_logits(step: u64, values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        Payload::Logits { step, logits: None, logits_f32_b64: Some(B64.encode(bytes)) }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Payload::Error { code: code.to_owned(), message: message.into() }
    }
}

/// Extracts the logit values of a `logits` frame, whichever encoding it uses.
pub fn logits_values(
    logits: &Option<Vec<f64>>,
    packed: &Option<String>,
) -> Result<Vec<f64>, WireError> {
    match (logits, packed) {
        (Some(v), None) => Ok(v.clone()),
        (None, Some(b)) => {
            let bytes = B64
                .decode(b)
                .map_err(|e| WireError::Encoding(format!("bad base64 logits: {e}")))?;
            if bytes.len() % 4 != 0 {
                return Err(WireError::Encoding(format!(
                    "packed logits length {} is not a multiple of 4",
                    bytes.len()
                )));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect())
        }
        (Some(_), Some(_)) => Err(WireError::Encoding("both logits encodings present".into())),
        (None, None) => Err(WireError::Encoding("logits frame without values".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub session: String,
    pub payload: Payload,
}

impl WireMessage {
    pub fn new(session: impl Into<String>, payload: Payload) -> Self {
        Self { session: session.into(), payload }
    }
}

#[derive(Serialize, Deserialize)]
struct Frame {
    v: String,
    session: String,
    #[serde(flatten)]
    payload: Payload,
}

/// Encoder/decoder that knows the negotiated vocabulary size, if any.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Codec {
    pub vocab_size: Option<usize>,
}

impl Codec {
    pub fn new(vocab_size: Option<usize>) -> Self {
        Self { vocab_size }
    }

    fn check_logits(&self, payload: &Payload) -> Result<(), WireError> {
        let Payload::Logits { logits, logits_f32_b64, .. } = payload else {
            return Ok(());
        };
        let values = logits_values(logits, logits_f32_b64)?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(WireError::Encoding(format!("non-finite logit at index {i}")));
        }
        match self.vocab_size {
            Some(expected) if expected != values.len() => {
                Err(WireError::Length { expected, found: values.len() })
            }
            _ => Ok(()),
        }
    }

    /// One newline-terminated line.
    pub fn encode(&self, msg: &WireMessage) -> Result<String, WireError> {
        self.check_logits(&msg.payload)?;
        let frame = Frame {
            v: PROTOCOL_VERSION.to_owned(),
            session: msg.session.clone(),
            payload: msg.payload.clone(),
        };
        let mut line =
            serde_json::to_string(&frame).map_err(|e| WireError::Encoding(e.to_string()))?;
        line.push('\n');
        Ok(line)
    }

    pub fn decode(&self, line: &str) -> Result<WireMessage, WireError> {
        let line = line.strip_suffix('\n').unwrap_or(line);
        let line = line.strip_suffix('\r').unwrap_or(line);
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| parse_error(line, &e))?;
        let obj = value.as_object().ok_or_else(|| WireError::Parse {
            offset: 0,
            message: "frame is not a JSON object".into(),
        })?;
        match obj.get("v").and_then(|v| v.as_str()) {
            Some(PROTOCOL_VERSION) => {}
            found => {
                return Err(WireError::Version {
                    found: found.map(str::to_owned).or_else(|| obj.get("v").map(|v| v.to_string())),
                })
            }
        }
        match obj.get("type").and_then(|t| t.as_str()) {
            Some(t) if MESSAGE_TYPES.contains(&t) => {}
            Some(t) => return Err(WireError::UnknownType(t.to_owned())),
            None => {
                return Err(WireError::Parse { offset: 0, message: "missing string field \"type\"".into() })
            }
        }
        let frame: Frame = serde_json::from_value(value)
            .map_err(|e| WireError::Parse { offset: 0, message: e.to_string() })?;
        let msg = WireMessage { session: frame.session, payload: frame.payload };
        self.check_logits(&msg.payload).map_err(|e| match e {
            WireError::Encoding(message) => WireError::Parse { offset: 0, message },
            other => other,
        })?;
        Ok(msg)
    }
}

fn parse_error(line: &str, e: &serde_json::Error) -> WireError {
    // serde_json reports 1-based line and byte column.
    let offset = if e.line() <= 1 {
        e.column().saturating_sub(1)
    } else {
        line.split('\n').take(e.line() - 1).map(|l| l.len() + 1).sum::<usize>()
            + e.column().saturating_sub(1)
    };
    WireError::Parse { offset: offset.min(line.len()), message: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feed_is_one_line() {
        let line = Codec::default().encode(&WireMessage::new("a", Payload::Feed { token: 5 })).unwrap();
        assert_eq!(line, "{\"v\":\"cicd/1\",\"session\":\"a\",\"type\":\"feed\",\"token\":5}\n");
        assert_eq!(line.matches('\n').count(), 1);
    }

    #[test]
    fn hello_decodes() {
        let m = Codec::default().decode("{\"v\":\"cicd/1\",\"session\":\"\",\"type\":\"hello\"}").unwrap();
        assert_eq!(m.payload, Payload::Hello);
    }

    #[test]
    fn truncated_is_parse_error() {
        let err = Codec::default().decode("{\"v\":\"cicd/1\",\"session\":\"a\",\"ty").unwrap_err();
        assert!(matches!(err, WireError::Parse { offset, .. } if offset > 0), "{err:?}");
    }

    #[test]
    fn wrong_version() {
        let err = Codec::default().decode("{\"v\":\"cicd/2\",\"session\":\"a\",\"type\":\"hello\"}").unwrap_err();
        assert_eq!(err, WireError::Version { found: Some("cicd/2".into()) });
        let err = Codec::default().decode("{\"session\":\"a\",\"type\":\"hello\"}").unwrap_err();
        assert_eq!(err, WireError::Version { found: None });
    }

    #[test]
    fn unknown_type() {
        let err = Codec::default().decode("{\"v\":\"cicd/1\",\"session\":\"a\",\"type\":\"reset\"}").unwrap_err();
        assert_eq!(err, WireError::UnknownType("reset".into()));
    }

    #[test]
    fn logits_length_checked() {
        let codec = Codec::new(Some(3));
        let msg = WireMessage::new("a", Payload::dense_logits(0, vec![1.0, 2.0]));
        assert_eq!(codec.encode(&msg), Err(WireError::Length { expected: 3, found: 2 }));
        let line = Codec::default().encode(&msg).unwrap();
        assert!(matches!(codec.decode(&line), Err(WireError::Length { .. })));
    }

    #[test]
    fn non_finite_rejected() {
        let msg = WireMessage::new("a", Payload::dense_logits(0, vec![f64::INFINITY]));
        assert!(matches!(Codec::default().encode(&msg), Err(WireError::Encoding(_))));
    }

    #[test]
    fn packed_logits_round_trip() {
        let msg = WireMessage::new("a", Payload::packed_logits(4, &[0.5, -1.25, 3.0]));
        let codec = Codec::new(Some(3));
        let back = codec.decode(&codec.encode(&msg).unwrap()).unwrap();
        let Payload::Logits { logits, logits_f32_b64, step } = back.payload else { panic!() };
        assert_eq!(step, 4);
        assert_eq!(logits_values(&logits, &logits_f32_b64).unwrap(), vec![0.5, -1.25, 3.0]);
    }

    #[test]
    fn extreme_floats_survive() {
        let vals = vec![f64::MIN_POSITIVE, -f64::MAX, 1e-300, 0.1 + 0.2, -0.0];
        let msg = WireMessage::new("s", Payload::dense_logits(1, vals.clone()));
        let codec = Codec::default();
        let back = codec.decode(&codec.encode(&msg).unwrap()).unwrap();
        let Payload::Logits { logits: Some(got), .. } = back.payload else { panic!() };
        for (a, b) in vals.iter().zip(&got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
