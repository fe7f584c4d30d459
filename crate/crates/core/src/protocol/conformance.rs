//! Black-box checks any `cicd/1` backend must pass, driven over raw lines.

use serde::Serialize;

use super::client::Connection;
use super::session::BackendError;
use super::wire::{Codec, Payload, WireMessage, PROTOCOL_VERSION};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type CheckFn = fn(&mut Probe) -> Result<(), String>;

/// Raw line access plus the handshake facts the checks need.
pub struct Probe {
    conn: Connection,
    codec: Codec,
    vocab_size: usize,
    images: (String, String),
    counter: usize,
}

impl Probe {
    fn fresh_session(&mut self, tag: &str) -> String {
        self.counter += 1;
        format!("conf-{tag}-{}", self.counter)
    }

    fn send(&mut self, session: &str, payload: Payload) -> Result<(), String> {
        let line = Codec::default()
            .encode(&WireMessage::new(session, payload))
            .map_err(|e| e.to_string())?;
        self.conn.send_line(&line).map_err(|e| e.to_string())
    }

    fn recv(&mut self) -> Result<WireMessage, String> {
        let line = self.conn.recv_line().map_err(|e| e.to_string())?;
        self.codec.decode(&line).map_err(|e| format!("undecodable reply {line:?}: {e}"))
    }

    fn exchange(&mut self, session: &str, payload: Payload) -> Result<WireMessage, String> {
        self.send(session, payload)?;
        let reply = self.recv()?;
        if reply.session != session {
            return Err(format!("reply carries session {:?}, expected {session:?}", reply.session));
        }
        Ok(reply)
    }

    fn expect(&mut self, session: &str, payload: Payload, want: &str) -> Result<Payload, String> {
        let reply = self.exchange(session, payload)?;
        if reply.payload.type_name() != want {
            return Err(format!("expected {want}, got {:?}", reply.payload));
        }
        Ok(reply.payload)
    }

    fn expect_error(&mut self, session: &str, payload: Payload) -> Result<String, String> {
        match self.exchange(session, payload)?.payload {
            Payload::Error { code, .. } => Ok(code),
            other => Err(format!("expected an error frame, got {}", other.type_name())),
        }
    }

    fn expect_raw_error(&mut self, line: &str) -> Result<String, String> {
        self.conn.send_line(line).map_err(|e| e.to_string())?;
        match self.recv()?.payload {
            Payload::Error { code, .. } => Ok(code),
            other => Err(format!("expected an error frame, got {}", other.type_name())),
        }
    }

    fn init(&mut self, session: &str, image: &str) -> Result<(), String> {
        self.expect(session, Payload::Init { image_id: image.to_owned(), prompt: Vec::new() }, "init_ack")
            .map(drop)
    }

    fn step(&mut self, session: &str, step: u64) -> Result<Vec<f64>, String> {
        match self.expect(session, Payload::StepRequest { step }, "logits")? {
            Payload::Logits { step: got, logits, logits_f32_b64 } => {
                if got != step {
                    return Err(format!("logits for step {got}, requested {step}"));
                }
                let v = super::wire::logits_values(&logits, &logits_f32_b64).map_err(|e| e.to_string())?;
                if v.len() != self.vocab_size {
                    return Err(format!("{} logits for vocabulary of {}", v.len(), self.vocab_size));
                }
                Ok(v)
            }
            _ => unreachable!(),
        }
    }

    fn feed(&mut self, session: &str, token: u32) -> Result<(), String> {
        self.expect(session, Payload::Feed { token }, "feed_ack").map(drop)
    }

    fn close(&mut self, session: &str) -> Result<(), String> {
        self.send(session, Payload::Close)
    }

    /// A token that is valid in any vocabulary of two or more entries.
    fn token(&self) -> u32 {
        (self.vocab_size.min(2) - 1) as u32
    }
}

fn check_hello(p: &mut Probe) -> Result<(), String> {
    match p.expect("", Payload::Hello, "hello_ack")? {
        Payload::HelloAck(info) if info.vocab_size == p.vocab_size => Ok(()),
        other => Err(format!("hello_ack changed between calls: {other:?}")),
    }
}

fn check_two_sessions(p: &mut Probe) -> Result<(), String> {
    let (a, b) = (p.fresh_session("a"), p.fresh_session("b"));
    let (ia, ib) = p.images.clone();
    p.init(&a, &ia)?;
    p.init(&b, &ib)?;
    p.step(&a, 0)?;
    p.step(&b, 0)?;
    p.close(&a)?;
    p.close(&b)
}

fn check_step_before_init(p: &mut Probe) -> Result<(), String> {
    let s = p.fresh_session("noinit");
    p.expect_error(&s, Payload::StepRequest { step: 0 }).map(drop)
}

fn check_interleaving(p: &mut Probe) -> Result<(), String> {
    let (a, b) = (p.fresh_session("a"), p.fresh_session("b"));
    let (ia, ib) = p.images.clone();
    let t = p.token();
    p.init(&a, &ia)?;
    p.init(&b, &ib)?;
    for step in 0..3 {
        p.step(&a, step)?;
        p.step(&b, step)?;
        p.feed(&a, t)?;
        p.feed(&b, t)?;
    }
    p.close(&a)?;
    p.close(&b)
}

fn check_step_order(p: &mut Probe) -> Result<(), String> {
    let s = p.fresh_session("order");
    let img = p.images.0.clone();
    p.init(&s, &img)?;
    p.expect_error(&s, Payload::StepRequest { step: 1 })?;
    p.step(&s, 0)?;
    p.expect_error(&s, Payload::StepRequest { step: 0 })?;
    let t = p.token();
    p.feed(&s, t)?;
    p.step(&s, 1)?;
    p.close(&s)
}

fn check_malformed_keeps_connection(p: &mut Probe) -> Result<(), String> {
    p.expect_raw_error("{\"v\":\"cicd/1\",\"session\":\"x\",\"ty")?;
    p.expect_raw_error("not json at all")?;
    check_hello(p)
}

fn check_unknown_type(p: &mut Probe) -> Result<(), String> {
    let code = p.expect_raw_error(&format!(
        "{{\"v\":\"{PROTOCOL_VERSION}\",\"session\":\"u\",\"type\":\"rewind\"}}"
    ))?;
    if code != "unknown_type" {
        return Err(format!("error code {code:?}, expected \"unknown_type\""));
    }
    check_hello(p)
}

fn check_version(p: &mut Probe) -> Result<(), String> {
    let code = p.expect_raw_error("{\"v\":\"cicd/0\",\"session\":\"\",\"type\":\"hello\"}")?;
    if code != "version_mismatch" {
        return Err(format!("error code {code:?}, expected \"version_mismatch\""));
    }
    Ok(())
}

fn check_determinism(p: &mut Probe) -> Result<(), String> {
    let (a, b) = (p.fresh_session("det"), p.fresh_session("det"));
    let img = p.images.0.clone();
    let t = p.token();
    p.init(&a, &img)?;
    p.init(&b, &img)?;
    for step in 0..3 {
        let la = p.step(&a, step)?;
        let lb = p.step(&b, step)?;
        if la.iter().map(|x| x.to_bits()).ne(lb.iter().map(|x| x.to_bits())) {
            return Err(format!("identical sessions differ at step {step}"));
        }
        p.feed(&a, t)?;
        p.feed(&b, t)?;
    }
    p.close(&a)?;
    p.close(&b)
}

fn check_close(p: &mut Probe) -> Result<(), String> {
    let s = p.fresh_session("close");
    let img = p.images.0.clone();
    p.init(&s, &img)?;
    p.close(&s)?;
    p.expect_error(&s, Payload::StepRequest { step: 0 })?;
    p.init(&s, &img)?;
    p.step(&s, 0)?;
    p.close(&s)
}

fn check_bad_token(p: &mut Probe) -> Result<(), String> {
    let s = p.fresh_session("tok");
    let img = p.images.0.clone();
    p.init(&s, &img)?;
    p.expect_error(&s, Payload::Feed { token: p.vocab_size as u32 })?;
    p.close(&s)
}

const CHECKS: [(&str, CheckFn); 11] = [
    ("hello handshake", check_hello),
    ("two sessions on one connection", check_two_sessions),
    ("step before init is an error", check_step_before_init),
    ("interleaved step and feed", check_interleaving),
    ("repeated or skipped step is an error", check_step_order),
    ("malformed frame keeps connection", check_malformed_keeps_connection),
    ("unknown message type", check_unknown_type),
    ("version mismatch", check_version),
    ("identical sessions are deterministic", check_determinism),
    ("close ends a session", check_close),
    ("out-of-vocabulary token is an error", check_bad_token),
];

/// Runs every check on one connection. Image ids come from `hello_ack`
/// unless given.
pub fn run_conformance(
    mut conn: Connection,
    images: Option<(String, String)>,
) -> Result<ConformanceReport, BackendError> {
    let info = match conn.request(&WireMessage::new("", Payload::Hello))? {
        Payload::HelloAck(info) => info,
        other => return Err(BackendError::Protocol(format!("expected hello_ack, got {}", other.type_name()))),
    };
    let images = match images {
        Some(pair) => pair,
        None => match info.images.as_deref() {
            Some([a, b, ..]) => (a.clone(), b.clone()),
            _ => {
                return Err(BackendError::InvalidRequest(
                    "backend lists fewer than two images; pass them explicitly".into(),
                ))
            }
        },
    };
    let mut probe = Probe { conn, codec: Codec::new(Some(info.vocab_size)), vocab_size: info.vocab_size, images, counter: 0 };
    let checks = CHECKS
        .iter()
        .map(|&(name, check)| {
            let outcome = check(&mut probe);
            CheckResult { name, passed: outcome.is_ok(), detail: outcome.err().unwrap_or_default() }
        })
        .collect();
    Ok(ConformanceReport { checks })
}
