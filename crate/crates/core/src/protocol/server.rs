//! Serves any [`Backend`] over a line transport.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use super::session::{Backend, BackendError, Session};
use super::wire::{Codec, Payload, WireError, WireMessage};

fn backend_error_frame(e: &BackendError) -> Payload {
    let code = match e {
        BackendError::NotFound(_) => "not_found",
        BackendError::InvalidRequest(_) => "invalid_request",
        BackendError::Remote { .. } => "remote_error",
        BackendError::Protocol(_) => "protocol_error",
        BackendError::Transport(_) => "transport_error",
    };
    Payload::error(code, e.to_string())
}

struct Served {
    session: Box<dyn Session>,
    last_step: Option<u64>,
}

/// Per-connection protocol state machine, independent of I/O.
pub struct ServerState<'a> {
    backend: &'a dyn Backend,
    codec: Codec,
    sessions: HashMap<String, Served>,
}

impl<'a> ServerState<'a> {
    pub fn new(backend: &'a dyn Backend) -> Self {
        let codec = Codec::new(Some(backend.info().vocab_size));
        Self { backend, codec, sessions: HashMap::new() }
    }

    /// Handles one input line and returns the reply line, if any.
    pub fn handle_line(&mut self, line: &str) -> Option<String> {
        let reply = match self.codec.decode(line) {
            Ok(msg) => self.handle(msg)?,
            Err(e) => WireMessage::new(recover_session(line), wire_error_frame(&e)),
        };
        Some(match self.codec.encode(&reply) {
            Ok(l) => l,
            Err(e) => self
                .codec
                .encode(&WireMessage::new(reply.session, Payload::error("internal", e.to_string())))
                .expect("error frames always encode"),
        })
    }

    fn handle(&mut self, msg: WireMessage) -> Option<WireMessage> {
        let sid = msg.session;
        let reply = |p| Some(WireMessage::new(sid.clone(), p));
        match msg.payload {
            Payload::Hello => reply(Payload::HelloAck(self.backend.info().clone())),
            Payload::Init { image_id, prompt } => {
                if self.sessions.contains_key(&sid) {
                    return reply(Payload::error("session_exists", format!("session {sid:?} already initialized")));
                }
                let vocab = self.backend.info().vocab_size;
                if let Some(t) = prompt.iter().find(|&&t| t as usize >= vocab) {
                    return reply(Payload::error("bad_token", format!("prompt token {t} outside vocabulary")));
                }
                match self.backend.open_session(&sid, &image_id, &prompt) {
                    Ok(session) => {
                        self.sessions.insert(sid.clone(), Served { session, last_step: None });
                        reply(Payload::InitAck)
                    }
                    Err(e) => reply(backend_error_frame(&e)),
                }
            }
            Payload::StepRequest { step } => {
                let Some(served) = self.sessions.get_mut(&sid) else {
                    return reply(no_session(&sid));
                };
                let expected = served.session.state().next_step();
                if step != expected || served.last_step == Some(step) {
                    return reply(Payload::error(
                        "bad_step",
                        format!("step {step} requested, next step is {expected}"),
                    ));
                }
                match served.session.step_logits() {
                    Ok(v) => {
                        served.last_step = Some(step);
                        reply(Payload::dense_logits(step, v.into_values()))
                    }
                    Err(e) => reply(backend_error_frame(&e)),
                }
            }
            Payload::Feed { token } => {
                let vocab = self.backend.info().vocab_size;
                let Some(served) = self.sessions.get_mut(&sid) else {
                    return reply(no_session(&sid));
                };
                if token as usize >= vocab {
                    return reply(Payload::error("bad_token", format!("token {token} outside vocabulary of {vocab}")));
                }
                match served.session.feed(token) {
                    Ok(()) => reply(Payload::FeedAck),
                    Err(e) => reply(backend_error_frame(&e)),
                }
            }
            Payload::Close => {
                if let Some(mut s) = self.sessions.remove(&sid) {
                    let _ = s.session.close();
                }
                None
            }
            other => reply(Payload::error(
                "unexpected",
                format!("{} is a server-to-client message", other.type_name()),
            )),
        }
    }

    pub fn open_sessions(&self) -> usize {
        self.sessions.len()
    }
}

fn no_session(sid: &str) -> Payload {
    Payload::error("no_session", format!("session {sid:?} not initialized"))
}

fn wire_error_frame(e: &WireError) -> Payload {
    Payload::error(e.code(), e.to_string())
}

/// Best-effort session id from a frame that failed to decode.
fn recover_session(line: &str) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("session")?.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// Answers frames until end of input. Errors in individual frames are
/// reported as `error` frames and the connection stays open.
pub fn serve<R: BufRead, W: Write>(backend: &dyn Backend, mut reader: R, mut writer: W) -> io::Result<()> {
    let mut state = ServerState::new(backend);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            return Ok(());
        }
        let line = String::from_utf8_lossy(&buf);
        if line.trim().is_empty() {
            continue;
        }
        if let Some(reply) = state.handle_line(&line) {
            writer.write_all(reply.as_bytes())?;
            writer.flush()?;
        }
    }
}
