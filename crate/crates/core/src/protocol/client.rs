//! Remote backends reached over stdio pipes or stream sockets.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use super::session::{Backend, BackendError, BackendInfo, Session, SessionState, TokenId};
use super::wire::{logits_values, Codec, Payload, WireMessage};
use crate::logits::LogitVector;

/// Where a remote backend lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Subprocess speaking the protocol on stdin/stdout.
    Exec(Vec<String>),
    Tcp(String),
    #[cfg(unix)]
    Unix(std::path::PathBuf),
}

impl FromStr for Endpoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(cmd) = s.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
            if argv.is_empty() {
                return Err("exec: endpoint needs a command".into());
            }
            Ok(Endpoint::Exec(argv))
        } else if let Some(addr) = s.strip_prefix("tcp:") {
            if !addr.contains(':') {
                return Err(format!("tcp endpoint needs host:port, got {addr:?}"));
            }
            Ok(Endpoint::Tcp(addr.to_owned()))
        } else if let Some(path) = s.strip_prefix("unix:") {
            #[cfg(unix)]
            return Ok(Endpoint::Unix(path.into()));
            #[cfg(not(unix))]
            return Err(format!("unix sockets unsupported here: {path}"));
        } else {
            Err(format!("unknown endpoint {s:?}; expected exec:, tcp: or unix:"))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Exec(argv) => write!(f, "exec:{}", argv.join(" ")),
            Endpoint::Tcp(a) => write!(f, "tcp:{a}"),
            #[cfg(unix)]
            Endpoint::Unix(p) => write!(f, "unix:{}", p.display()),
        }
    }
}

/// A line-oriented duplex stream.
pub struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    codec: Codec,
}

impl Connection {
    pub fn new(reader: Box<dyn BufRead + Send>, writer: Box<dyn Write + Send>) -> Self {
        Self { reader, writer, child: None, codec: Codec::default() }
    }

    pub fn open(endpoint: &Endpoint) -> Result<Self, BackendError> {
        let transport = |e: std::io::Error| BackendError::Transport(format!("{endpoint}: {e}"));
        match endpoint {
            Endpoint::Exec(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(transport)?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let mut conn = Self::new(Box::new(BufReader::new(stdout)), Box::new(stdin));
                conn.child = Some(child);
                Ok(conn)
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(transport)?;
                let _ = stream.set_nodelay(true);
                let read = stream.try_clone().map_err(transport)?;
                Ok(Self::new(Box::new(BufReader::new(read)), Box::new(stream)))
            }
            #[cfg(unix)]
            Endpoint::Unix(path) => {
                let stream = std::os::unix::net::UnixStream::connect(path).map_err(transport)?;
                let read = stream.try_clone().map_err(transport)?;
                Ok(Self::new(Box::new(BufReader::new(read)), Box::new(stream)))
            }
        }
    }

    pub fn send_line(&mut self, line: &str) -> Result<(), BackendError> {
        let t = |e: std::io::Error| BackendError::Transport(e.to_string());
        self.writer.write_all(line.as_bytes()).map_err(t)?;
        if !line.ends_with('\n') {
            self.writer.write_all(b"\n").map_err(t)?;
        }
        self.writer.flush().map_err(t)
    }

    pub fn recv_line(&mut self) -> Result<String, BackendError> {
        let mut buf = Vec::new();
        let n = self
            .reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if n == 0 {
            return Err(BackendError::Transport("connection closed by backend".into()));
        }
        String::from_utf8(buf).map_err(|e| BackendError::Protocol(format!("non-UTF-8 frame: {e}")))
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<(), BackendError> {
        let line = self
            .codec
            .encode(msg)
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        self.send_line(&line)
    }

    pub fn recv(&mut self) -> Result<WireMessage, BackendError> {
        let line = self.recv_line()?;
        self.codec.decode(&line).map_err(|e| BackendError::Protocol(e.to_string()))
    }

    /// Sends a frame and waits for the reply on the same session.
    pub fn request(&mut self, msg: &WireMessage) -> Result<Payload, BackendError> {
        self.send(msg)?;
        let reply = self.recv()?;
        if reply.session != msg.session {
            return Err(BackendError::Protocol(format!(
                "reply for session {:?} while waiting on {:?}",
                reply.session, msg.session
            )));
        }
        match reply.payload {
            Payload::Error { code, message } => Err(BackendError::Remote { code, message }),
            p => Ok(p),
        }
    }

    pub fn set_vocab_size(&mut self, vocab_size: usize) {
        self.codec = Codec::new(Some(vocab_size));
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A backend on the other end of a [`Connection`]. Sessions share the
/// connection; frames are written one request at a time.
pub struct RemoteBackend {
    conn: Arc<Mutex<Connection>>,
    info: BackendInfo,
}

impl RemoteBackend {
    pub fn connect(endpoint: &Endpoint) -> Result<Self, BackendError> {
        Self::handshake(Connection::open(endpoint)?)
    }

    pub fn handshake(mut conn: Connection) -> Result<Self, BackendError> {
        let info = match conn.request(&WireMessage::new("", Payload::Hello))? {
            Payload::HelloAck(info) => info,
            other => {
                return Err(BackendError::Protocol(format!(
                    "expected hello_ack, got {}",
                    other.type_name()
                )))
            }
        };
        if info.vocab_size == 0 {
            return Err(BackendError::Protocol("backend reported an empty vocabulary".into()));
        }
        if let Some(table) = &info.token_table {
            if table.len() != info.vocab_size {
                return Err(BackendError::Protocol(format!(
                    "token table has {} entries, vocab_size is {}",
                    table.len(),
                    info.vocab_size
                )));
            }
        }
        conn.set_vocab_size(info.vocab_size);
        Ok(Self { conn: Arc::new(Mutex::new(conn)), info })
    }
}

impl Backend for RemoteBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn open_session(
        &self,
        session_id: &str,
        image_id: &str,
        prompt: &[TokenId],
    ) -> Result<Box<dyn Session>, BackendError> {
        let msg = WireMessage::new(
            session_id,
            Payload::Init { image_id: image_id.to_owned(), prompt: prompt.to_vec() },
        );
        match lock(&self.conn)?.request(&msg) {
            Ok(Payload::InitAck) => {}
            Ok(other) => {
                return Err(BackendError::Protocol(format!("expected init_ack, got {}", other.type_name())))
            }
            Err(BackendError::Remote { code, message }) if code == "not_found" => {
                return Err(BackendError::NotFound(message))
            }
            Err(e) => return Err(e),
        }
        Ok(Box::new(RemoteSession {
            conn: Arc::clone(&self.conn),
            state: SessionState::new(session_id, image_id, prompt),
            closed: false,
        }))
    }
}

fn lock(conn: &Mutex<Connection>) -> Result<std::sync::MutexGuard<'_, Connection>, BackendError> {
    conn.lock().map_err(|_| BackendError::Transport("connection poisoned".into()))
}

pub struct RemoteSession {
    conn: Arc<Mutex<Connection>>,
    state: SessionState,
    closed: bool,
}

impl Session for RemoteSession {
    fn state(&self) -> &SessionState {
        &self.state
    }

    fn step_logits(&mut self) -> Result<LogitVector, BackendError> {
        let step = self.state.next_step();
        let msg = WireMessage::new(self.state.session.clone(), Payload::StepRequest { step });
        match lock(&self.conn)?.request(&msg)? {
            Payload::Logits { step: got, logits, logits_f32_b64 } => {
                if got != step {
                    return Err(BackendError::Protocol(format!("logits for step {got}, requested {step}")));
                }
                let values = logits_values(&logits, &logits_f32_b64)
                    .map_err(|e| BackendError::Protocol(e.to_string()))?;
                self.state.last_step = Some(step);
                LogitVector::new(values).map_err(|e| BackendError::Protocol(e.to_string()))
            }
            other => Err(BackendError::Protocol(format!("expected logits, got {}", other.type_name()))),
        }
    }

    fn feed(&mut self, token: TokenId) -> Result<(), BackendError> {
        let msg = WireMessage::new(self.state.session.clone(), Payload::Feed { token });
        match lock(&self.conn)?.request(&msg)? {
            Payload::FeedAck => {
                self.state.fed_tokens.push(token);
                Ok(())
            }
            other => Err(BackendError::Protocol(format!("expected feed_ack, got {}", other.type_name()))),
        }
    }

    fn close(&mut self) -> Result<(), BackendError> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        lock(&self.conn)?.send(&WireMessage::new(self.state.session.clone(), Payload::Close))
    }
}

impl Drop for RemoteSession {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            "exec:python3 -m stub".parse::<Endpoint>().unwrap(),
            Endpoint::Exec(vec!["python3".into(), "-m".into(), "stub".into()])
        );
        assert_eq!("tcp:127.0.0.1:9000".parse::<Endpoint>().unwrap(), Endpoint::Tcp("127.0.0.1:9000".into()));
        assert!("tcp:nohost".parse::<Endpoint>().is_err());
        assert!("exec:".parse::<Endpoint>().is_err());
        assert!("ftp:x".parse::<Endpoint>().is_err());
        #[cfg(unix)]
        assert_eq!(
            "unix:/tmp/s.sock".parse::<Endpoint>().unwrap().to_string(),
            "unix:/tmp/s.sock"
        );
    }
}
