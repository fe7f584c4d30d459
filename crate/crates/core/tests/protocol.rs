mod support;

use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use cicd::engine::{generate, EngineConfig, GenerationResult, SessionPair};
use cicd::protocol::client::{Endpoint, RemoteBackend};
use cicd::protocol::server::ServerState;
use cicd::protocol::session::Backend;
use cicd::sim::backend::SimBackend;
use cicd::sim::world::{build_world, SynthWorld, WorldConfig};
use serde_json::Value;

fn small_world() -> SynthWorld {
    let config = WorldConfig { n_images: 6, n_objects: 24, ..WorldConfig::default() };
    build_world(&config, 5).unwrap()
}

fn save(dir: &Path, world: &SynthWorld) -> String {
    let path = dir.join("w.json");
    world.save(&path).unwrap();
    path.display().to_string()
}

fn decode(backend: &dyn Backend, ids: &[String], seed: u64) -> GenerationResult {
    let mut pair = SessionPair::open(backend, backend, &ids[0], &ids[1], &[]).unwrap();
    let cfg = EngineConfig { seed, full_trace: true, ..EngineConfig::default() };
    let r = generate(&mut pair, &cfg).unwrap();
    pair.close().unwrap();
    r
}

#[test]
fn subprocess_backend_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let world = small_world();
    let path = save(dir.path(), &world);
    let local = SimBackend::new(Arc::new(world.clone()));
    let endpoint: Endpoint = format!("exec:{} serve-sim --world {path}", support::cicd_bin()).parse().unwrap();
    let remote = RemoteBackend::connect(&endpoint).unwrap();
    assert_eq!(remote.info(), local.info());
    let ids = world.image_ids();
    for seed in 0..3 {
        assert_eq!(decode(&remote, &ids, seed), decode(&local, &ids, seed));
    }
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn tcp_backend_serves_concurrent_clients() {
    let dir = tempfile::tempdir().unwrap();
    let world = small_world();
    let path = save(dir.path(), &world);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let _server = Server(
        Command::new(support::cicd_bin())
            .args(["serve-sim", "--world", &path, "--listen", &format!("tcp:127.0.0.1:{port}")])
            .stdout(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let endpoint: Endpoint = format!("tcp:127.0.0.1:{port}").parse().unwrap();
    let connect = || {
        for _ in 0..100 {
            if let Ok(b) = RemoteBackend::connect(&endpoint) {
                return b;
            }
            std::thread::sleep(Duration::from_millis(50));
        }
        panic!("server never came up");
    };
    let local = SimBackend::new(Arc::new(world.clone()));
    let ids = world.image_ids();
    let want = decode(&local, &ids, 9);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..3).map(|_| s.spawn(|| decode(&connect(), &ids, 9))).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), want);
        }
    });
}

fn exchange(state: &mut ServerState, line: &str) -> Option<Value> {
    state.handle_line(line).map(|r| serde_json::from_str(&r).unwrap())
}

fn code(state: &mut ServerState, line: &str) -> String {
    let reply = exchange(state, line).expect("reply");
    assert_eq!(reply["type"], "error", "{reply}");
    reply["code"].as_str().unwrap().to_owned()
}

#[test]
fn server_error_codes() {
    let world = small_world();
    let backend = SimBackend::new(Arc::new(world.clone()));
    let img = &world.image_ids()[0];
    let vocab = world.vocab_size();
    let mut st = ServerState::new(&backend);

    assert_eq!(code(&mut st, "{not json"), "parse_error");
    assert_eq!(code(&mut st, r#"{"v":"cicd/0","session":"a","type":"hello"}"#), "version_mismatch");
    assert_eq!(code(&mut st, r#"{"v":"cicd/1","session":"a","type":"shout"}"#), "unknown_type");
    assert_eq!(code(&mut st, r#"{"v":"cicd/1","session":"a","type":"step_request","step":0}"#), "no_session");
    assert_eq!(code(&mut st, r#"{"v":"cicd/1","session":"a","type":"init","image_id":"nope"}"#), "not_found");
    let init = format!(r#"{{"v":"cicd/1","session":"a","type":"init","image_id":"{img}"}}"#);
    assert_eq!(exchange(&mut st, &init).unwrap()["type"], "init_ack");
    assert_eq!(code(&mut st, &init), "session_exists");
    assert_eq!(code(&mut st, r#"{"v":"cicd/1","session":"a","type":"step_request","step":3}"#), "bad_step");
    let logits = exchange(&mut st, r#"{"v":"cicd/1","session":"a","type":"step_request","step":0}"#).unwrap();
    assert_eq!(logits["logits"].as_array().unwrap().len(), vocab);
    assert_eq!(code(&mut st, r#"{"v":"cicd/1","session":"a","type":"step_request","step":0}"#), "bad_step");
    let feed = format!(r#"{{"v":"cicd/1","session":"a","type":"feed","token":{vocab}}}"#);
    assert_eq!(code(&mut st, &feed), "bad_token");
    assert_eq!(code(&mut st, r#"{"v":"cicd/1","session":"a","type":"feed_ack"}"#), "unexpected");
    assert_eq!(st.open_sessions(), 1);
    assert!(exchange(&mut st, r#"{"v":"cicd/1","session":"a","type":"close"}"#).is_none());
    assert_eq!(st.open_sessions(), 0);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint: Endpoint = format!("tcp:127.0.0.1:{port}").parse().unwrap();
    assert!(matches!(
        RemoteBackend::connect(&endpoint),
        Err(cicd::protocol::session::BackendError::Transport(_))
    ));
    assert!("ftp:x".parse::<Endpoint>().is_err());
    assert!("exec:".parse::<Endpoint>().is_err());
}
