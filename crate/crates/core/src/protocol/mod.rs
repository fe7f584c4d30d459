//! Backend abstraction and the `cicd/1` line protocol.

pub mod client;
pub mod conformance;
pub mod server;
pub mod session;
pub mod wire;
