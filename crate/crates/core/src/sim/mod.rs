//! Deterministic synthetic vision-language backend.

pub mod backend;
pub mod calibrate;
pub mod world;
