//! Out-of-place debugging: a guest VM whose suspended executions can be
//! shipped from a monitor process to a manager process, debugged there, and
//! patched back.

pub mod bench;
pub mod codec;
pub mod manager;
pub mod monitor;
pub mod remote;
pub mod serial;
pub mod view;
pub mod vm;
pub mod wire;
pub mod workloads;
