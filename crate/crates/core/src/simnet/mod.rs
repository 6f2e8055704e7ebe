//! Deterministic substrate: virtual clock, ordered message bus, simulated
//! hosts and VMs, and fault injection.

pub mod envelope;
pub mod host;
pub mod live;
pub mod service;
pub mod world;

pub use envelope::{canonical_json, Envelope};
pub use host::{HostError, HostTable, RatePolicy, SimHost, VmInstance, VmSpec, VmState};
pub use service::{Context, ErrorBody, Mailbox, Service, TraceRecord};
pub use world::{DropRule, Fault, NetConfig, SimError, World};
