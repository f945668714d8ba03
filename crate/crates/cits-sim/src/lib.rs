//! Deterministic discrete-event simulator of a C-ITS environment:
//! vehicles, roadside units, and clouds exchanging PDUs over typed links,
//! four service packages (parking management, emergency preemption,
//! vehicle monitoring, route guidance) running on top, a CVE-based attack
//! layer that injects multi-step scenarios, and monitors that turn attack
//! effects into integrity and safety alarms.
//!
//! Identical (topology, scenario, seed, horizon) inputs always produce
//! byte-identical traces and reports.

pub mod attack;
pub mod engine;
pub mod monitor;
pub mod pdu;
pub mod services;
pub mod topology;
pub mod version;

pub use engine::{Sim, SimConfig};
pub use topology::Topology;
