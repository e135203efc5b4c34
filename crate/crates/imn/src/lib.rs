//! Discrete-event simulation of a medical network: MPU nodes, knowledge
//! banks addressed by subject identifier through a control point,
//! packet-per-sub-procedure transactions and KMS consensus.

pub mod bank;
pub mod packet;
pub mod scenario;
pub mod sim;
pub mod topology;

pub use packet::{NodeId, NodeKind, Packet, PacketKind};
pub use scenario::{Action, Policy, Scenario};
pub use sim::{accumulate, run_events, Outcome, SimError, Transcript};
pub use topology::{resolve, Topology};
