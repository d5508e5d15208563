//! Hierarchical roll-up: a node's Resource Map travels to its parent as a
//! summary message and becomes fault input for the parent's Health Map.

mod ingest;
mod sim;
mod wire;

pub use ingest::{ingest_summary, ChildLink, ChildMapping, IngestError, IngestOutcome, HIERARCHY_CLASS};
pub use sim::{
    MessageRecord, NodeSpec, Scenario, ScenarioEvent, SimError, SimNode, SimOutput, Simulation,
    Snapshot,
};
pub use wire::{decode_summary, encode_entries, encode_summary, Summary, WireError};
