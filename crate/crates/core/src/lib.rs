//! Health Map based fault management for SoCs.
//!
//! A Health Map records functional modules, the instruments that monitor
//! them, inter-module dependencies, and every fault detection seen over the
//! system lifetime. The Resource Map summarizes it into per-module worst
//! severity, worst persistence and status, which drives task affinity masks
//! and the summaries sent up a hierarchy of nodes.

pub mod affinity;
pub mod compiler;
pub mod fault_manager;
pub mod footprint;
pub mod hierarchy;
pub mod model;
pub mod resource_map;
pub mod shm;
pub mod symbols;

pub use model::{
    DiagId, DiagResource, Dependency, Fault, FaultDetection, FaultRef, HealthMap, MapError,
    Module, ModuleId, ModuleStatus, Persistence, Severity, Violation, FLAG_MERGED,
};
pub use resource_map::{ResourceMap, RmEntry};
pub use symbols::{Symbol, SymbolTable};
