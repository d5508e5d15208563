use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::fault_manager::{self, parse_u32, ClassifierConfig, DetectionReport, FaultError};
use crate::model::{DiagId, HealthMap, MapError, ModuleId, ModuleStatus, Severity};
use crate::resource_map::{ResourceMap, RmError};

use super::wire::{decode_summary, WireError};

/// Classification given to faults that arrive from a child node.
pub const HIERARCHY_CLASS: u8 = 0xFF;
/// Kind byte of auto-created downlink instruments.
pub const DOWNLINK_KIND: u8 = 0xFF;
const DOWNLINK_BASE: DiagId = 0x8000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChildLink {
    pub node: u32,
    pub child_module: ModuleId,
    pub parent_module: ModuleId,
}

/// How a parent sees its children: which child module feeds which local
/// module, and which local instrument stands in for each child link.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChildMapping {
    links: Vec<ChildLink>,
    index: HashMap<(u32, ModuleId), usize>,
    downlinks: BTreeMap<u32, DiagId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("node {0} is not a mapped child")]
    UnknownNode(u32),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("child {node} module {module} is mapped twice")]
    DuplicateLink { node: u32, module: ModuleId },
    #[error("downlink for node {0} declared twice")]
    DuplicateDownlink(u32),
    #[error("mapping targets module {0}, which the parent map lacks")]
    UnknownParentModule(ModuleId),
    #[error("downlink instrument {detector} for node {node} is not in the parent map")]
    UnknownDownlink { node: u32, detector: DiagId },
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    ResourceMap(#[from] RmError),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IngestOutcome {
    /// Entries that produced a fault record.
    pub recorded: usize,
    /// Faulty entries for child modules that have no mapping.
    pub skipped: usize,
}

impl ChildMapping {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn link(&mut self, link: ChildLink) -> Result<(), IngestError> {
        let key = (link.node, link.child_module);
        if self.index.contains_key(&key) {
            return Err(IngestError::DuplicateLink {
                node: link.node,
                module: link.child_module,
            });
        }
        self.index.insert(key, self.links.len());
        self.links.push(link);
        Ok(())
    }

    pub fn set_downlink(&mut self, node: u32, detector: DiagId) -> Result<(), IngestError> {
        if self.downlinks.insert(node, detector).is_some() {
            return Err(IngestError::DuplicateDownlink(node));
        }
        Ok(())
    }

    pub fn links(&self) -> &[ChildLink] {
        &self.links
    }

    pub fn target(&self, node: u32, child_module: ModuleId) -> Option<ModuleId> {
        self.index
            .get(&(node, child_module))
            .map(|&i| self.links[i].parent_module)
    }

    pub fn downlink(&self, node: u32) -> Option<DiagId> {
        self.downlinks.get(&node).copied()
    }

    pub fn knows(&self, node: u32) -> bool {
        self.downlinks.contains_key(&node) || self.links.iter().any(|l| l.node == node)
    }

    /// Child node ids in ascending order.
    pub fn nodes(&self) -> Vec<u32> {
        let mut nodes: Vec<u32> = self.links.iter().map(|l| l.node).collect();
        nodes.extend(self.downlinks.keys());
        nodes.sort_unstable();
        nodes.dedup();
        nodes
    }

    /// Checks targets against `map` and gives every child without an
    /// explicit downlink a virtual instrument, owned by the child's first
    /// mapped parent module.
    pub fn install(&mut self, map: &mut HealthMap) -> Result<(), IngestError> {
        for l in &self.links {
            if !map.contains_module(l.parent_module) {
                return Err(IngestError::UnknownParentModule(l.parent_module));
            }
        }
        for node in self.nodes() {
            match self.downlinks.get(&node) {
                Some(&detector) => {
                    if map.diag_resource(detector).is_none() {
                        return Err(IngestError::UnknownDownlink { node, detector });
                    }
                }
                None => {
                    let owner = self
                        .links
                        .iter()
                        .find(|l| l.node == node)
                        .expect("node has a link")
                        .parent_module;
                    let detector = DOWNLINK_BASE.wrapping_add(node);
                    if map.diag_resource(detector).is_none() {
                        map.add_diag_resource(owner, detector, DOWNLINK_KIND)?;
                    }
                    self.downlinks.insert(node, detector);
                }
            }
        }
        Ok(())
    }

    /// `child <node> <childModule> -> <parentModule>` and
    /// `downlink <node> <instrument>` lines.
    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let mut mapping = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let syntax = |message: &str| IngestError::Syntax {
                line,
                message: message.to_string(),
            };
            let tokens: Vec<&str> = content.split_whitespace().collect();
            let num = |s: &str| parse_u32(s).ok_or_else(|| syntax(&format!("bad number {s:?}")));
            match tokens.as_slice() {
                ["child", node, child, "->", parent] => mapping.link(ChildLink {
                    node: num(node)?,
                    child_module: num(child)?,
                    parent_module: num(parent)?,
                })?,
                ["downlink", node, detector] => {
                    mapping.set_downlink(num(node)?, num(detector)?)?
                }
                _ => {
                    return Err(syntax(
                        "expected 'child <node> <module> -> <module>' or 'downlink <node> <instrument>'",
                    ))
                }
            }
        }
        Ok(mapping)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.links {
            out.push_str(&format!(
                "child {} {} -> {}\n",
                l.node, l.child_module, l.parent_module
            ));
        }
        for (node, det) in &self.downlinks {
            out.push_str(&format!("downlink {node} {det}\n"));
        }
        out
    }
}

/// Folds a child's summary into the parent map.
///
/// Every faulty entry with a mapping becomes a detection on the child's
/// downlink instrument, recorded against the mapped parent module with the
/// entry's severity and at least its persistence. The child's status byte
/// is ignored.
pub fn ingest_summary(
    map: &mut HealthMap,
    rm: &mut ResourceMap,
    message: &[u8],
    mapping: &ChildMapping,
    timestamp: u64,
    config: &ClassifierConfig,
) -> Result<IngestOutcome, IngestError> {
    let summary = decode_summary(message)?;
    if !mapping.knows(summary.node) {
        return Err(IngestError::UnknownNode(summary.node));
    }
    let mut outcome = IngestOutcome::default();
    for entry in summary.entries.iter().filter(|e| e.worst_severity > Severity::Zero) {
        let Some(target) = mapping.target(summary.node, entry.module_id) else {
            outcome.skipped += 1;
            continue;
        };
        let detector = mapping
            .downlink(summary.node)
            .ok_or(IngestError::UnknownDownlink {
                node: summary.node,
                detector: DOWNLINK_BASE.wrapping_add(summary.node),
            })?;
        let report = DetectionReport {
            detector,
            severity: entry.worst_severity,
            classification: HIERARCHY_CLASS,
            timestamp,
            payload: entry.module_id,
        };
        let recorded = fault_manager::record(
            map,
            target,
            &report,
            config,
            entry.worst_persistence,
            false,
        )?;
        rm.update_single_fault(
            map,
            target,
            recorded.severity,
            recorded.persistence,
            ModuleStatus::OwnFault,
        )?;
        outcome.recorded += 1;
    }
    Ok(outcome)
}
