//! Resource Map: per-module worst severity, worst persistence and status.
//!
//! Built from a Health Map by [`ResourceMap::init`] and kept current with
//! [`ResourceMap::update_single_fault`] as faults arrive. A module's fault
//! travels to its parent with severity capped by the module's criticality,
//! recursively, and stops at a criticality of ZERO. Dependencies carry a
//! provider's fault one hop to the dependent, capped by the dependency
//! severity; a value that has crossed a dependency edge never crosses a
//! second one.

use std::collections::HashMap;

use thiserror::Error;

use crate::model::{HealthMap, ModuleId, ModuleStatus, Persistence, Severity};
use crate::symbols::SymbolTable;

/// One Resource Map row. Encodes to 7 bytes: id (u32 LE), severity,
/// persistence, status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RmEntry {
    pub module_id: ModuleId,
    pub worst_severity: Severity,
    pub worst_persistence: Persistence,
    pub status: ModuleStatus,
}

impl RmEntry {
    pub const ENCODED_LEN: usize = 7;

    pub fn available(module_id: ModuleId) -> Self {
        Self {
            module_id,
            worst_severity: Severity::Zero,
            worst_persistence: Persistence::Zero,
            status: ModuleStatus::Available,
        }
    }

    pub fn to_bytes(&self) -> [u8; Self::ENCODED_LEN] {
        let id = self.module_id.to_le_bytes();
        [
            id[0],
            id[1],
            id[2],
            id[3],
            self.worst_severity.as_u8(),
            self.worst_persistence.as_u8(),
            self.status.as_u8(),
        ]
    }

    pub fn from_bytes(raw: &[u8; Self::ENCODED_LEN]) -> Result<Self, RmError> {
        Ok(Self {
            module_id: u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]),
            worst_severity: Severity::from_u8(raw[4]).ok_or(RmError::BadEncoding(4))?,
            worst_persistence: Persistence::from_u8(raw[5]).ok_or(RmError::BadEncoding(5))?,
            status: ModuleStatus::from_u8(raw[6]).ok_or(RmError::BadEncoding(6))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RmError {
    #[error("module {0} is not in the resource map")]
    UnknownModule(ModuleId),
    #[error("no symbol for module {0}")]
    MissingSymbol(ModuleId),
    #[error("invalid enumeration byte at entry offset {0}")]
    BadEncoding(usize),
}

/// Bookkeeping that is not part of the encoded row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Track {
    /// Worst value from own faults and from descendants, excluding
    /// anything that arrived over a dependency edge.
    base: (Severity, Persistence),
    own_fault: bool,
    maintenance: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResourceMap {
    entries: Vec<RmEntry>,
    tracks: Vec<Track>,
    index: HashMap<ModuleId, usize>,
}

fn cap(value: (Severity, Persistence), limit: Severity) -> (Severity, Persistence) {
    (value.0.min(limit), value.1)
}

impl ResourceMap {
    /// All-AVAILABLE map covering every module of `map`.
    pub fn empty_for(map: &HealthMap) -> Self {
        let entries: Vec<_> = map.modules().iter().map(|m| RmEntry::available(m.id)).collect();
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.module_id, i))
            .collect();
        Self {
            tracks: vec![Track::default(); entries.len()],
            entries,
            index,
        }
    }

    /// Rebuilds a map from encoded rows, e.g. a received summary. Rows
    /// carry no dependency provenance, so each row's value is taken as its
    /// base value.
    pub fn from_entries(entries: Vec<RmEntry>) -> Self {
        let tracks = entries
            .iter()
            .map(|e| Track {
                base: (e.worst_severity, e.worst_persistence),
                own_fault: e.status == ModuleStatus::OwnFault,
                maintenance: e.status == ModuleStatus::Maintenance,
            })
            .collect();
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.module_id, i))
            .collect();
        Self {
            entries,
            tracks,
            index,
        }
    }

    /// Scans every module's faults and propagates them.
    pub fn init(map: &HealthMap) -> Self {
        let order: Vec<usize> = (0..map.modules().len()).collect();
        Self::init_ordered(map, &order)
    }

    /// [`ResourceMap::init`] visiting modules in the given order of
    /// positions. The result does not depend on the order.
    pub fn init_ordered(map: &HealthMap, order: &[usize]) -> Self {
        let mut rm = Self::empty_for(map);
        for &pos in order {
            let module = &map.modules()[pos];
            let (worst_s, worst_p) = module.worst_fault();
            if !module.faults.is_empty() {
                rm.apply(pos, (worst_s, worst_p), true, ModuleStatus::OwnFault);
            }
            rm.propagate_from(map, pos);
        }
        rm
    }

    pub fn entries(&self) -> &[RmEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ModuleId) -> Option<&RmEntry> {
        self.index.get(&id).map(|&i| &self.entries[i])
    }

    fn position(&self, id: ModuleId) -> Result<usize, RmError> {
        self.index
            .get(&id)
            .copied()
            .ok_or(RmError::UnknownModule(id))
    }

    /// Raises module `m` to at least (`severity`, `persistence`), sets its
    /// status subject to precedence, and propagates.
    ///
    /// Precedence: MAINTENANCE is never replaced on this path, and OWN FAULT
    /// is never replaced by PROPAGATED FAULT.
    pub fn update_single_fault(
        &mut self,
        map: &HealthMap,
        m: ModuleId,
        severity: Severity,
        persistence: Persistence,
        status: ModuleStatus,
    ) -> Result<(), RmError> {
        let pos = self.position(m)?;
        let structural = status != ModuleStatus::PropagatedFault;
        self.apply(pos, (severity, persistence), structural, status);
        self.propagate_from(map, pos);
        Ok(())
    }

    /// Pushes module `m`'s current values to its parent chain and across
    /// its dependencies.
    pub fn propagate_fault(&mut self, map: &HealthMap, m: ModuleId) -> Result<(), RmError> {
        let pos = self.position(m)?;
        self.propagate_from(map, pos);
        Ok(())
    }

    fn apply(
        &mut self,
        pos: usize,
        value: (Severity, Persistence),
        structural: bool,
        status: ModuleStatus,
    ) {
        match status {
            ModuleStatus::OwnFault => self.tracks[pos].own_fault = true,
            ModuleStatus::Maintenance => self.tracks[pos].maintenance = true,
            _ => {}
        }
        if value.0 > Severity::Zero {
            let e = &mut self.entries[pos];
            e.worst_severity = e.worst_severity.max(value.0);
            e.worst_persistence = e.worst_persistence.max(value.1);
            if structural {
                let t = &mut self.tracks[pos];
                t.base = (t.base.0.max(value.0), t.base.1.max(value.1));
            }
        }
        self.refresh_status(pos);
    }

    fn refresh_status(&mut self, pos: usize) {
        let t = self.tracks[pos];
        let e = &mut self.entries[pos];
        e.status = if t.maintenance {
            ModuleStatus::Maintenance
        } else if t.own_fault {
            ModuleStatus::OwnFault
        } else if e.worst_severity > Severity::Zero {
            ModuleStatus::PropagatedFault
        } else {
            ModuleStatus::Available
        };
    }

    fn propagate_from(&mut self, map: &HealthMap, start: usize) {
        let mut cur = start;
        // A valid forest has depth below the module count.
        for _ in 0..=self.entries.len() {
            let Some(module) = map.module(self.entries[cur].module_id) else {
                return;
            };
            let base = self.tracks[cur].base;
            for dep in &module.dependencies {
                if dep.severity == Severity::Zero || base.0 == Severity::Zero {
                    continue;
                }
                if let Some(&d) = self.index.get(&dep.dependent) {
                    self.apply(d, cap(base, dep.severity), false, ModuleStatus::PropagatedFault);
                    self.propagate_total_chain(map, d);
                }
            }
            if module.criticality == Severity::Zero {
                return;
            }
            let Some(parent) = module.parent.and_then(|p| self.index.get(&p).copied()) else {
                return;
            };
            let e = self.entries[cur];
            let total = (e.worst_severity, e.worst_persistence);
            self.apply(parent, cap(base, module.criticality), true, ModuleStatus::PropagatedFault);
            self.apply(parent, cap(total, module.criticality), false, ModuleStatus::PropagatedFault);
            cur = parent;
        }
    }

    /// Parent-chain propagation of total values only; used after a value
    /// crosses a dependency edge.
    fn propagate_total_chain(&mut self, map: &HealthMap, start: usize) {
        let mut cur = start;
        for _ in 0..=self.entries.len() {
            let Some(module) = map.module(self.entries[cur].module_id) else {
                return;
            };
            if module.criticality == Severity::Zero {
                return;
            }
            let Some(parent) = module.parent.and_then(|p| self.index.get(&p).copied()) else {
                return;
            };
            let e = self.entries[cur];
            let total = (e.worst_severity, e.worst_persistence);
            self.apply(parent, cap(total, module.criticality), false, ModuleStatus::PropagatedFault);
            cur = parent;
        }
    }

    /// Marks `m` and all its descendants as under maintenance, or clears the
    /// mark and restores the status implied by fault data.
    pub fn set_maintenance(&mut self, map: &HealthMap, m: ModuleId, on: bool) -> Result<(), RmError> {
        let root = self.position(m)?;
        let mut stack = vec![self.entries[root].module_id];
        let mut visited = 0;
        while let Some(id) = stack.pop() {
            visited += 1;
            if visited > self.entries.len() {
                break;
            }
            if let Some(&pos) = self.index.get(&id) {
                self.tracks[pos].maintenance = on;
                self.refresh_status(pos);
            }
            stack.extend(map.children(id).map(|c| c.id));
        }
        Ok(())
    }

    /// Wire encoding: 7 bytes per entry in module order.
    pub fn encode(&self) -> Vec<u8> {
        self.entries.iter().flat_map(|e| e.to_bytes()).collect()
    }

    /// Table with one row per module, sorted by dotted name.
    pub fn render_table(&self, symbols: &SymbolTable) -> Result<String, RmError> {
        let mut rows = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let name = symbols
                .name(e.module_id)
                .ok_or(RmError::MissingSymbol(e.module_id))?;
            rows.push((name.to_string(), e));
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(render_rows(&rows))
    }

    /// Same table keyed by numeric module id, for images without a sidecar.
    pub fn render_table_by_id(&self) -> String {
        let mut rows: Vec<_> = self
            .entries
            .iter()
            .map(|e| (e.module_id, e))
            .collect();
        rows.sort_by_key(|r| r.0);
        let rows: Vec<_> = rows.into_iter().map(|(id, e)| (id.to_string(), e)).collect();
        render_rows(&rows)
    }
}

const HEADINGS: [&str; 4] = ["Module name", "Worst severity", "Worst persistence", "Status"];

fn render_rows(rows: &[(String, &RmEntry)]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|(name, e)| {
            [
                name.clone(),
                e.worst_severity.to_string(),
                e.worst_persistence.to_string(),
                e.status.to_string(),
            ]
        })
        .collect();
    let mut widths = HEADINGS.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cols: [&str; 4]| {
        let mut s = String::new();
        for (i, c) in cols.iter().enumerate() {
            if i > 0 {
                s.push_str(" | ");
            }
            if i + 1 < cols.len() {
                s.push_str(&format!("{c:<w$}", w = widths[i]));
            } else {
                s.push_str(c);
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(HEADINGS);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&rule.join("-+-"));
    out.push('\n');
    for row in &cells {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
    }
    out
}
