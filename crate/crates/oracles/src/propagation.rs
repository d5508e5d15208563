//! Path enumeration reference for Resource Map values.
//!
//! A fault's severity reaches module `y` along a path that climbs parent
//! links (each hop from `x` needs `crit(x) > ZERO` and caps at `crit(x)`),
//! optionally crosses one dependency edge (capped at the edge severity),
//! then climbs parent links again. The module's worst severity is the best
//! path value; worst persistence is the highest persistence of any fault
//! that reaches it with a non-ZERO value.

use std::collections::{BTreeMap, BTreeSet};

use healthmap::{HealthMap, ModuleId, ModuleStatus, Persistence, Severity};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expected {
    pub module: ModuleId,
    pub severity: Severity,
    pub persistence: Persistence,
    pub status: ModuleStatus,
}

/// Every (module, severity) reachable from `start` with value `v` by
/// climbing parents only.
fn climb(map: &HealthMap, start: ModuleId, v: Severity) -> Vec<(ModuleId, Severity)> {
    let mut out = vec![(start, v)];
    let mut cur = start;
    let mut val = v;
    let mut seen = BTreeSet::from([start]);
    loop {
        let m = map.module(cur).expect("module");
        let Some(parent) = m.parent else { break };
        if m.criticality == Severity::Zero {
            break;
        }
        val = val.min(m.criticality);
        if val == Severity::Zero || !seen.insert(parent) {
            break;
        }
        out.push((parent, val));
        cur = parent;
    }
    out
}

pub fn expected_rm(map: &HealthMap, maintenance: &[ModuleId]) -> Vec<Expected> {
    let mut best: BTreeMap<ModuleId, (Severity, Persistence)> = BTreeMap::new();
    let mut raise = |id: ModuleId, s: Severity, p: Persistence| {
        if s == Severity::Zero {
            return;
        }
        let e = best.entry(id).or_insert((Severity::Zero, Persistence::Zero));
        e.0 = e.0.max(s);
        e.1 = e.1.max(p);
    };
    for m in map.modules() {
        for f in &m.faults {
            for (x, v) in climb(map, m.id, f.severity) {
                raise(x, v, f.persistence);
                for dep in &map.module(x).expect("module").dependencies {
                    let w = v.min(dep.severity);
                    if w == Severity::Zero || map.module(dep.dependent).is_none() {
                        continue;
                    }
                    for (y, u) in climb(map, dep.dependent, w) {
                        raise(y, u, f.persistence);
                    }
                }
            }
        }
    }

    let mut under = BTreeSet::new();
    for &root in maintenance {
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if under.insert(id) {
                stack.extend(
                    map.modules()
                        .iter()
                        .filter(|c| c.parent == Some(id))
                        .map(|c| c.id),
                );
            }
        }
    }

    map.modules()
        .iter()
        .map(|m| {
            let (severity, persistence) = best
                .get(&m.id)
                .copied()
                .unwrap_or((Severity::Zero, Persistence::Zero));
            let status = if under.contains(&m.id) {
                ModuleStatus::Maintenance
            } else if !m.faults.is_empty() {
                ModuleStatus::OwnFault
            } else if severity > Severity::Zero {
                ModuleStatus::PropagatedFault
            } else {
                ModuleStatus::Available
            };
            Expected {
                module: m.id,
                severity,
                persistence,
                status,
            }
        })
        .collect()
}
