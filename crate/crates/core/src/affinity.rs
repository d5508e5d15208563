//! Per-task core affinity masks derived from the Resource Map.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use crate::model::{ModuleId, ModuleStatus, Persistence, Severity};
use crate::resource_map::{ResourceMap, RmEntry};
use crate::symbols::SymbolTable;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRequirement {
    pub name: String,
    /// Name suffixes relative to a core, e.g. `FPU` for `CPU.C0.FPU`.
    pub needs: Vec<String>,
    pub max_severity: Severity,
    pub max_persistence: Persistence,
}

impl TaskRequirement {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            needs: Vec::new(),
            max_severity: Severity::Zero,
            max_persistence: Persistence::Zero,
        }
    }

    fn tolerates(&self, e: &RmEntry) -> bool {
        e.status != ModuleStatus::Maintenance
            && e.worst_severity <= self.max_severity
            && e.worst_persistence <= self.max_persistence
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffinityMask {
    pub task: String,
    /// Indexed by OS core id.
    pub usable: Vec<bool>,
}

impl AffinityMask {
    pub fn is_subset_of(&self, other: &AffinityMask) -> bool {
        self.usable.len() == other.usable.len()
            && self.usable.iter().zip(&other.usable).all(|(a, b)| !a || *b)
    }

    /// Hex digits, most significant first, padded to the mask width.
    pub fn to_hex(&self) -> String {
        let digits = self.usable.len().div_ceil(4).max(1);
        let mut out = String::with_capacity(digits + 2);
        out.push_str("0x");
        for d in (0..digits).rev() {
            let nibble = (0..4).fold(0u32, |acc, b| {
                let set = self.usable.get(d * 4 + b).copied().unwrap_or(false);
                acc | (u32::from(set) << b)
            });
            out.push(char::from_digit(nibble, 16).expect("nibble"));
        }
        out
    }
}

impl fmt::Display for AffinityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.task, self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AffinityError {
    #[error("no module in the symbol table has a core id")]
    NoCoreIds,
    #[error("task {task}: no core has a sub-module named {suffix}")]
    UnknownSubmodule { task: String, suffix: String },
    #[error("module {0} has no Resource Map entry")]
    MissingEntry(ModuleId),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("task {0} is defined twice")]
    DuplicateTask(String),
}

pub fn compute_affinity(
    rm: &ResourceMap,
    symbols: &SymbolTable,
    tasks: &[TaskRequirement],
) -> Result<Vec<AffinityMask>, AffinityError> {
    let cores: Vec<_> = symbols.cores().collect();
    let width = cores
        .iter()
        .map(|&(_, c)| c as usize + 1)
        .max()
        .ok_or(AffinityError::NoCoreIds)?;
    let entry = |id: ModuleId| rm.get(id).ok_or(AffinityError::MissingEntry(id));

    let mut masks = Vec::with_capacity(tasks.len());
    for task in tasks {
        for suffix in &task.needs {
            let found = cores.iter().any(|(core, _)| {
                symbols
                    .module_named(&format!("{}.{suffix}", core.name))
                    .is_some()
            });
            if !found {
                return Err(AffinityError::UnknownSubmodule {
                    task: task.name.clone(),
                    suffix: suffix.clone(),
                });
            }
        }
        let mut usable = vec![false; width];
        'cores: for &(core, core_id) in &cores {
            if !task.tolerates(entry(core.module)?) {
                continue;
            }
            for suffix in &task.needs {
                match symbols.module_named(&format!("{}.{suffix}", core.name)) {
                    Some(sub) if task.tolerates(entry(sub)?) => {}
                    _ => continue 'cores,
                }
            }
            usable[core_id as usize] = true;
        }
        masks.push(AffinityMask {
            task: task.name.clone(),
            usable,
        });
    }
    Ok(masks)
}

/// Parses `task <name> [needs=A,B] [maxSev=<SEV>] [maxPers=<PERS>]` lines.
pub fn parse_tasks(text: &str) -> Result<Vec<TaskRequirement>, AffinityError> {
    let mut tasks = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let syntax = |message: String| AffinityError::Syntax { line, message };
        let mut parts = content.split_whitespace();
        if parts.next() != Some("task") {
            return Err(syntax("expected 'task'".into()));
        }
        let name = parts
            .next()
            .ok_or_else(|| syntax("expected a task name".into()))?;
        let mut task = TaskRequirement::new(name);
        for tok in parts {
            let (key, value) = tok
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected key=value, got {tok:?}")))?;
            match key {
                "needs" => {
                    task.needs = value
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(str::to_string)
                        .collect()
                }
                "maxSev" => task.max_severity = value.parse().map_err(|e| syntax(format!("{e}")))?,
                "maxPers" => {
                    task.max_persistence = value.parse().map_err(|e| syntax(format!("{e}")))?
                }
                other => return Err(syntax(format!("unknown field {other:?}"))),
            }
        }
        if !seen.insert(task.name.clone()) {
            return Err(AffinityError::DuplicateTask(task.name));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HealthMap;
    use crate::symbols::Symbol;

    fn quad() -> (HealthMap, SymbolTable) {
        let mut map = HealthMap::new();
        let mut sym = SymbolTable::new();
        let mut add = |id, parent, name: &str, core| {
            map.add_module(id, parent, Severity::Low).unwrap();
            sym.insert(Symbol {
                module: id,
                name: name.into(),
                core_id: core,
            })
            .unwrap();
        };
        add(1, None, "CPU", None);
        for k in 0..4u32 {
            let c = 10 + 10 * k;
            add(c, Some(1), &format!("CPU.C{k}"), Some(k));
            add(c + 1, Some(c), &format!("CPU.C{k}.FPU"), None);
        }
        for m in map.modules().iter().map(|m| m.id).collect::<Vec<_>>() {
            map.add_diag_resource(m, 1000 + m, 0).unwrap();
        }
        (map, sym)
    }

    #[test]
    fn fault_free_map_is_all_ones() {
        let (map, sym) = quad();
        let rm = ResourceMap::init(&map);
        let masks = compute_affinity(&rm, &sym, &[TaskRequirement::new("t")]).unwrap();
        assert_eq!(masks[0].usable, vec![true; 4]);
        assert_eq!(masks[0].to_string(), "t 0xf");
    }

    #[test]
    fn fpu_fault_and_maintenance_excluded() {
        let (mut map, sym) = quad();
        map.add_fault_with_detection(11, Severity::High, Persistence::Transient, 1, 1011, 0, 0)
            .unwrap();
        let mut rm = ResourceMap::init(&map);
        rm.set_maintenance(&map, 40, true).unwrap();
        let mut fpu = TaskRequirement::new("fpu_task");
        fpu.needs.push("FPU".into());
        let masks = compute_affinity(&rm, &sym, &[fpu]).unwrap();
        assert_eq!(masks[0].to_hex(), "0x6");
    }

    #[test]
    fn vacuous_thresholds_keep_non_maintenance_cores() {
        let (mut map, sym) = quad();
        map.add_fault_with_detection(20, Severity::High, Persistence::Permanent, 1, 1020, 0, 0)
            .unwrap();
        let mut rm = ResourceMap::init(&map);
        rm.set_maintenance(&map, 10, true).unwrap();
        let mut t = TaskRequirement::new("any");
        t.max_severity = Severity::High;
        t.max_persistence = Persistence::Permanent;
        let masks = compute_affinity(&rm, &sym, &[t]).unwrap();
        assert_eq!(masks[0].usable, vec![false, true, true, true]);
    }

    #[test]
    fn errors() {
        let (map, sym) = quad();
        let rm = ResourceMap::init(&map);
        let mut t = TaskRequirement::new("t");
        t.needs.push("GPU".into());
        assert!(matches!(
            compute_affinity(&rm, &sym, &[t]),
            Err(AffinityError::UnknownSubmodule { .. })
        ));
        assert_eq!(
            compute_affinity(&rm, &SymbolTable::new(), &[]),
            Err(AffinityError::NoCoreIds)
        );
    }

    #[test]
    fn task_file() {
        let tasks =
            parse_tasks("# tasks\ntask a\ntask b needs=FPU,L1 maxSev=low maxPers=TRANSIENT\n")
                .unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[1].needs, ["FPU", "L1"]);
        assert_eq!(tasks[1].max_severity, Severity::Low);
        assert_eq!(tasks[1].max_persistence, Persistence::Transient);
        assert_eq!(
            parse_tasks("task a\ntask a\n"),
            Err(AffinityError::DuplicateTask("a".into()))
        );
        assert!(matches!(
            parse_tasks("task a speed=3"),
            Err(AffinityError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn wide_mask_hex() {
        let mut usable = vec![false; 9];
        usable[0] = true;
        usable[8] = true;
        let m = AffinityMask {
            task: "x".into(),
            usable,
        };
        assert_eq!(m.to_hex(), "0x101");
    }
}
