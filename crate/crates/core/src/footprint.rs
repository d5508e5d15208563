//! Memory footprint model for an MPSoC with `C` cores, plus a generator
//! for a map that has exactly the modelled entity counts.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{HealthMap, MapError, ModuleId, Persistence, Severity};
use crate::resource_map::RmEntry;
use crate::shm;
use crate::symbols::{Symbol, SymbolTable};

pub const SYSTEM_MODULES: u64 = 10;
pub const SUBMODULES_PER_CORE: u64 = 15;
pub const INSTRUMENTS_PER_MODULE: u64 = 3;
pub const FAULTS_PER_DEPENDENCY: u64 = 2;
pub const DETECTIONS_PER_FAULT: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FootprintEstimate {
    pub cores: u32,
    pub modules: u64,
    pub diag_resources: u64,
    pub dependencies: u64,
    pub faults: u64,
    pub detections: u64,
    pub total_shm_bytes: u64,
    pub rm_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FootprintError {
    #[error("core count must be at least 1")]
    InvalidCoreCount,
    #[error("synthesized map too large for the image format")]
    TooLarge,
    #[error(transparent)]
    Map(#[from] MapError),
}

pub fn estimate(cores: u32) -> Result<FootprintEstimate, FootprintError> {
    if cores == 0 {
        return Err(FootprintError::InvalidCoreCount);
    }
    let c = u64::from(cores);
    let modules = (1 + SUBMODULES_PER_CORE) * c + SYSTEM_MODULES;
    let diag_resources = INSTRUMENTS_PER_MODULE * modules;
    let dependencies = modules;
    let faults = FAULTS_PER_DEPENDENCY * dependencies;
    let detections = DETECTIONS_PER_FAULT * faults;
    let total_shm_bytes = shm::HEADER_LEN as u64
        + shm::MODULE_LEN as u64 * modules
        + shm::DIAG_LEN as u64 * diag_resources
        + shm::DEPENDENCY_LEN as u64 * dependencies
        + shm::FAULT_LEN as u64 * faults
        + shm::DETECTION_LEN as u64 * detections;
    Ok(FootprintEstimate {
        cores,
        modules,
        diag_resources,
        dependencies,
        faults,
        detections,
        total_shm_bytes,
        rm_bytes: RmEntry::ENCODED_LEN as u64 * modules,
    })
}

impl FootprintEstimate {
    /// `(entity type, amount, record size)` rows, header first.
    pub fn rows(&self) -> [(&'static str, u64, u64); 6] {
        [
            ("Header (SHM)", 1, shm::HEADER_LEN as u64),
            ("Module", self.modules, shm::MODULE_LEN as u64),
            ("Diag. resource", self.diag_resources, shm::DIAG_LEN as u64),
            ("Dependency", self.dependencies, shm::DEPENDENCY_LEN as u64),
            ("Fault", self.faults, shm::FAULT_LEN as u64),
            ("Fault detections", self.detections, shm::DETECTION_LEN as u64),
        ]
    }

    pub fn render(&self) -> String {
        let head = ["Entity type", "Amount", "Size (bytes)", "Total (bytes)"];
        let body: Vec<[String; 4]> = self
            .rows()
            .iter()
            .map(|&(name, n, size)| {
                [name.to_string(), n.to_string(), size.to_string(), (n * size).to_string()]
            })
            .collect();
        let mut w = head.map(str::len);
        for row in &body {
            for (i, cell) in row.iter().enumerate() {
                w[i] = w[i].max(cell.len());
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "Cores C = {}", self.cores);
        let _ = writeln!(
            out,
            "{:<a$} | {:>b$} | {:>c$} | {:>d$}",
            head[0], head[1], head[2], head[3],
            a = w[0], b = w[1], c = w[2], d = w[3]
        );
        let rule: Vec<String> = w.iter().map(|&n| "-".repeat(n)).collect();
        let _ = writeln!(out, "{}", rule.join("-+-"));
        for r in &body {
            let _ = writeln!(
                out,
                "{:<a$} | {:>b$} | {:>c$} | {:>d$}",
                r[0], r[1], r[2], r[3],
                a = w[0], b = w[1], c = w[2], d = w[3]
            );
        }
        let _ = writeln!(out, "Total {} bytes", self.total_shm_bytes);
        let _ = writeln!(
            out,
            "RM {} modules * {} bytes = {} bytes",
            self.modules,
            RmEntry::ENCODED_LEN,
            self.rm_bytes
        );
        out
    }
}

/// Builds a map with exactly the estimated counts.
///
/// Topology: a `SYS` root with nine further system modules, one of which
/// is `CPU`; each core `CPU.C<k>` has fifteen `S<j>` sub-modules. Module
/// `i` (in pre-order) provides a LOW dependency to module `i+1`, wrapping
/// around. Every module carries two LOW/TRANSIENT faults of classes 0 and
/// 1 with ten detections each from its first instrument.
pub fn synthesize(cores: u32) -> Result<(HealthMap, SymbolTable), FootprintError> {
    let est = estimate(cores)?;
    if est.detections > u64::from(u32::MAX) || est.modules > 0xFFFF {
        return Err(FootprintError::TooLarge);
    }
    let mut map = HealthMap::new();
    let mut symbols = SymbolTable::new();
    let mut next_id: ModuleId = 1;
    let mut add = |map: &mut HealthMap,
                   parent: Option<ModuleId>,
                   name: String,
                   core_id: Option<u32>|
     -> Result<ModuleId, FootprintError> {
        let id = next_id;
        next_id += 1;
        map.add_module(id, parent, Severity::Low)?;
        for j in 0..INSTRUMENTS_PER_MODULE as u32 {
            map.add_diag_resource(id, id * 4 + j, j as u8)?;
        }
        symbols
            .insert(Symbol {
                module: id,
                name,
                core_id,
            })
            .expect("generated names are unique");
        Ok(id)
    };

    let root = add(&mut map, None, "SYS".into(), None)?;
    let cpu = add(&mut map, Some(root), "CPU".into(), None)?;
    for k in 0..cores {
        let core = add(&mut map, Some(cpu), format!("CPU.C{k}"), Some(k))?;
        for j in 0..SUBMODULES_PER_CORE {
            add(&mut map, Some(core), format!("CPU.C{k}.S{j}"), None)?;
        }
    }
    for s in 2..SYSTEM_MODULES {
        add(&mut map, Some(root), format!("SYS{s}"), None)?;
    }

    let ids: Vec<ModuleId> = map.modules().iter().map(|m| m.id).collect();
    for (i, &id) in ids.iter().enumerate() {
        map.add_dependency(id, ids[(i + 1) % ids.len()], Severity::Low)?;
    }
    let mut t = 0u64;
    for &id in &ids {
        let faults = map.faults_mut(id).expect("module exists");
        for class in 0..FAULTS_PER_DEPENDENCY as u8 {
            let detections = (0..DETECTIONS_PER_FAULT)
                .map(|_| {
                    t += 1_000;
                    crate::model::FaultDetection::new(id * 4, t, 0)
                })
                .collect();
            faults.push(crate::model::Fault {
                severity: Severity::Low,
                persistence: Persistence::Transient,
                classification: class,
                detections,
            });
        }
    }
    Ok((map, symbols))
}

pub fn synthesize_map(cores: u32) -> Result<HealthMap, FootprintError> {
    synthesize(cores).map(|(map, _)| map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resource_map::ResourceMap;

    #[test]
    fn eight_cores_matches_published_totals() {
        let e = estimate(8).unwrap();
        assert_eq!(
            (e.modules, e.diag_resources, e.dependencies, e.faults, e.detections),
            (138, 414, 138, 276, 2760)
        );
        assert_eq!(e.total_shm_bytes, 82418);
        assert_eq!(e.rm_bytes, 966);
        let rows: Vec<u64> = e.rows().iter().map(|r| r.1 * r.2).collect();
        assert_eq!(rows, [32, 3450, 5382, 1242, 3312, 69000]);
    }

    #[test]
    fn one_core() {
        assert_eq!(estimate(1).unwrap().total_shm_bytes, 15554);
        assert_eq!(estimate(0), Err(FootprintError::InvalidCoreCount));
    }

    #[test]
    fn synthesized_map_has_estimated_size() {
        let map = synthesize_map(8).unwrap();
        assert!(map.validate().is_empty());
        assert_eq!(shm::serialize(&map).unwrap().len(), 82418);
        assert_eq!(ResourceMap::init(&map).encode().len(), 966);
    }

    #[test]
    fn render_mentions_total() {
        let text = estimate(8).unwrap().render();
        assert!(text.contains("Total 82418"));
        assert!(text.contains("Fault detections |   2760 |           25 |         69000"));
    }
}
