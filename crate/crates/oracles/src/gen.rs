//! Seeded random Health Maps.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use healthmap::{Fault, FaultDetection, HealthMap, ModuleId, Persistence, Severity, FLAG_MERGED};

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub max_modules: usize,
    pub max_faults_per_module: usize,
    pub max_detections_per_fault: usize,
    pub dependency_chance: f64,
}

impl Default for Shape {
    fn default() -> Self {
        Self {
            max_modules: 50,
            max_faults_per_module: 3,
            max_detections_per_fault: 4,
            dependency_chance: 0.3,
        }
    }
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn severity(rng: &mut impl Rng) -> Severity {
    Severity::ALL[rng.gen_range(0..4)]
}

pub fn nonzero_severity(rng: &mut impl Rng) -> Severity {
    Severity::ALL[rng.gen_range(1..4)]
}

pub fn nonzero_persistence(rng: &mut impl Rng) -> Persistence {
    Persistence::ALL[rng.gen_range(1..4)]
}

/// Valid structure (forest, instruments, dependencies), no faults.
pub fn skeleton(rng: &mut impl Rng, shape: &Shape) -> HealthMap {
    let n = rng.gen_range(1..=shape.max_modules.max(1));
    let mut ids: Vec<ModuleId> = Vec::with_capacity(n);
    while ids.len() < n {
        let id = if rng.gen_bool(0.5) {
            rng.gen_range(1..200)
        } else {
            rng.gen()
        };
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let mut map = HealthMap::new();
    let mut next_diag: u32 = rng.gen_range(0..1000);
    for (i, &id) in ids.iter().enumerate() {
        let parent = if i == 0 || rng.gen_bool(0.15) {
            None
        } else {
            Some(ids[rng.gen_range(0..i)])
        };
        map.add_module(id, parent, severity(rng)).expect("fresh id");
        for _ in 0..rng.gen_range(1..=3) {
            next_diag = next_diag.wrapping_add(rng.gen_range(1..50));
            map.add_diag_resource(id, next_diag, rng.gen()).expect("fresh diag id");
        }
    }
    if n > 1 {
        for &p in &ids {
            while rng.gen_bool(shape.dependency_chance) {
                let d = *ids.choose(rng).expect("non-empty");
                if d != p {
                    map.add_dependency(p, d, severity(rng)).expect("valid edge");
                }
            }
        }
    }
    map
}

/// Random faults with random detections attached to `map`.
pub fn add_faults(rng: &mut impl Rng, map: &mut HealthMap, shape: &Shape) {
    let detectors: Vec<u32> = map
        .modules()
        .iter()
        .flat_map(|m| m.diag_resources.iter().map(|d| d.id))
        .collect();
    let ids: Vec<ModuleId> = map.modules().iter().map(|m| m.id).collect();
    for id in ids {
        let count = rng.gen_range(0..=shape.max_faults_per_module);
        for _ in 0..count {
            let detections = (0..rng.gen_range(1..=shape.max_detections_per_fault.max(1)))
                .map(|_| FaultDetection {
                    detector: *detectors.choose(rng).expect("instruments exist"),
                    timestamp: rng.gen_range(0..10_000_000),
                    counter: rng.gen_range(1..6),
                    payload: rng.gen(),
                    flags: if rng.gen_bool(0.2) { FLAG_MERGED } else { 0 },
                })
                .collect();
            let fault = Fault {
                severity: nonzero_severity(rng),
                persistence: nonzero_persistence(rng),
                classification: rng.gen_range(0..4),
                detections,
            };
            map.faults_mut(id).expect("module").push(fault);
        }
    }
}

pub fn random_map(rng: &mut impl Rng, shape: &Shape) -> HealthMap {
    let mut map = skeleton(rng, shape);
    add_faults(rng, &mut map, shape);
    map
}
