//! In-memory Health Map: functional modules, their diagnostic resources,
//! dependencies, faults, and fault detections.
//!
//! Every module owns its entity lists directly. List order is insertion
//! order, which mirrors the linked lists of the serialized image.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

macro_rules! level_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident = $val:expr => $text:expr),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        #[repr(u8)]
        pub enum $name {
            #[default]
            $($variant = $val),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_u8(self) -> u8 {
                self as u8
            }

            pub fn from_u8(raw: u8) -> Option<Self> {
                match raw {
                    $($val => Some($name::$variant),)+
                    _ => None,
                }
            }

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.pad(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ParseLevelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                $(if s.eq_ignore_ascii_case($text) {
                    return Ok($name::$variant);
                })+
                Err(ParseLevelError { kind: stringify!($name), value: s.to_string() })
            }
        }
    };
}

level_enum! {
    /// Fault severity. `Zero` means no fault and stops propagation.
    Severity {
        Zero = 0 => "ZERO",
        Low = 1 => "LOW",
        Medium = 2 => "MEDIUM",
        High = 3 => "HIGH",
    }
}

level_enum! {
    /// How often a fault recurs. `Zero` only appears in Resource Map rows
    /// of fault-free modules.
    Persistence {
        Zero = 0 => "ZERO",
        Transient = 1 => "TRANSIENT",
        Intermittent = 2 => "INTERMITTENT",
        Permanent = 3 => "PERMANENT",
    }
}

level_enum! {
    /// Resource Map status of a module.
    ModuleStatus {
        Available = 0 => "AVAILABLE",
        OwnFault = 1 => "OWN FAULT",
        PropagatedFault = 2 => "PROPAGATED FAULT",
        Maintenance = 3 => "MAINTENANCE",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {kind} value {value:?}")]
pub struct ParseLevelError {
    pub kind: &'static str,
    pub value: String,
}

pub type ModuleId = u32;
pub type DiagId = u32;

/// Set on a detection produced by pruning.
pub const FLAG_MERGED: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiagResource {
    pub id: DiagId,
    /// Instrument class code.
    pub kind: u8,
}

/// Attached to the provider module; points at the module that depends on it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dependency {
    pub dependent: ModuleId,
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultDetection {
    pub detector: DiagId,
    /// Microseconds since system epoch.
    pub timestamp: u64,
    pub counter: u32,
    pub payload: u32,
    pub flags: u8,
}

impl FaultDetection {
    pub fn new(detector: DiagId, timestamp: u64, payload: u32) -> Self {
        Self {
            detector,
            timestamp,
            counter: 1,
            payload,
            flags: 0,
        }
    }

    pub fn is_merged(&self) -> bool {
        self.flags & FLAG_MERGED != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub severity: Severity,
    pub persistence: Persistence,
    pub classification: u8,
    pub detections: Vec<FaultDetection>,
}

impl Fault {
    /// Sum of detection counters.
    pub fn event_count(&self) -> u64 {
        self.detections.iter().map(|d| u64::from(d.counter)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Module {
    pub id: ModuleId,
    pub parent: Option<ModuleId>,
    /// Cap applied to severities propagated to the parent.
    pub criticality: Severity,
    pub diag_resources: Vec<DiagResource>,
    pub dependencies: Vec<Dependency>,
    pub faults: Vec<Fault>,
}

impl Module {
    pub fn new(id: ModuleId, parent: Option<ModuleId>, criticality: Severity) -> Self {
        Self {
            id,
            parent,
            criticality,
            diag_resources: Vec::new(),
            dependencies: Vec::new(),
            faults: Vec::new(),
        }
    }

    /// Worst (severity, persistence) over this module's own faults.
    pub fn worst_fault(&self) -> (Severity, Persistence) {
        self.faults.iter().fold((Severity::Zero, Persistence::Zero), |(s, p), f| {
            (s.max(f.severity), p.max(f.persistence))
        })
    }
}

/// Identifies a fault by owner module and position in its fault list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FaultRef {
    pub module: ModuleId,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapError {
    #[error("duplicate module id {0}")]
    DuplicateId(ModuleId),
    #[error("duplicate diagnostic resource id {0}")]
    DuplicateDiagId(DiagId),
    #[error("unknown parent module {0}")]
    UnknownParent(ModuleId),
    #[error("unknown module {0}")]
    UnknownModule(ModuleId),
    #[error("unknown detector {0}")]
    UnknownDetector(DiagId),
    #[error("fault severity must be above ZERO")]
    ZeroSeverity,
    #[error("fault persistence must be at least TRANSIENT")]
    ZeroPersistence,
    #[error("module {0} cannot depend on itself")]
    SelfDependency(ModuleId),
    #[error("unknown fault {module}#{index}", module = .0.module, index = .0.index)]
    UnknownFault(FaultRef),
}

/// A structural rule broken by a Health Map.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Violation {
    DuplicateModuleId(ModuleId),
    DuplicateDiagId(DiagId),
    UnknownParent { module: ModuleId, parent: ModuleId },
    ParentCycle(ModuleId),
    SelfDependency(ModuleId),
    UnknownDependent { provider: ModuleId, dependent: ModuleId },
    ZeroSeverityFault(FaultRef),
    ZeroPersistenceFault(FaultRef),
    UnknownDetector { fault: FaultRef, detector: DiagId },
    BadCounter { fault: FaultRef, detection: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateModuleId(id) => write!(f, "duplicate module id {id}"),
            Violation::DuplicateDiagId(id) => write!(f, "duplicate diagnostic resource id {id}"),
            Violation::UnknownParent { module, parent } => {
                write!(f, "module {module} has unknown parent {parent}")
            }
            Violation::ParentCycle(id) => write!(f, "module {id} is part of a parent cycle"),
            Violation::SelfDependency(id) => write!(f, "module {id} depends on itself"),
            Violation::UnknownDependent { provider, dependent } => {
                write!(f, "dependency of module {provider} names unknown module {dependent}")
            }
            Violation::ZeroSeverityFault(r) => {
                write!(f, "fault {}#{} has ZERO severity", r.module, r.index)
            }
            Violation::ZeroPersistenceFault(r) => {
                write!(f, "fault {}#{} has ZERO persistence", r.module, r.index)
            }
            Violation::UnknownDetector { fault, detector } => write!(
                f,
                "fault {}#{} has a detection by unknown detector {detector}",
                fault.module, fault.index
            ),
            Violation::BadCounter { fault, detection } => write!(
                f,
                "detection {detection} of fault {}#{} has counter 0",
                fault.module, fault.index
            ),
        }
    }
}

/// The Health Map. Modules are kept in insertion order.
#[derive(Debug, Clone, Default)]
pub struct HealthMap {
    modules: Vec<Module>,
    module_index: HashMap<ModuleId, usize>,
    // diag id -> (module position, resource position)
    diag_index: HashMap<DiagId, (usize, usize)>,
}

impl PartialEq for HealthMap {
    fn eq(&self, other: &Self) -> bool {
        self.modules == other.modules
    }
}

impl Eq for HealthMap {}

impl HealthMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a map from raw modules without enforcing any invariant.
    /// Use [`HealthMap::validate`] to find what is wrong with it. On
    /// duplicate ids the first occurrence wins the lookup index.
    pub fn from_modules_unchecked(modules: Vec<Module>) -> Self {
        let mut map = Self {
            modules,
            ..Self::default()
        };
        map.reindex();
        map
    }

    fn reindex(&mut self) {
        self.module_index.clear();
        self.diag_index.clear();
        for (mi, m) in self.modules.iter().enumerate() {
            self.module_index.entry(m.id).or_insert(mi);
            for (ri, r) in m.diag_resources.iter().enumerate() {
                self.diag_index.entry(r.id).or_insert((mi, ri));
            }
        }
    }

    pub fn modules(&self) -> &[Module] {
        &self.modules
    }

    pub fn into_modules(self) -> Vec<Module> {
        self.modules
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn module(&self, id: ModuleId) -> Option<&Module> {
        self.module_index.get(&id).map(|&i| &self.modules[i])
    }

    pub fn module_position(&self, id: ModuleId) -> Option<usize> {
        self.module_index.get(&id).copied()
    }

    pub fn contains_module(&self, id: ModuleId) -> bool {
        self.module_index.contains_key(&id)
    }

    /// Mutable access to a module's fault list. Ids, parents and diagnostic
    /// resources stay immutable so the lookup indices remain valid.
    pub fn faults_mut(&mut self, id: ModuleId) -> Option<&mut Vec<Fault>> {
        let i = *self.module_index.get(&id)?;
        Some(&mut self.modules[i].faults)
    }

    pub fn diag_resource(&self, id: DiagId) -> Option<&DiagResource> {
        self.diag_index
            .get(&id)
            .map(|&(mi, ri)| &self.modules[mi].diag_resources[ri])
    }

    /// Module that owns the given diagnostic resource.
    pub fn diag_owner(&self, id: DiagId) -> Option<ModuleId> {
        self.diag_index.get(&id).map(|&(mi, _)| self.modules[mi].id)
    }

    pub fn fault(&self, r: FaultRef) -> Option<&Fault> {
        self.module(r.module)?.faults.get(r.index)
    }

    pub fn children(&self, id: ModuleId) -> impl Iterator<Item = &Module> + '_ {
        self.modules.iter().filter(move |m| m.parent == Some(id))
    }

    pub fn counts(&self) -> EntityCounts {
        let mut c = EntityCounts {
            modules: self.modules.len(),
            ..EntityCounts::default()
        };
        for m in &self.modules {
            c.diag_resources += m.diag_resources.len();
            c.dependencies += m.dependencies.len();
            c.faults += m.faults.len();
            c.detections += m.faults.iter().map(|f| f.detections.len()).sum::<usize>();
        }
        c
    }

    /// Total of all detection counters in the map.
    pub fn total_events(&self) -> u64 {
        self.modules
            .iter()
            .flat_map(|m| &m.faults)
            .map(Fault::event_count)
            .sum()
    }

    pub fn add_module(
        &mut self,
        id: ModuleId,
        parent: Option<ModuleId>,
        criticality: Severity,
    ) -> Result<&Module, MapError> {
        if self.module_index.contains_key(&id) {
            return Err(MapError::DuplicateId(id));
        }
        if let Some(p) = parent {
            if !self.module_index.contains_key(&p) {
                return Err(MapError::UnknownParent(p));
            }
        }
        let pos = self.modules.len();
        self.modules.push(Module::new(id, parent, criticality));
        self.module_index.insert(id, pos);
        Ok(&self.modules[pos])
    }

    pub fn add_diag_resource(
        &mut self,
        owner: ModuleId,
        id: DiagId,
        kind: u8,
    ) -> Result<(), MapError> {
        if self.diag_index.contains_key(&id) {
            return Err(MapError::DuplicateDiagId(id));
        }
        let mi = *self
            .module_index
            .get(&owner)
            .ok_or(MapError::UnknownModule(owner))?;
        let list = &mut self.modules[mi].diag_resources;
        self.diag_index.insert(id, (mi, list.len()));
        list.push(DiagResource { id, kind });
        Ok(())
    }

    pub fn add_dependency(
        &mut self,
        provider: ModuleId,
        dependent: ModuleId,
        severity: Severity,
    ) -> Result<(), MapError> {
        if provider == dependent {
            return Err(MapError::SelfDependency(provider));
        }
        if !self.module_index.contains_key(&dependent) {
            return Err(MapError::UnknownModule(dependent));
        }
        let mi = *self
            .module_index
            .get(&provider)
            .ok_or(MapError::UnknownModule(provider))?;
        self.modules[mi]
            .dependencies
            .push(Dependency { dependent, severity });
        Ok(())
    }

    /// Records a new fault carrying a single detection with counter 1.
    #[allow(clippy::too_many_arguments)]
    pub fn add_fault_with_detection(
        &mut self,
        module: ModuleId,
        severity: Severity,
        persistence: Persistence,
        classification: u8,
        detector: DiagId,
        timestamp: u64,
        payload: u32,
    ) -> Result<FaultRef, MapError> {
        let mi = *self
            .module_index
            .get(&module)
            .ok_or(MapError::UnknownModule(module))?;
        if !self.diag_index.contains_key(&detector) {
            return Err(MapError::UnknownDetector(detector));
        }
        if severity == Severity::Zero {
            return Err(MapError::ZeroSeverity);
        }
        if persistence == Persistence::Zero {
            return Err(MapError::ZeroPersistence);
        }
        let faults = &mut self.modules[mi].faults;
        faults.push(Fault {
            severity,
            persistence,
            classification,
            detections: vec![FaultDetection::new(detector, timestamp, payload)],
        });
        Ok(FaultRef {
            module,
            index: faults.len() - 1,
        })
    }

    /// Walks the parent chain from `id` (exclusive) to the root.
    pub fn ancestors(&self, id: ModuleId) -> Ancestors<'_> {
        Ancestors {
            map: self,
            next: self.module(id).and_then(|m| m.parent),
            steps: 0,
        }
    }

    /// Every structural violation in the map; empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen_modules = HashMap::new();
        let mut seen_diag = HashMap::new();
        for m in &self.modules {
            if seen_modules.insert(m.id, ()).is_some() {
                out.push(Violation::DuplicateModuleId(m.id));
            }
            for r in &m.diag_resources {
                if seen_diag.insert(r.id, ()).is_some() {
                    out.push(Violation::DuplicateDiagId(r.id));
                }
            }
        }

        for m in &self.modules {
            if let Some(p) = m.parent {
                if !seen_modules.contains_key(&p) {
                    out.push(Violation::UnknownParent {
                        module: m.id,
                        parent: p,
                    });
                }
            }
            if self.in_parent_cycle(m.id) {
                out.push(Violation::ParentCycle(m.id));
            }
            for d in &m.dependencies {
                if d.dependent == m.id {
                    out.push(Violation::SelfDependency(m.id));
                } else if !seen_modules.contains_key(&d.dependent) {
                    out.push(Violation::UnknownDependent {
                        provider: m.id,
                        dependent: d.dependent,
                    });
                }
            }
            for (index, f) in m.faults.iter().enumerate() {
                let fault = FaultRef {
                    module: m.id,
                    index,
                };
                if f.severity == Severity::Zero {
                    out.push(Violation::ZeroSeverityFault(fault));
                }
                if f.persistence == Persistence::Zero {
                    out.push(Violation::ZeroPersistenceFault(fault));
                }
                for (di, d) in f.detections.iter().enumerate() {
                    if !seen_diag.contains_key(&d.detector) {
                        out.push(Violation::UnknownDetector {
                            fault,
                            detector: d.detector,
                        });
                    }
                    if d.counter == 0 {
                        out.push(Violation::BadCounter {
                            fault,
                            detection: di,
                        });
                    }
                }
            }
        }
        out
    }

    fn in_parent_cycle(&self, start: ModuleId) -> bool {
        let mut cur = self.module(start).and_then(|m| m.parent);
        // A chain longer than the module count must revisit a module.
        for _ in 0..=self.modules.len() {
            match cur {
                None => return false,
                Some(id) if id == start => return true,
                Some(id) => cur = self.module(id).and_then(|m| m.parent),
            }
        }
        false
    }
}

/// Iterator over a module's ancestors. Stops on cycles after visiting at
/// most as many modules as the map holds.
pub struct Ancestors<'a> {
    map: &'a HealthMap,
    next: Option<ModuleId>,
    steps: usize,
}

impl<'a> Iterator for Ancestors<'a> {
    type Item = &'a Module;

    fn next(&mut self) -> Option<Self::Item> {
        if self.steps >= self.map.modules.len() {
            return None;
        }
        let m = self.map.module(self.next?)?;
        self.steps += 1;
        self.next = m.parent;
        Some(m)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EntityCounts {
    pub modules: usize,
    pub diag_resources: usize,
    pub dependencies: usize,
    pub faults: usize,
    pub detections: usize,
}
