//! Run-time ingestion of detection reports and Health Map pruning.
//!
//! A report is attributed to the module owning the reporting instrument.
//! Faults are identified by (owner module, classification). Persistence is
//! derived from the fault's history: the sum of its detection counters is
//! compared against the intermittent and permanent thresholds.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{
    DiagId, Fault, FaultDetection, FaultRef, HealthMap, ModuleId, ModuleStatus, Persistence,
    Severity, FLAG_MERGED,
};
use crate::resource_map::{ResourceMap, RmError};

/// One event from an embedded instrument.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionReport {
    pub detector: DiagId,
    pub severity: Severity,
    pub classification: u8,
    /// Microseconds since system epoch.
    pub timestamp: u64,
    pub payload: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierConfig {
    /// Two reports from the same detector this close together (µs) are
    /// folded into one detection entry.
    pub merge_window_us: u64,
    pub intermittent_threshold: u64,
    pub permanent_threshold: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            merge_window_us: 1_000_000,
            intermittent_threshold: 3,
            permanent_threshold: 10,
        }
    }
}

impl ClassifierConfig {
    pub fn new(
        merge_window_us: u64,
        intermittent_threshold: u64,
        permanent_threshold: u64,
    ) -> Result<Self, FaultError> {
        if intermittent_threshold == 0 || intermittent_threshold > permanent_threshold {
            return Err(FaultError::BadThresholds {
                intermittent: intermittent_threshold,
                permanent: permanent_threshold,
            });
        }
        Ok(Self {
            merge_window_us,
            intermittent_threshold,
            permanent_threshold,
        })
    }

    /// Persistence implied by a total event count.
    pub fn classify(&self, events: u64) -> Persistence {
        if events >= self.permanent_threshold {
            Persistence::Permanent
        } else if events >= self.intermittent_threshold {
            Persistence::Intermittent
        } else {
            Persistence::Transient
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FaultError {
    #[error("unknown detector {0}")]
    UnknownDetector(DiagId),
    #[error("unknown module {0}")]
    UnknownModule(ModuleId),
    #[error("report severity must be above ZERO")]
    ZeroSeverity,
    #[error("invalid thresholds: intermittent {intermittent}, permanent {permanent}")]
    BadThresholds { intermittent: u64, permanent: u64 },
    #[error(transparent)]
    ResourceMap(#[from] RmError),
}

/// What a report did to the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportOutcome {
    pub fault: FaultRef,
    /// A new fault entry was created.
    pub created: bool,
    /// The report was folded into the latest detection's counter.
    pub merged: bool,
    pub severity: Severity,
    pub persistence: Persistence,
}

/// Records a report against the instrument's owner module, reclassifies
/// the fault and updates the Resource Map.
pub fn report_detection(
    map: &mut HealthMap,
    rm: &mut ResourceMap,
    report: &DetectionReport,
    config: &ClassifierConfig,
) -> Result<ReportOutcome, FaultError> {
    let module = map
        .diag_owner(report.detector)
        .ok_or(FaultError::UnknownDetector(report.detector))?;
    record_on_module(map, rm, module, report, config)
}

/// Like [`report_detection`] but attributes the fault to `module`
/// explicitly, whoever owns the detector.
pub fn record_on_module(
    map: &mut HealthMap,
    rm: &mut ResourceMap,
    module: ModuleId,
    report: &DetectionReport,
    config: &ClassifierConfig,
) -> Result<ReportOutcome, FaultError> {
    let outcome = record(map, module, report, config, Persistence::Zero, true)?;
    rm.update_single_fault(
        map,
        module,
        outcome.severity,
        outcome.persistence,
        ModuleStatus::OwnFault,
    )?;
    Ok(outcome)
}

/// Shared ingestion path. `persistence_floor` lets a caller assert a
/// persistence already established elsewhere; `reclassify` turns the
/// threshold rule on or off.
pub(crate) fn record(
    map: &mut HealthMap,
    module: ModuleId,
    report: &DetectionReport,
    config: &ClassifierConfig,
    persistence_floor: Persistence,
    reclassify: bool,
) -> Result<ReportOutcome, FaultError> {
    if report.severity == Severity::Zero {
        return Err(FaultError::ZeroSeverity);
    }
    if map.diag_resource(report.detector).is_none() {
        return Err(FaultError::UnknownDetector(report.detector));
    }
    let faults = map
        .faults_mut(module)
        .ok_or(FaultError::UnknownModule(module))?;

    let existing = faults
        .iter()
        .rposition(|f| f.classification == report.classification);
    let (index, created, merged) = match existing {
        Some(index) => {
            let fault = &mut faults[index];
            let merged = match fault.detections.last_mut() {
                Some(last)
                    if last.detector == report.detector
                        && last.timestamp.abs_diff(report.timestamp) <= config.merge_window_us
                        && last.counter < u32::MAX =>
                {
                    last.counter += 1;
                    true
                }
                _ => {
                    fault.detections.push(FaultDetection::new(
                        report.detector,
                        report.timestamp,
                        report.payload,
                    ));
                    false
                }
            };
            fault.severity = fault.severity.max(report.severity);
            (index, false, merged)
        }
        None => {
            faults.push(Fault {
                severity: report.severity,
                persistence: Persistence::Transient,
                classification: report.classification,
                detections: vec![FaultDetection::new(
                    report.detector,
                    report.timestamp,
                    report.payload,
                )],
            });
            (faults.len() - 1, true, false)
        }
    };

    let fault = &mut faults[index];
    if reclassify {
        let classified = config.classify(fault.event_count());
        fault.persistence = fault.persistence.max(classified);
    }
    fault.persistence = fault.persistence.max(persistence_floor).max(Persistence::Transient);

    Ok(ReportOutcome {
        fault: FaultRef { module, index },
        created,
        merged,
        severity: fault.severity,
        persistence: fault.persistence,
    })
}

/// Combines redundant entries; returns how many records were removed.
///
/// Faults of one module with equal severity, persistence and
/// classification are merged by concatenating their detection lists. Then
/// detections of one fault from the same detector are merged into the
/// first of them: counters summed, earliest timestamp (and its payload)
/// kept, MERGED flag set. Worst severity and persistence per module and
/// the total event count are unchanged.
pub fn prune(map: &mut HealthMap) -> usize {
    let ids: Vec<ModuleId> = map.modules().iter().map(|m| m.id).collect();
    let mut removed = 0;
    for id in ids {
        let faults = map.faults_mut(id).expect("id taken from the map");
        removed += merge_faults(faults);
        for fault in faults.iter_mut() {
            removed += merge_detections(&mut fault.detections);
        }
    }
    removed
}

fn merge_faults(faults: &mut Vec<Fault>) -> usize {
    let before = faults.len();
    let mut kept: Vec<Fault> = Vec::with_capacity(before);
    for f in faults.drain(..) {
        match kept.iter_mut().find(|k| {
            (k.severity, k.persistence, k.classification)
                == (f.severity, f.persistence, f.classification)
        }) {
            Some(k) => k.detections.extend(f.detections),
            None => kept.push(f),
        }
    }
    *faults = kept;
    before - faults.len()
}

fn merge_detections(detections: &mut Vec<FaultDetection>) -> usize {
    let before = detections.len();
    let mut kept: Vec<FaultDetection> = Vec::with_capacity(before);
    for d in detections.drain(..) {
        let slot = kept
            .iter_mut()
            .find(|k| k.detector == d.detector && k.counter.checked_add(d.counter).is_some());
        match slot {
            Some(k) => {
                k.counter += d.counter;
                if d.timestamp < k.timestamp {
                    k.timestamp = d.timestamp;
                    k.payload = d.payload;
                }
                k.flags |= d.flags | FLAG_MERGED;
            }
            None => kept.push(d),
        }
    }
    *detections = kept;
    before - detections.len()
}

/// Owns a Health Map and its Resource Map and serializes all mutation.
#[derive(Debug, Clone)]
pub struct FaultManager {
    map: HealthMap,
    rm: ResourceMap,
    config: ClassifierConfig,
}

impl FaultManager {
    pub fn new(map: HealthMap, config: ClassifierConfig) -> Self {
        let rm = ResourceMap::init(&map);
        Self { map, rm, config }
    }

    pub fn map(&self) -> &HealthMap {
        &self.map
    }

    pub fn resource_map(&self) -> &ResourceMap {
        &self.rm
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn report(&mut self, report: &DetectionReport) -> Result<ReportOutcome, FaultError> {
        report_detection(&mut self.map, &mut self.rm, report, &self.config)
    }

    pub fn set_maintenance(&mut self, module: ModuleId, on: bool) -> Result<(), FaultError> {
        Ok(self.rm.set_maintenance(&self.map, module, on)?)
    }

    /// Prunes the Health Map. The Resource Map is unaffected by
    /// construction, so it is left as is.
    pub fn prune(&mut self) -> usize {
        prune(&mut self.map)
    }

    pub fn into_parts(self) -> (HealthMap, ResourceMap) {
        (self.map, self.rm)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct ReportParseError {
    pub message: String,
}

fn parse_err(message: impl Into<String>) -> ReportParseError {
    ReportParseError {
        message: message.into(),
    }
}

/// Parses `<n>` or `0x<hex>`.
pub(crate) fn parse_u32(text: &str) -> Option<u32> {
    match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16).ok(),
        None => text.parse().ok(),
    }
}

impl DetectionReport {
    /// Parses the tokens after `detect`:
    /// `<detectorId> sev=<SEV> class=<0-255> [t=<µs>] [payload=<hex>]`.
    /// A missing `t=` takes `default_time`; a time is required if that is
    /// `None`.
    pub fn parse_fields<'a>(
        mut tokens: impl Iterator<Item = &'a str>,
        default_time: Option<u64>,
    ) -> Result<Self, ReportParseError> {
        let detector = tokens
            .next()
            .and_then(parse_u32)
            .ok_or_else(|| parse_err("expected a detector id"))?;
        let (mut severity, mut class, mut time, mut payload) = (None, None, default_time, 0u32);
        for tok in tokens {
            let (key, value) = tok
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got {tok:?}")))?;
            match key {
                "sev" => {
                    severity =
                        Some(value.parse::<Severity>().map_err(|e| parse_err(e.to_string()))?)
                }
                "class" => {
                    class = Some(
                        value
                            .parse::<u8>()
                            .map_err(|_| parse_err(format!("bad class {value:?}")))?,
                    )
                }
                "t" => {
                    time = Some(
                        value
                            .parse::<u64>()
                            .map_err(|_| parse_err(format!("bad time {value:?}")))?,
                    )
                }
                "payload" => {
                    let hex = value.trim_start_matches("0x").trim_start_matches("0X");
                    payload = u32::from_str_radix(hex, 16)
                        .map_err(|_| parse_err(format!("bad payload {value:?}")))?
                }
                other => return Err(parse_err(format!("unknown field {other:?}"))),
            }
        }
        let severity = severity.ok_or_else(|| parse_err("missing sev="))?;
        if severity == Severity::Zero {
            return Err(parse_err("sev must be above ZERO"));
        }
        Ok(Self {
            detector,
            severity,
            classification: class.ok_or_else(|| parse_err("missing class="))?,
            timestamp: time.ok_or_else(|| parse_err("missing t="))?,
            payload,
        })
    }
}

impl FromStr for DetectionReport {
    type Err = ReportParseError;

    /// `detect <detectorId> sev=<SEV> class=<0-255> t=<µs> [payload=<hex>]`
    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some("detect") {
            return Err(parse_err("expected 'detect'"));
        }
        Self::parse_fields(tokens, None)
    }
}

impl fmt::Display for DetectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "detect {} sev={} class={} t={} payload={:x}",
            self.detector, self.severity, self.classification, self.timestamp, self.payload
        )
    }
}
