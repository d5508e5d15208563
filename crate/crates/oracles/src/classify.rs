//! Replay reference for detection recording and reclassification.

use healthmap::{ModuleId, Persistence, Severity};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Report {
    pub module: ModuleId,
    pub detector: u32,
    pub severity: Severity,
    pub class: u8,
    pub time: u64,
    pub payload: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayedFault {
    pub module: ModuleId,
    pub class: u8,
    pub severity: Severity,
    pub persistence: Persistence,
    /// (detector, first timestamp, counter, payload)
    pub detections: Vec<(u32, u64, u32, u32)>,
}

pub struct Thresholds {
    pub window: u64,
    pub intermittent: u64,
    pub permanent: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            window: 1_000_000,
            intermittent: 3,
            permanent: 10,
        }
    }
}

/// Faults in creation order per module, as they should look after
/// recording `reports` on an initially fault-free map.
pub fn replay(reports: &[Report], th: &Thresholds) -> Vec<ReplayedFault> {
    let mut faults: Vec<ReplayedFault> = Vec::new();
    for r in reports {
        let slot = faults
            .iter()
            .rposition(|f| f.module == r.module && f.class == r.class);
        let i = match slot {
            Some(i) => i,
            None => {
                faults.push(ReplayedFault {
                    module: r.module,
                    class: r.class,
                    severity: Severity::Zero,
                    persistence: Persistence::Transient,
                    detections: Vec::new(),
                });
                faults.len() - 1
            }
        };
        let f = &mut faults[i];
        let mergeable = matches!(
            f.detections.last(),
            Some(&(d, t, c, _)) if d == r.detector
                && (t as i128 - r.time as i128).abs() <= th.window as i128
                && c < u32::MAX
        );
        if mergeable {
            f.detections.last_mut().expect("last").2 += 1;
        } else {
            f.detections.push((r.detector, r.time, 1, r.payload));
        }
        if r.severity > f.severity {
            f.severity = r.severity;
        }
        let events: u64 = f.detections.iter().map(|d| u64::from(d.2)).sum();
        let level = if events >= th.permanent {
            Persistence::Permanent
        } else if events >= th.intermittent {
            Persistence::Intermittent
        } else {
            Persistence::Transient
        };
        if level > f.persistence {
            f.persistence = level;
        }
    }
    faults
}
