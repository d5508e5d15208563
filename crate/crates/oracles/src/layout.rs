//! Record positions of a freshly serialized image, read straight from the
//! documented layout: header, then modules, instruments, dependencies,
//! faults and detections back to back.

use std::collections::BTreeSet;

pub const HEADER: usize = 32;
pub const MODULE: usize = 25;
pub const DIAG: usize = 13;
pub const DEPENDENCY: usize = 9;
pub const FAULT: usize = 12;
pub const DETECTION: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub modules: usize,
    pub diag: usize,
    pub deps: usize,
    pub faults: usize,
    pub detections: usize,
    pub total: usize,
}

fn u16_at(b: &[u8], at: usize) -> usize {
    usize::from(u16::from_le_bytes([b[at], b[at + 1]]))
}

fn u32_at(b: &[u8], at: usize) -> usize {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes")) as usize
}

pub fn counts(image: &[u8]) -> Counts {
    Counts {
        total: u32_at(image, 8),
        modules: u16_at(image, 12),
        diag: u16_at(image, 14),
        deps: u16_at(image, 16),
        faults: u16_at(image, 18),
        detections: u32_at(image, 20),
    }
}

/// Byte offsets an append may rewrite in `image`: fault and detection
/// `next` links, a module's first-fault link, a fault's severity and
/// persistence bytes, and a detection's counter and flags.
pub fn patchable_bytes(image: &[u8]) -> BTreeSet<usize> {
    let c = counts(image);
    let mut out = BTreeSet::new();
    let modules = HEADER;
    for i in 0..c.modules {
        out.extend(modules + i * MODULE + 16..modules + i * MODULE + 20);
    }
    let faults = modules + c.modules * MODULE + c.diag * DIAG + c.deps * DEPENDENCY;
    for i in 0..c.faults {
        let at = faults + i * FAULT;
        out.extend(at..at + 4);
        out.extend(at + 8..at + 10);
    }
    let detections = faults + c.faults * FAULT;
    for i in 0..c.detections {
        let at = detections + i * DETECTION;
        out.extend(at..at + 4);
        out.extend(at + 16..at + 20);
        out.insert(at + 24);
    }
    out
}
