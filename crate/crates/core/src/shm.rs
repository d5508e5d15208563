//! Serialized Health Map (SHM) image.
//!
//! Layout, all little-endian, no padding:
//!
//! ```text
//! header (32) | modules (25·M) | diag resources (13·R) | dependencies (9·D) | faults + detections
//! ```
//!
//! The first three sections are the constant part, written once at compile
//! time. Faults (12 B) and detections (25 B) form the dynamic part. A fresh
//! image stores all faults and then all detections; appends may interleave
//! them, so the dynamic region is only ever interpreted by walking lists.
//!
//! Every link is an absolute byte offset from the start of the image, which
//! keeps the image relocatable. Offset 0 is the null link.

use std::collections::{BTreeMap, HashMap, HashSet};

use thiserror::Error;

use crate::model::{
    DiagId, DiagResource, Dependency, Fault, FaultDetection, FaultRef, HealthMap, Module,
    ModuleId, Persistence, Severity, Violation,
};

pub const MAGIC: [u8; 4] = *b"SHM1";
pub const VERSION: u16 = 1;

pub const HEADER_LEN: usize = 32;
pub const MODULE_LEN: usize = 25;
pub const DIAG_LEN: usize = 13;
pub const DEPENDENCY_LEN: usize = 9;
pub const FAULT_LEN: usize = 12;
pub const DETECTION_LEN: usize = 25;

/// Bytes of the header covered by the header checksum.
const HEADER_CRC_SPAN: usize = 28;

// Field offsets inside records.
const MOD_ID: usize = 0;
const MOD_PARENT: usize = 4;
const MOD_FIRST_DIAG: usize = 8;
const MOD_FIRST_DEP: usize = 12;
const MOD_FIRST_FAULT: usize = 16;
const MOD_CRIT: usize = 20;
const MOD_NEXT: usize = 21;

const DIAG_ID: usize = 0;
const DIAG_OWNER: usize = 4;
const DIAG_NEXT: usize = 8;
const DIAG_KIND: usize = 12;

const DEP_DEPENDENT: usize = 0;
const DEP_NEXT: usize = 4;
const DEP_SEVERITY: usize = 8;

const FAULT_NEXT: usize = 0;
const FAULT_FIRST_DET: usize = 4;
const FAULT_SEVERITY: usize = 8;
const FAULT_PERSISTENCE: usize = 9;
const FAULT_CLASS: usize = 10;
const FAULT_RESERVED: usize = 11;

const DET_NEXT: usize = 0;
const DET_DETECTOR: usize = 4;
const DET_TIMESTAMP: usize = 8;
const DET_COUNTER: usize = 16;
const DET_PAYLOAD: usize = 20;
const DET_FLAGS: usize = 24;

/// Standard reflected CRC-32 (poly 0xEDB88320, init and final xor 0xFFFFFFFF).
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Module,
    DiagResource,
    Dependency,
    Fault,
    Detection,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("health map is structurally invalid: {0:?}")]
    StructureInvalid(Vec<Violation>),
    #[error("too many {kind:?} records ({count}) for the header field")]
    TooManyRecords { kind: RecordKind, count: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("unsupported header flags {0:#06x}")]
    UnsupportedFlags(u16),
    #[error("header checksum mismatch")]
    HeaderCrcMismatch,
    #[error("body checksum mismatch")]
    BodyCrcMismatch,
    #[error("length mismatch: header says {declared} bytes, have {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("link offset {0} is outside the image")]
    OffsetOutOfBounds(usize),
    #[error("link offset {offset} is not a {kind:?} record boundary")]
    OffsetMisaligned { offset: usize, kind: RecordKind },
    #[error("linked list revisits the {kind:?} record at offset {offset}")]
    LinkCycle { offset: usize, kind: RecordKind },
    #[error("header declares {declared} {kind:?} records, lists reach {found}")]
    CountMismatch {
        kind: RecordKind,
        declared: usize,
        found: usize,
    },
    #[error("diagnostic resource at offset {0} names a different owner module")]
    OwnerMismatch(usize),
    #[error("invalid enumeration byte at offset {0}")]
    BadEnum(usize),
    #[error("reserved byte at offset {0} is not zero")]
    BadReserved(usize),
    #[error("decoded health map is structurally invalid: {0:?}")]
    Structure(Vec<Violation>),
}

/// The fixed 32-byte header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShmHeader {
    pub version: u16,
    pub flags: u16,
    pub total_length: u32,
    pub modules: u16,
    pub diag_resources: u16,
    pub dependencies: u16,
    pub faults: u16,
    pub detections: u32,
    pub body_crc: u32,
    pub header_crc: u32,
}

impl ShmHeader {
    /// Reads the header fields without checking any of them.
    pub fn parse(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() < HEADER_LEN {
            return Err(DecodeError::LengthMismatch {
                declared: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if bytes[0..4] != MAGIC {
            return Err(DecodeError::BadMagic);
        }
        Ok(Self {
            version: read_u16(bytes, 4),
            flags: read_u16(bytes, 6),
            total_length: read_u32(bytes, 8),
            modules: read_u16(bytes, 12),
            diag_resources: read_u16(bytes, 14),
            dependencies: read_u16(bytes, 16),
            faults: read_u16(bytes, 18),
            detections: read_u32(bytes, 20),
            body_crc: read_u32(bytes, 24),
            header_crc: read_u32(bytes, 28),
        })
    }

    pub fn write(&self, out: &mut [u8]) {
        out[0..4].copy_from_slice(&MAGIC);
        out[4..6].copy_from_slice(&self.version.to_le_bytes());
        out[6..8].copy_from_slice(&self.flags.to_le_bytes());
        out[8..12].copy_from_slice(&self.total_length.to_le_bytes());
        out[12..14].copy_from_slice(&self.modules.to_le_bytes());
        out[14..16].copy_from_slice(&self.diag_resources.to_le_bytes());
        out[16..18].copy_from_slice(&self.dependencies.to_le_bytes());
        out[18..20].copy_from_slice(&self.faults.to_le_bytes());
        out[20..24].copy_from_slice(&self.detections.to_le_bytes());
        out[24..28].copy_from_slice(&self.body_crc.to_le_bytes());
        out[28..32].copy_from_slice(&self.header_crc.to_le_bytes());
    }

    /// Image length implied by the record counts.
    pub fn expected_length(&self) -> usize {
        image_length(
            self.modules.into(),
            self.diag_resources.into(),
            self.dependencies.into(),
            self.faults.into(),
            self.detections as usize,
        )
    }

    fn constant_end(&self) -> usize {
        HEADER_LEN
            + MODULE_LEN * self.modules as usize
            + DIAG_LEN * self.diag_resources as usize
            + DEPENDENCY_LEN * self.dependencies as usize
    }
}

/// Bytes needed for an image with the given record counts.
pub fn image_length(m: usize, r: usize, d: usize, f: usize, fd: usize) -> usize {
    HEADER_LEN + MODULE_LEN * m + DIAG_LEN * r + DEPENDENCY_LEN * d + FAULT_LEN * f + DETECTION_LEN * fd
}

/// Recomputes both checksums in place. The body checksum covers
/// `[32, totalLength)`, clamped to the buffer.
pub fn reseal(bytes: &mut [u8]) {
    if bytes.len() < HEADER_LEN {
        return;
    }
    let total = (read_u32(bytes, 8) as usize).clamp(HEADER_LEN, bytes.len());
    let body = crc32(&bytes[HEADER_LEN..total]);
    bytes[24..28].copy_from_slice(&body.to_le_bytes());
    let header = crc32(&bytes[..HEADER_CRC_SPAN]);
    bytes[28..32].copy_from_slice(&header.to_le_bytes());
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4-byte slice"))
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8-byte slice"))
}

fn write_u32(b: &mut [u8], at: usize, v: u32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn offset_u32(off: usize) -> u32 {
    u32::try_from(off).expect("image offsets fit in 32 bits")
}

fn link(off: Option<usize>) -> u32 {
    off.map_or(0, offset_u32)
}

fn count_u16(kind: RecordKind, count: usize) -> Result<u16, EncodeError> {
    u16::try_from(count).map_err(|_| EncodeError::TooManyRecords { kind, count })
}

fn header_for(counts: [usize; 5]) -> Result<ShmHeader, EncodeError> {
    let [m, r, d, f, fd] = counts;
    let total = image_length(m, r, d, f, fd);
    let total_length = u32::try_from(total).map_err(|_| EncodeError::TooManyRecords {
        kind: RecordKind::Detection,
        count: fd,
    })?;
    Ok(ShmHeader {
        version: VERSION,
        flags: 0,
        total_length,
        modules: count_u16(RecordKind::Module, m)?,
        diag_resources: count_u16(RecordKind::DiagResource, r)?,
        dependencies: count_u16(RecordKind::Dependency, d)?,
        faults: count_u16(RecordKind::Fault, f)?,
        detections: u32::try_from(fd).map_err(|_| EncodeError::TooManyRecords {
            kind: RecordKind::Detection,
            count: fd,
        })?,
        body_crc: 0,
        header_crc: 0,
    })
}

/// Serializes a structurally valid map. Records appear in list order,
/// grouped by owner in module order.
pub fn serialize(map: &HealthMap) -> Result<Vec<u8>, EncodeError> {
    let violations = map.validate();
    if !violations.is_empty() {
        return Err(EncodeError::StructureInvalid(violations));
    }
    let c = map.counts();
    let header = header_for([
        c.modules,
        c.diag_resources,
        c.dependencies,
        c.faults,
        c.detections,
    ])?;

    // Assign offsets section by section.
    let modules = map.modules();
    let mut module_off = HashMap::with_capacity(modules.len());
    let mut cursor = HEADER_LEN;
    for m in modules {
        module_off.insert(m.id, cursor);
        cursor += MODULE_LEN;
    }
    let mut diag_off = HashMap::with_capacity(c.diag_resources);
    let mut first_diag = Vec::with_capacity(modules.len());
    for m in modules {
        first_diag.push((!m.diag_resources.is_empty()).then_some(cursor));
        for r in &m.diag_resources {
            diag_off.insert(r.id, cursor);
            cursor += DIAG_LEN;
        }
    }
    let mut first_dep = Vec::with_capacity(modules.len());
    for m in modules {
        first_dep.push((!m.dependencies.is_empty()).then_some(cursor));
        cursor += DEPENDENCY_LEN * m.dependencies.len();
    }
    let mut first_fault = Vec::with_capacity(modules.len());
    for m in modules {
        first_fault.push((!m.faults.is_empty()).then_some(cursor));
        cursor += FAULT_LEN * m.faults.len();
    }
    let detections_start = cursor;
    debug_assert_eq!(
        detections_start + DETECTION_LEN * c.detections,
        header.total_length as usize
    );

    let mut out = vec![0u8; header.total_length as usize];

    for (i, m) in modules.iter().enumerate() {
        let at = module_off[&m.id];
        let rec = &mut out[at..at + MODULE_LEN];
        write_u32(rec, MOD_ID, m.id);
        write_u32(rec, MOD_PARENT, link(m.parent.map(|p| module_off[&p])));
        write_u32(rec, MOD_FIRST_DIAG, link(first_diag[i]));
        write_u32(rec, MOD_FIRST_DEP, link(first_dep[i]));
        write_u32(rec, MOD_FIRST_FAULT, link(first_fault[i]));
        rec[MOD_CRIT] = m.criticality.as_u8();
        let next = (i + 1 < modules.len()).then(|| at + MODULE_LEN);
        write_u32(rec, MOD_NEXT, link(next));
    }

    for (i, m) in modules.iter().enumerate() {
        let owner = module_off[&m.id];
        if let Some(start) = first_diag[i] {
            let n = m.diag_resources.len();
            for (k, r) in m.diag_resources.iter().enumerate() {
                let at = start + k * DIAG_LEN;
                let rec = &mut out[at..at + DIAG_LEN];
                write_u32(rec, DIAG_ID, r.id);
                write_u32(rec, DIAG_OWNER, offset_u32(owner));
                write_u32(rec, DIAG_NEXT, link((k + 1 < n).then(|| at + DIAG_LEN)));
                rec[DIAG_KIND] = r.kind;
            }
        }
        if let Some(start) = first_dep[i] {
            let n = m.dependencies.len();
            for (k, d) in m.dependencies.iter().enumerate() {
                let at = start + k * DEPENDENCY_LEN;
                let rec = &mut out[at..at + DEPENDENCY_LEN];
                write_u32(rec, DEP_DEPENDENT, offset_u32(module_off[&d.dependent]));
                write_u32(rec, DEP_NEXT, link((k + 1 < n).then(|| at + DEPENDENCY_LEN)));
                rec[DEP_SEVERITY] = d.severity.as_u8();
            }
        }
    }

    let mut det_cursor = detections_start;
    for (i, m) in modules.iter().enumerate() {
        let Some(start) = first_fault[i] else { continue };
        let n = m.faults.len();
        for (k, f) in m.faults.iter().enumerate() {
            let at = start + k * FAULT_LEN;
            let first_det = (!f.detections.is_empty()).then_some(det_cursor);
            {
                let rec = &mut out[at..at + FAULT_LEN];
                write_u32(rec, FAULT_NEXT, link((k + 1 < n).then(|| at + FAULT_LEN)));
                write_u32(rec, FAULT_FIRST_DET, link(first_det));
                rec[FAULT_SEVERITY] = f.severity.as_u8();
                rec[FAULT_PERSISTENCE] = f.persistence.as_u8();
                rec[FAULT_CLASS] = f.classification;
                rec[FAULT_RESERVED] = 0;
            }
            let nd = f.detections.len();
            for (j, d) in f.detections.iter().enumerate() {
                let dat = det_cursor;
                let next = (j + 1 < nd).then(|| dat + DETECTION_LEN);
                write_detection(&mut out[dat..dat + DETECTION_LEN], d, diag_off[&d.detector], next);
                det_cursor += DETECTION_LEN;
            }
        }
    }

    header.write(&mut out[..HEADER_LEN]);
    reseal(&mut out);
    Ok(out)
}

fn write_detection(rec: &mut [u8], d: &FaultDetection, detector_off: usize, next: Option<usize>) {
    write_u32(rec, DET_NEXT, link(next));
    write_u32(rec, DET_DETECTOR, offset_u32(detector_off));
    rec[DET_TIMESTAMP..DET_TIMESTAMP + 8].copy_from_slice(&d.timestamp.to_le_bytes());
    write_u32(rec, DET_COUNTER, d.counter);
    write_u32(rec, DET_PAYLOAD, d.payload);
    rec[DET_FLAGS] = d.flags;
}

fn write_fault(rec: &mut [u8], f: &Fault, first_det: Option<usize>) {
    write_u32(rec, FAULT_NEXT, 0);
    write_u32(rec, FAULT_FIRST_DET, link(first_det));
    rec[FAULT_SEVERITY] = f.severity.as_u8();
    rec[FAULT_PERSISTENCE] = f.persistence.as_u8();
    rec[FAULT_CLASS] = f.classification;
    rec[FAULT_RESERVED] = 0;
}

/// Offsets of every record reachable from the module list.
#[derive(Debug, Clone)]
struct ImageIndex {
    header: ShmHeader,
    modules: Vec<ModuleSlots>,
    diag_by_id: HashMap<DiagId, usize>,
}

#[derive(Debug, Clone)]
struct ModuleSlots {
    offset: usize,
    id: ModuleId,
    faults: Vec<FaultSlots>,
}

#[derive(Debug, Clone)]
struct FaultSlots {
    offset: usize,
    detections: Vec<usize>,
}

struct Walker<'a> {
    bytes: &'a [u8],
    modules_end: usize,
    diag_end: usize,
    dep_end: usize,
    total: usize,
    /// Claimed byte ranges of the dynamic region, start -> end.
    dynamic: BTreeMap<usize, usize>,
}

impl<'a> Walker<'a> {
    fn new(bytes: &'a [u8], header: ShmHeader) -> Self {
        let modules_end = HEADER_LEN + MODULE_LEN * header.modules as usize;
        let diag_end = modules_end + DIAG_LEN * header.diag_resources as usize;
        let dep_end = diag_end + DEPENDENCY_LEN * header.dependencies as usize;
        Self {
            bytes,
            modules_end,
            diag_end,
            dep_end,
            total: bytes.len(),
            dynamic: BTreeMap::new(),
        }
    }

    /// Checks that `off` starts a record of `kind` in a fixed section.
    fn fixed(&self, off: usize, kind: RecordKind) -> Result<&'a [u8], DecodeError> {
        if off >= self.total {
            return Err(DecodeError::OffsetOutOfBounds(off));
        }
        let (start, end, len) = match kind {
            RecordKind::Module => (HEADER_LEN, self.modules_end, MODULE_LEN),
            RecordKind::DiagResource => (self.modules_end, self.diag_end, DIAG_LEN),
            RecordKind::Dependency => (self.diag_end, self.dep_end, DEPENDENCY_LEN),
            _ => unreachable!("dynamic records are claimed, not located"),
        };
        if off < start || off >= end || !(off - start).is_multiple_of(len) {
            return Err(DecodeError::OffsetMisaligned { offset: off, kind });
        }
        Ok(&self.bytes[off..off + len])
    }

    /// Claims a dynamic-region record, rejecting overlap with earlier claims.
    fn claim(&mut self, off: usize, kind: RecordKind) -> Result<&'a [u8], DecodeError> {
        let len = if kind == RecordKind::Fault {
            FAULT_LEN
        } else {
            DETECTION_LEN
        };
        if off >= self.total {
            return Err(DecodeError::OffsetOutOfBounds(off));
        }
        let end = off + len;
        if off < self.dep_end || end > self.total {
            return Err(DecodeError::OffsetMisaligned { offset: off, kind });
        }
        if self.dynamic.contains_key(&off) {
            return Err(DecodeError::LinkCycle { offset: off, kind });
        }
        let overlaps_prev = self
            .dynamic
            .range(..off)
            .next_back()
            .is_some_and(|(_, &e)| e > off);
        let overlaps_next = self.dynamic.range(off..end).next().is_some();
        if overlaps_prev || overlaps_next {
            return Err(DecodeError::OffsetMisaligned { offset: off, kind });
        }
        self.dynamic.insert(off, end);
        Ok(&self.bytes[off..end])
    }
}

fn severity_at(rec: &[u8], field: usize, base: usize) -> Result<Severity, DecodeError> {
    Severity::from_u8(rec[field]).ok_or(DecodeError::BadEnum(base + field))
}

fn persistence_at(rec: &[u8], field: usize, base: usize) -> Result<Persistence, DecodeError> {
    Persistence::from_u8(rec[field]).ok_or(DecodeError::BadEnum(base + field))
}

fn check_header(bytes: &[u8]) -> Result<ShmHeader, DecodeError> {
    let header = ShmHeader::parse(bytes)?;
    if header.version != VERSION {
        return Err(DecodeError::BadVersion(header.version));
    }
    if crc32(&bytes[..HEADER_CRC_SPAN]) != header.header_crc {
        return Err(DecodeError::HeaderCrcMismatch);
    }
    if header.flags != 0 {
        return Err(DecodeError::UnsupportedFlags(header.flags));
    }
    let declared = header.total_length as usize;
    if declared != bytes.len() || declared != header.expected_length() {
        return Err(DecodeError::LengthMismatch {
            declared,
            actual: bytes.len(),
        });
    }
    if crc32(&bytes[HEADER_LEN..]) != header.body_crc {
        return Err(DecodeError::BodyCrcMismatch);
    }
    Ok(header)
}

/// Validates checksums and walks every list, returning decoded records
/// plus their offsets.
fn walk(bytes: &[u8]) -> Result<(HealthMap, ImageIndex), DecodeError> {
    let header = check_header(bytes)?;
    let mut w = Walker::new(bytes, header);

    struct RawModule {
        offset: usize,
        module: Module,
        parent_off: usize,
        first_diag: usize,
        first_dep: usize,
        first_fault: usize,
    }

    // Module list.
    let mut raw = Vec::with_capacity(header.modules as usize);
    let mut seen = HashSet::new();
    let mut next = if header.modules > 0 { HEADER_LEN } else { 0 };
    while next != 0 {
        let rec = w.fixed(next, RecordKind::Module)?;
        if !seen.insert(next) {
            return Err(DecodeError::LinkCycle {
                offset: next,
                kind: RecordKind::Module,
            });
        }
        raw.push(RawModule {
            offset: next,
            module: Module::new(read_u32(rec, MOD_ID), None, severity_at(rec, MOD_CRIT, next)?),
            parent_off: read_u32(rec, MOD_PARENT) as usize,
            first_diag: read_u32(rec, MOD_FIRST_DIAG) as usize,
            first_dep: read_u32(rec, MOD_FIRST_DEP) as usize,
            first_fault: read_u32(rec, MOD_FIRST_FAULT) as usize,
        });
        next = read_u32(rec, MOD_NEXT) as usize;
    }
    if raw.len() != header.modules as usize {
        return Err(DecodeError::CountMismatch {
            kind: RecordKind::Module,
            declared: header.modules as usize,
            found: raw.len(),
        });
    }
    let id_at: HashMap<usize, ModuleId> = raw.iter().map(|r| (r.offset, r.module.id)).collect();

    // Parents, diagnostic resources and dependencies.
    let mut diag_seen = HashSet::new();
    let mut diag_id_at: HashMap<usize, DiagId> = HashMap::new();
    let mut dep_seen = HashSet::new();
    for r in &mut raw {
        if r.parent_off != 0 {
            w.fixed(r.parent_off, RecordKind::Module)?;
            r.module.parent = Some(id_at[&r.parent_off]);
        }
        let mut next = r.first_diag;
        while next != 0 {
            let rec = w.fixed(next, RecordKind::DiagResource)?;
            if !diag_seen.insert(next) {
                return Err(DecodeError::LinkCycle {
                    offset: next,
                    kind: RecordKind::DiagResource,
                });
            }
            if read_u32(rec, DIAG_OWNER) as usize != r.offset {
                return Err(DecodeError::OwnerMismatch(next));
            }
            let id = read_u32(rec, DIAG_ID);
            diag_id_at.insert(next, id);
            r.module.diag_resources.push(DiagResource {
                id,
                kind: rec[DIAG_KIND],
            });
            next = read_u32(rec, DIAG_NEXT) as usize;
        }
        let mut next = r.first_dep;
        while next != 0 {
            let rec = w.fixed(next, RecordKind::Dependency)?;
            if !dep_seen.insert(next) {
                return Err(DecodeError::LinkCycle {
                    offset: next,
                    kind: RecordKind::Dependency,
                });
            }
            let dep_off = read_u32(rec, DEP_DEPENDENT) as usize;
            w.fixed(dep_off, RecordKind::Module)?;
            r.module.dependencies.push(Dependency {
                dependent: id_at[&dep_off],
                severity: severity_at(rec, DEP_SEVERITY, next)?,
            });
            next = read_u32(rec, DEP_NEXT) as usize;
        }
    }
    for (kind, declared, found) in [
        (
            RecordKind::DiagResource,
            header.diag_resources as usize,
            diag_seen.len(),
        ),
        (
            RecordKind::Dependency,
            header.dependencies as usize,
            dep_seen.len(),
        ),
    ] {
        if declared != found {
            return Err(DecodeError::CountMismatch {
                kind,
                declared,
                found,
            });
        }
    }

    // Dynamic part.
    let mut slots = Vec::with_capacity(raw.len());
    let (mut n_faults, mut n_dets) = (0usize, 0usize);
    for r in &mut raw {
        let mut fault_slots = Vec::new();
        let mut next = r.first_fault;
        while next != 0 {
            let rec = w.claim(next, RecordKind::Fault)?;
            if rec[FAULT_RESERVED] != 0 {
                return Err(DecodeError::BadReserved(next + FAULT_RESERVED));
            }
            let mut fault = Fault {
                severity: severity_at(rec, FAULT_SEVERITY, next)?,
                persistence: persistence_at(rec, FAULT_PERSISTENCE, next)?,
                classification: rec[FAULT_CLASS],
                detections: Vec::new(),
            };
            let mut det_offsets = Vec::new();
            let mut dnext = read_u32(rec, FAULT_FIRST_DET) as usize;
            while dnext != 0 {
                let drec = w.claim(dnext, RecordKind::Detection)?;
                let detector_off = read_u32(drec, DET_DETECTOR) as usize;
                w.fixed(detector_off, RecordKind::DiagResource)?;
                let detector = *diag_id_at
                    .get(&detector_off)
                    .ok_or(DecodeError::OffsetMisaligned {
                        offset: detector_off,
                        kind: RecordKind::DiagResource,
                    })?;
                fault.detections.push(FaultDetection {
                    detector,
                    timestamp: read_u64(drec, DET_TIMESTAMP),
                    counter: read_u32(drec, DET_COUNTER),
                    payload: read_u32(drec, DET_PAYLOAD),
                    flags: drec[DET_FLAGS],
                });
                det_offsets.push(dnext);
                n_dets += 1;
                dnext = read_u32(drec, DET_NEXT) as usize;
            }
            fault_slots.push(FaultSlots {
                offset: next,
                detections: det_offsets,
            });
            r.module.faults.push(fault);
            n_faults += 1;
            next = read_u32(rec, FAULT_NEXT) as usize;
        }
        slots.push(ModuleSlots {
            offset: r.offset,
            id: r.module.id,
            faults: fault_slots,
        });
    }
    for (kind, declared, found) in [
        (RecordKind::Fault, header.faults as usize, n_faults),
        (RecordKind::Detection, header.detections as usize, n_dets),
    ] {
        if declared != found {
            return Err(DecodeError::CountMismatch {
                kind,
                declared,
                found,
            });
        }
    }

    let map = HealthMap::from_modules_unchecked(raw.into_iter().map(|r| r.module).collect());
    let violations = map.validate();
    if !violations.is_empty() {
        return Err(DecodeError::Structure(violations));
    }
    let diag_by_id = diag_id_at.into_iter().map(|(off, id)| (id, off)).collect();
    Ok((
        map,
        ImageIndex {
            header,
            modules: slots,
            diag_by_id,
        },
    ))
}

/// Validates an image and rebuilds the in-memory map.
pub fn deserialize(bytes: &[u8]) -> Result<HealthMap, DecodeError> {
    walk(bytes).map(|(map, _)| map)
}

/// Full validation without keeping the decoded map.
pub fn validate(bytes: &[u8]) -> Result<ShmHeader, DecodeError> {
    walk(bytes).map(|(_, idx)| idx.header)
}

/// A new fault for an existing module, carrying its detections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewFault {
    pub module: ModuleId,
    pub fault: Fault,
}

/// A detection appended to an existing fault (or one added earlier in the
/// same batch).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewDetection {
    pub fault: FaultRef,
    pub detection: FaultDetection,
}

/// In-place rewrite of an existing detection's counter and flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionPatch {
    pub fault: FaultRef,
    pub detection: usize,
    pub counter: u32,
    pub flags: u8,
}

/// In-place rewrite of an existing fault's severity and persistence bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultLevelPatch {
    pub fault: FaultRef,
    pub severity: Severity,
    pub persistence: Persistence,
}

/// Everything needed to bring an image up to date with new fault data.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AppendBatch {
    pub new_faults: Vec<NewFault>,
    pub new_detections: Vec<NewDetection>,
    pub detection_patches: Vec<DetectionPatch>,
    pub level_patches: Vec<FaultLevelPatch>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AppendError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("module {0} differs in the constant part")]
    ConstantPartChanged(ModuleId),
    #[error("fault {module}#{index} was removed or rewritten", module = .0.module, index = .0.index)]
    FaultRewritten(FaultRef),
    #[error("detection {detection} of fault {module}#{index} was removed or rewritten", module = .fault.module, index = .fault.index)]
    DetectionRewritten { fault: FaultRef, detection: usize },
    #[error("unknown module {0}")]
    UnknownModule(ModuleId),
    #[error("unknown fault {module}#{index}", module = .0.module, index = .0.index)]
    UnknownFault(FaultRef),
    #[error("unknown detector {0}")]
    UnknownDetector(DiagId),
}

impl AppendBatch {
    pub fn is_empty(&self) -> bool {
        self.new_faults.is_empty()
            && self.new_detections.is_empty()
            && self.detection_patches.is_empty()
            && self.level_patches.is_empty()
    }

    /// Difference between `old` and its extension `new`. Fails if `new` is
    /// not reachable from `old` by appending faults and detections and
    /// updating counters, flags, severities or persistences.
    pub fn between(old: &HealthMap, new: &HealthMap) -> Result<Self, AppendError> {
        let mut batch = AppendBatch::default();
        if old.modules().len() != new.modules().len() {
            let id = new
                .modules()
                .iter()
                .chain(old.modules())
                .find(|m| old.module(m.id).is_none() || new.module(m.id).is_none())
                .map_or(0, |m| m.id);
            return Err(AppendError::ConstantPartChanged(id));
        }
        for (om, nm) in old.modules().iter().zip(new.modules()) {
            if om.id != nm.id
                || om.parent != nm.parent
                || om.criticality != nm.criticality
                || om.diag_resources != nm.diag_resources
                || om.dependencies != nm.dependencies
            {
                return Err(AppendError::ConstantPartChanged(nm.id));
            }
            if nm.faults.len() < om.faults.len() {
                return Err(AppendError::FaultRewritten(FaultRef {
                    module: om.id,
                    index: nm.faults.len(),
                }));
            }
            for (index, (of, nf)) in om.faults.iter().zip(&nm.faults).enumerate() {
                let fault = FaultRef {
                    module: om.id,
                    index,
                };
                if of.classification != nf.classification || nf.detections.len() < of.detections.len()
                {
                    return Err(AppendError::FaultRewritten(fault));
                }
                if (of.severity, of.persistence) != (nf.severity, nf.persistence) {
                    batch.level_patches.push(FaultLevelPatch {
                        fault,
                        severity: nf.severity,
                        persistence: nf.persistence,
                    });
                }
                for (detection, (od, nd)) in of.detections.iter().zip(&nf.detections).enumerate() {
                    if (od.detector, od.timestamp, od.payload) != (nd.detector, nd.timestamp, nd.payload)
                    {
                        return Err(AppendError::DetectionRewritten { fault, detection });
                    }
                    if (od.counter, od.flags) != (nd.counter, nd.flags) {
                        batch.detection_patches.push(DetectionPatch {
                            fault,
                            detection,
                            counter: nd.counter,
                            flags: nd.flags,
                        });
                    }
                }
                for d in &nf.detections[of.detections.len()..] {
                    batch.new_detections.push(NewDetection {
                        fault,
                        detection: d.clone(),
                    });
                }
            }
            for f in &nm.faults[om.faults.len()..] {
                batch.new_faults.push(NewFault {
                    module: nm.id,
                    fault: f.clone(),
                });
            }
        }
        Ok(batch)
    }
}

/// Appends new fault data to a valid image.
///
/// New records are written after the old end of the image. Existing bytes
/// change only where a list tail link is spliced onto a new record, where
/// a detection counter or flag byte is patched, or where a fault's severity
/// or persistence byte is patched. The header counts, length and both
/// checksums are rewritten.
pub fn append_fault_data(image: &[u8], batch: &AppendBatch) -> Result<Vec<u8>, AppendError> {
    let (_, mut index) = walk(image)?;
    if batch.is_empty() {
        return Ok(image.to_vec());
    }
    let mut out = image.to_vec();
    let mut header = index.header;
    let mut n_faults = header.faults as usize;
    let mut n_dets = header.detections as usize;

    let module_pos: HashMap<ModuleId, usize> = index
        .modules
        .iter()
        .enumerate()
        .map(|(i, m)| (m.id, i))
        .collect();
    let detector_off = |id: DiagId, idx: &ImageIndex| {
        idx.diag_by_id
            .get(&id)
            .copied()
            .ok_or(AppendError::UnknownDetector(id))
    };

    // Patches first: they address records as they were in the old image.
    for p in &batch.level_patches {
        let at = fault_slot(&index, &module_pos, p.fault)?.offset;
        out[at + FAULT_SEVERITY] = p.severity.as_u8();
        out[at + FAULT_PERSISTENCE] = p.persistence.as_u8();
    }
    for p in &batch.detection_patches {
        let at = *fault_slot(&index, &module_pos, p.fault)?
            .detections
            .get(p.detection)
            .ok_or(AppendError::DetectionRewritten {
                fault: p.fault,
                detection: p.detection,
            })?;
        write_u32(&mut out, at + DET_COUNTER, p.counter);
        out[at + DET_FLAGS] = p.flags;
    }

    for nf in &batch.new_faults {
        let mi = *module_pos
            .get(&nf.module)
            .ok_or(AppendError::UnknownModule(nf.module))?;
        let at = out.len();
        let first_det = (!nf.fault.detections.is_empty()).then_some(at + FAULT_LEN);
        out.resize(at + FAULT_LEN, 0);
        write_fault(&mut out[at..], &nf.fault, first_det);
        let mut det_offsets = Vec::with_capacity(nf.fault.detections.len());
        let nd = nf.fault.detections.len();
        for (j, d) in nf.fault.detections.iter().enumerate() {
            let dat = out.len();
            let next = (j + 1 < nd).then(|| dat + DETECTION_LEN);
            let det_off = detector_off(d.detector, &index)?;
            out.resize(dat + DETECTION_LEN, 0);
            write_detection(&mut out[dat..], d, det_off, next);
            det_offsets.push(dat);
        }
        let slots = &mut index.modules[mi];
        let tail_link = match slots.faults.last() {
            Some(prev) => prev.offset + FAULT_NEXT,
            None => slots.offset + MOD_FIRST_FAULT,
        };
        write_u32(&mut out, tail_link, offset_u32(at));
        slots.faults.push(FaultSlots {
            offset: at,
            detections: det_offsets,
        });
        n_faults += 1;
        n_dets += nd;
    }

    for nd in &batch.new_detections {
        let det_off = detector_off(nd.detection.detector, &index)?;
        let mi = *module_pos
            .get(&nd.fault.module)
            .ok_or(AppendError::UnknownModule(nd.fault.module))?;
        let at = out.len();
        let slots = index.modules[mi]
            .faults
            .get_mut(nd.fault.index)
            .ok_or(AppendError::UnknownFault(nd.fault))?;
        out.resize(at + DETECTION_LEN, 0);
        write_detection(&mut out[at..], &nd.detection, det_off, None);
        let tail_link = match slots.detections.last() {
            Some(&prev) => prev + DET_NEXT,
            None => slots.offset + FAULT_FIRST_DET,
        };
        write_u32(&mut out, tail_link, offset_u32(at));
        slots.detections.push(at);
        n_dets += 1;
    }

    let fresh = header_for([
        header.modules as usize,
        header.diag_resources as usize,
        header.dependencies as usize,
        n_faults,
        n_dets,
    ])?;
    debug_assert_eq!(fresh.total_length as usize, out.len());
    header.faults = fresh.faults;
    header.detections = fresh.detections;
    header.total_length = fresh.total_length;
    header.write(&mut out[..HEADER_LEN]);
    reseal(&mut out);
    // The result must satisfy every rule a fresh image does.
    walk(&out)?;
    Ok(out)
}

fn fault_slot<'i>(
    index: &'i ImageIndex,
    module_pos: &HashMap<ModuleId, usize>,
    r: FaultRef,
) -> Result<&'i FaultSlots, AppendError> {
    let mi = *module_pos
        .get(&r.module)
        .ok_or(AppendError::UnknownModule(r.module))?;
    index.modules[mi]
        .faults
        .get(r.index)
        .ok_or(AppendError::UnknownFault(r))
}

/// Byte range of the constant part (`[32, end)`) for an image header.
pub fn constant_part_end(header: &ShmHeader) -> usize {
    header.constant_end()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_map() -> HealthMap {
        let mut map = HealthMap::new();
        map.add_module(1, None, Severity::Zero).unwrap();
        map.add_module(2, Some(1), Severity::Low).unwrap();
        map.add_module(3, Some(2), Severity::High).unwrap();
        map.add_diag_resource(2, 20, 1).unwrap();
        map.add_diag_resource(3, 30, 2).unwrap();
        map.add_diag_resource(3, 31, 3).unwrap();
        map.add_dependency(2, 3, Severity::Medium).unwrap();
        map.add_fault_with_detection(3, Severity::High, Persistence::Transient, 4, 30, 10, 0xdead)
            .unwrap();
        map
    }

    #[test]
    fn crc_check_values() {
        assert_eq!(crc32(b""), 0);
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn empty_map_is_header_only() {
        let img = serialize(&HealthMap::new()).unwrap();
        assert_eq!(img.len(), 32);
        let h = ShmHeader::parse(&img).unwrap();
        assert_eq!(h.total_length, 32);
        assert_eq!(deserialize(&img).unwrap(), HealthMap::new());
    }

    #[test]
    fn one_module_is_57_bytes() {
        let mut map = HealthMap::new();
        map.add_module(7, None, Severity::Low).unwrap();
        assert_eq!(serialize(&map).unwrap().len(), 57);
    }

    #[test]
    fn round_trip_small() {
        let map = small_map();
        let img = serialize(&map).unwrap();
        assert_eq!(img.len(), image_length(3, 3, 1, 1, 1));
        let back = deserialize(&img).unwrap();
        assert_eq!(back, map);
        assert_eq!(serialize(&back).unwrap(), img);
    }

    #[test]
    fn serialize_rejects_invalid_structure() {
        let map = HealthMap::from_modules_unchecked(vec![Module::new(1, Some(1), Severity::Low)]);
        assert!(matches!(serialize(&map), Err(EncodeError::StructureInvalid(_))));
    }

    #[test]
    fn corrupted_body_byte() {
        let mut img = serialize(&small_map()).unwrap();
        img[40] ^= 0x55;
        assert_eq!(deserialize(&img), Err(DecodeError::BodyCrcMismatch));
    }

    #[test]
    fn corrupted_header_byte() {
        let mut img = serialize(&small_map()).unwrap();
        img[13] ^= 1;
        assert_eq!(deserialize(&img), Err(DecodeError::HeaderCrcMismatch));
    }

    #[test]
    fn truncated_image() {
        let img = serialize(&small_map()).unwrap();
        assert!(matches!(
            deserialize(&img[..img.len() - 1]),
            Err(DecodeError::LengthMismatch { .. })
        ));
        assert!(matches!(
            deserialize(&img[..10]),
            Err(DecodeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut img = serialize(&small_map()).unwrap();
        img[0] = b'X';
        assert_eq!(deserialize(&img), Err(DecodeError::BadMagic));
        let mut img = serialize(&small_map()).unwrap();
        img[4] = 2;
        reseal(&mut img);
        assert_eq!(deserialize(&img), Err(DecodeError::BadVersion(2)));
    }

    #[test]
    fn resealed_link_cycle_is_caught() {
        let map = small_map();
        let mut img = serialize(&map).unwrap();
        // Point the last module's next link back at the first module.
        let last = HEADER_LEN + 2 * MODULE_LEN;
        write_u32(&mut img, last + MOD_NEXT, HEADER_LEN as u32);
        reseal(&mut img);
        assert!(matches!(
            deserialize(&img),
            Err(DecodeError::LinkCycle {
                kind: RecordKind::Module,
                ..
            })
        ));
    }

    #[test]
    fn resealed_misaligned_parent_is_caught() {
        let mut img = serialize(&small_map()).unwrap();
        let second = HEADER_LEN + MODULE_LEN;
        write_u32(&mut img, second + MOD_PARENT, (HEADER_LEN + 3) as u32);
        reseal(&mut img);
        assert!(matches!(
            deserialize(&img),
            Err(DecodeError::OffsetMisaligned { .. })
        ));
        write_u32(&mut img, second + MOD_PARENT, 1 << 30);
        reseal(&mut img);
        assert_eq!(deserialize(&img), Err(DecodeError::OffsetOutOfBounds(1 << 30)));
    }

    #[test]
    fn resealed_parent_cycle_is_structural() {
        let mut img = serialize(&small_map()).unwrap();
        // Make the root its own parent.
        write_u32(&mut img, HEADER_LEN + MOD_PARENT, HEADER_LEN as u32);
        reseal(&mut img);
        assert!(matches!(deserialize(&img), Err(DecodeError::Structure(_))));
    }

    #[test]
    fn append_one_fault_adds_37_bytes() {
        let old = small_map();
        let img = serialize(&old).unwrap();
        let mut new = old.clone();
        new.add_fault_with_detection(2, Severity::Low, Persistence::Transient, 9, 20, 99, 0)
            .unwrap();
        let batch = AppendBatch::between(&old, &new).unwrap();
        assert_eq!(batch.new_faults.len(), 1);
        let out = append_fault_data(&img, &batch).unwrap();
        assert_eq!(out.len(), img.len() + 37);
        assert_eq!(deserialize(&out).unwrap(), new);
    }

    #[test]
    fn append_nothing_is_identity() {
        let img = serialize(&small_map()).unwrap();
        let out = append_fault_data(&img, &AppendBatch::default()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn append_detection_and_patches() {
        let old = small_map();
        let img = serialize(&old).unwrap();
        let mut new = old.clone();
        {
            let f = &mut new.faults_mut(3).unwrap()[0];
            f.detections[0].counter = 5;
            f.persistence = Persistence::Intermittent;
            f.detections.push(FaultDetection::new(31, 500, 7));
        }
        let batch = AppendBatch::between(&old, &new).unwrap();
        assert_eq!(batch.detection_patches.len(), 1);
        assert_eq!(batch.level_patches.len(), 1);
        assert_eq!(batch.new_detections.len(), 1);
        let out = append_fault_data(&img, &batch).unwrap();
        assert_eq!(out.len(), img.len() + DETECTION_LEN);
        assert_eq!(deserialize(&out).unwrap(), new);
    }

    #[test]
    fn between_rejects_constant_changes() {
        let old = small_map();
        let mut modules = old.clone().into_modules();
        modules[1].criticality = Severity::High;
        let new = HealthMap::from_modules_unchecked(modules);
        assert_eq!(
            AppendBatch::between(&old, &new),
            Err(AppendError::ConstantPartChanged(2))
        );
    }
}
