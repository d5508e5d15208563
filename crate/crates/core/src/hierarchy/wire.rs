use thiserror::Error;

use crate::resource_map::{ResourceMap, RmEntry, RmError};
use crate::shm::crc32;

pub const MAGIC: [u8; 4] = *b"RMS1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;
pub const TRAILER_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary {
    pub node: u32,
    pub entries: Vec<RmEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("{0} entries do not fit in one summary")]
    TooManyEntries(usize),
    #[error("message of {0} bytes is shorter than the fixed part")]
    Truncated(usize),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("declared length {declared} but message has {actual} bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("entry {index}: {source}")]
    BadEntry { index: usize, source: RmError },
}

pub fn encode_summary(node: u32, rm: &ResourceMap) -> Result<Vec<u8>, WireError> {
    encode_entries(node, rm.entries())
}

pub fn encode_entries(node: u32, entries: &[RmEntry]) -> Result<Vec<u8>, WireError> {
    let count = u16::try_from(entries.len()).map_err(|_| WireError::TooManyEntries(entries.len()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + RmEntry::ENCODED_LEN * entries.len() + TRAILER_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&node.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        out.extend_from_slice(&e.to_bytes());
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// The CRC is checked before any field is interpreted.
pub fn decode_summary(bytes: &[u8]) -> Result<Summary, WireError> {
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(WireError::Truncated(bytes.len()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32(body);
    if stored != computed {
        return Err(WireError::CrcMismatch { stored, computed });
    }
    if body[0..4] != MAGIC {
        return Err(WireError::BadMagic);
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != VERSION {
        return Err(WireError::BadVersion(version));
    }
    let node = u32::from_le_bytes(body[6..10].try_into().expect("4 bytes"));
    let count = usize::from(u16::from_le_bytes([body[10], body[11]]));
    let declared = HEADER_LEN + RmEntry::ENCODED_LEN * count + TRAILER_LEN;
    if declared != bytes.len() {
        return Err(WireError::LengthMismatch {
            declared,
            actual: bytes.len(),
        });
    }
    let entries = body[HEADER_LEN..]
        .chunks_exact(RmEntry::ENCODED_LEN)
        .enumerate()
        .map(|(index, raw)| {
            RmEntry::from_bytes(raw.try_into().expect("entry width"))
                .map_err(|source| WireError::BadEntry { index, source })
        })
        .collect::<Result<_, _>>()?;
    Ok(Summary { node, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModuleStatus, Persistence, Severity};

    fn entry(id: u32, s: Severity) -> RmEntry {
        RmEntry {
            module_id: id,
            worst_severity: s,
            worst_persistence: if s == Severity::Zero {
                Persistence::Zero
            } else {
                Persistence::Transient
            },
            status: if s == Severity::Zero {
                ModuleStatus::Available
            } else {
                ModuleStatus::OwnFault
            },
        }
    }

    #[test]
    fn empty_is_sixteen_bytes() {
        let bytes = encode_entries(7, &[]).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(decode_summary(&bytes).unwrap(), Summary { node: 7, entries: vec![] });
    }

    #[test]
    fn nine_entries_layout() {
        let entries: Vec<_> = (0..9).map(|i| entry(i, Severity::Low)).collect();
        let bytes = encode_entries(0x0102_0304, &entries).unwrap();
        assert_eq!(bytes.len(), 79);
        assert_eq!(&bytes[..12], b"RMS1\x01\x00\x04\x03\x02\x01\x09\x00");
        assert_eq!(decode_summary(&bytes).unwrap().entries, entries);
    }

    #[test]
    fn any_flipped_byte_fails_crc() {
        let entries = vec![entry(1, Severity::High), entry(2, Severity::Zero)];
        let bytes = encode_entries(1, &entries).unwrap();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(matches!(
                decode_summary(&bad),
                Err(WireError::CrcMismatch { .. })
            ));
        }
        assert_eq!(decode_summary(&bytes[..10]), Err(WireError::Truncated(10)));
    }

    #[test]
    fn too_many_entries() {
        let entries = vec![entry(1, Severity::Zero); 65_536];
        assert_eq!(
            encode_entries(1, &entries),
            Err(WireError::TooManyEntries(65_536))
        );
    }
}
