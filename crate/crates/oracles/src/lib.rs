//! Slow, obviously-correct reference computations used to cross-check the
//! `healthmap` crate, plus seeded generators for random inputs.
//!
//! Nothing here calls into the code under test except for plain data types
//! and the map builder.

pub mod classify;
pub mod crc;
pub mod gen;
pub mod layout;
pub mod propagation;

/// Footprint totals by plain arithmetic on the entity-count table.
pub fn footprint_bytes(cores: u64) -> (u64, u64) {
    let m = 16 * cores + 10;
    let r = 3 * m;
    let d = m;
    let f = 2 * d;
    let fd = 10 * f;
    (32 + 25 * m + 13 * r + 9 * d + 12 * f + 25 * fd, 7 * m)
}
