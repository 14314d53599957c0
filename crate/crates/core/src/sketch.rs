//! Unique state-action counting: an exact hash-set counter and a dense,
//! mergeable HyperLogLog sketch.

use std::collections::HashSet;

use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::dataset::Dataset;

pub const DEFAULT_PRECISION: u8 = 14;
pub const DEFAULT_SEED: u64 = 0x5ac0_0dd5_ca7a_1095;
const MAGIC: &[u8; 4] = b"HLL1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SketchError {
    #[error("precision {0} outside [4, 18]")]
    Precision(u8),
    #[error("cannot merge sketches with precision {0} and {1}")]
    PrecisionMismatch(u8, u8),
    #[error("cannot merge sketches with hash seeds {0:#x} and {1:#x}")]
    SeedMismatch(u64, u64),
    #[error("malformed sketch bytes: {0}")]
    Decode(String),
}

/// Canonical key bytes: state as 8-byte big-endian followed by action as
/// 4-byte big-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SaKey([u8; 12]);

impl SaKey {
    pub fn new(s: u64, a: u32) -> Self {
        let mut bytes = [0u8; 12];
        bytes[..8].copy_from_slice(&s.to_be_bytes());
        bytes[8..].copy_from_slice(&a.to_be_bytes());
        Self(bytes)
    }

    pub fn bytes(&self) -> &[u8; 12] {
        &self.0
    }

    pub fn state(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().expect("8 bytes"))
    }

    pub fn action(&self) -> u32 {
        u32::from_be_bytes(self.0[8..].try_into().expect("4 bytes"))
    }
}

/// Exact `u_{s,a}(D)`.
pub fn exact_unique_count(ds: &Dataset) -> u64 {
    ds.transitions().map(|t| SaKey::new(t.s, t.a)).collect::<HashSet<_>>().len() as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CardinalitySketch {
    precision: u8,
    seed: u64,
    registers: Vec<u8>,
}

impl CardinalitySketch {
    pub fn new(precision: u8) -> Result<Self, SketchError> {
        Self::with_seed(precision, DEFAULT_SEED)
    }

    pub fn with_seed(precision: u8, seed: u64) -> Result<Self, SketchError> {
        if !(4..=18).contains(&precision) {
            return Err(SketchError::Precision(precision));
        }
        Ok(Self { precision, seed, registers: vec![0; 1 << precision] })
    }

    pub fn precision(&self) -> u8 {
        self.precision
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn registers(&self) -> &[u8] {
        &self.registers
    }

    pub fn insert(&mut self, key: &SaKey) {
        self.insert_hash(xxh3_64_with_seed(key.bytes(), self.seed));
    }

    /// Top `p` bits pick the register; the rank is one plus the leading zeros
    /// of the remaining `64 - p` bits.
    fn insert_hash(&mut self, h: u64) {
        let p = self.precision as u32;
        let idx = (h >> (64 - p)) as usize;
        let rest = h << p;
        let rank = (rest.leading_zeros().min(64 - p) + 1) as u8;
        let reg = &mut self.registers[idx];
        if rank > *reg {
            *reg = rank;
        }
    }

    pub fn insert_dataset(&mut self, ds: &Dataset) {
        for t in ds.transitions() {
            self.insert(&SaKey::new(t.s, t.a));
        }
    }

    fn alpha(m: usize) -> f64 {
        match m {
            16 => 0.673,
            32 => 0.697,
            64 => 0.709,
            _ => 0.7213 / (1.0 + 1.079 / m as f64),
        }
    }

    /// Harmonic-mean estimate with linear counting for the small range.
    ///
    /// The switch to the harmonic mean happens once the linear-counting value
    /// itself passes `2.5 m`, and the harmonic mean is floored at `2.5 m`.
    /// Both pieces only grow as registers grow, so the estimate never
    /// decreases under insertion.
    pub fn estimate(&self) -> f64 {
        let m = self.registers.len() as f64;
        let (sum, zeros) = self.registers.iter().fold((0.0f64, 0usize), |(sum, zeros), &r| {
            (sum + (-(r as i32) as f64).exp2(), zeros + (r == 0) as usize)
        });
        let threshold = 2.5 * m;
        if zeros > 0 {
            let linear = m * (m / zeros as f64).ln();
            if linear <= threshold {
                return linear;
            }
        }
        let raw = Self::alpha(self.registers.len()) * m * m / sum;
        raw.max(threshold)
    }

    /// Rounded estimate.
    pub fn count(&self) -> u64 {
        self.estimate().round() as u64
    }

    pub fn merge(&self, other: &Self) -> Result<Self, SketchError> {
        let mut out = self.clone();
        out.merge_from(other)?;
        Ok(out)
    }

    pub fn merge_from(&mut self, other: &Self) -> Result<(), SketchError> {
        if self.precision != other.precision {
            return Err(SketchError::PrecisionMismatch(self.precision, other.precision));
        }
        if self.seed != other.seed {
            return Err(SketchError::SeedMismatch(self.seed, other.seed));
        }
        for (a, &b) in self.registers.iter_mut().zip(&other.registers) {
            *a = (*a).max(b);
        }
        Ok(())
    }

    /// `"HLL1"`, precision byte, big-endian seed, then one byte per register.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.registers.len());
        out.extend_from_slice(MAGIC);
        out.push(self.precision);
        out.extend_from_slice(&self.seed.to_be_bytes());
        out.extend_from_slice(&self.registers);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SketchError> {
        if bytes.len() < 13 || &bytes[..4] != MAGIC {
            return Err(SketchError::Decode("missing HLL1 header".into()));
        }
        let precision = bytes[4];
        let seed = u64::from_be_bytes(bytes[5..13].try_into().expect("8 bytes"));
        let mut sk = Self::with_seed(precision, seed)?;
        let regs = &bytes[13..];
        if regs.len() != sk.registers.len() {
            return Err(SketchError::Decode(format!("expected {} registers, found {}", sk.registers.len(), regs.len())));
        }
        if let Some(bad) = regs.iter().find(|&&r| r > 64) {
            return Err(SketchError::Decode(format!("register value {bad} exceeds 64")));
        }
        sk.registers.copy_from_slice(regs);
        Ok(sk)
    }
}

/// Sketches each shard on its own thread and merges the results.
pub fn sketch_sharded(shards: &[&[SaKey]], precision: u8, seed: u64) -> Result<CardinalitySketch, SketchError> {
    use rayon::prelude::*;
    let parts: Vec<CardinalitySketch> = shards
        .par_iter()
        .map(|keys| {
            let mut sk = CardinalitySketch::with_seed(precision, seed)?;
            keys.iter().for_each(|k| sk.insert(k));
            Ok(sk)
        })
        .collect::<Result<_, SketchError>>()?;
    let mut out = CardinalitySketch::with_seed(precision, seed)?;
    for p in &parts {
        out.merge_from(p)?;
    }
    Ok(out)
}
