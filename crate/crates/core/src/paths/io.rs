//! Columnar binary ensemble files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 8 | magic `MSAENS\0\x01` |
//! | 8  | 1 | kind (see [`RecordKind`]) |
//! | 9  | 7 | zero padding |
//! | 16 | 8 | paths `M` (u64) |
//! | 24 | 8 | nodes per path (u64) |
//! | 32 | 8 | width per node (u64) |
//! | 40 | 8 | grid steps `N` (u64) |
//! | 48 | 8 | horizon `T` (f64) |
//! | 56 | 8 | seed (u64) |
//! | 64 | … | values as f64, ordered node-major, then component, then path |
//!
//! Several records may be concatenated in one file.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{PathArray, TimeGrid};
use crate::error::{Error, Result};
use crate::scalar::Real;

const MAGIC: [u8; 8] = *b"MSAENS\0\x01";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    State = 1,
    Control = 2,
    Brownian = 3,
    AdjointY = 4,
    AdjointZ = 5,
}

impl RecordKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => Self::State,
            2 => Self::Control,
            3 => Self::Brownian,
            4 => Self::AdjointY,
            5 => Self::AdjointZ,
            other => return Err(Error::Format(format!("unknown record kind {other}"))),
        })
    }
}

pub fn write_record<T: Real, W: Write>(
    w: &mut W,
    kind: RecordKind,
    grid: &TimeGrid<T>,
    seed: u64,
    data: &PathArray<T>,
) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[kind as u8, 0, 0, 0, 0, 0, 0, 0])?;
    for v in [data.paths, data.len, data.width, grid.steps()] {
        w.write_u64::<LittleEndian>(v as u64)?;
    }
    w.write_f64::<LittleEndian>(grid.horizon().as_f64())?;
    w.write_u64::<LittleEndian>(seed)?;
    let mut buf = Vec::with_capacity(data.paths * 8);
    for k in 0..data.len {
        for c in 0..data.width {
            buf.clear();
            for j in 0..data.paths {
                buf.extend_from_slice(&data.at(j, k)[c].as_f64().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

/// Reads one record; returns its kind, grid, seed and values.
pub fn read_record<T: Real, R: Read>(r: &mut R) -> Result<(RecordKind, TimeGrid<T>, u64, PathArray<T>)> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if head[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let kind = RecordKind::from_byte(head[8])?;
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = usize::try_from(r.read_u64::<LittleEndian>()?)
            .map_err(|_| Error::Format("dimension overflows usize".into()))?;
    }
    let [paths, len, width, steps] = dims;
    let horizon = r.read_f64::<LittleEndian>()?;
    let seed = r.read_u64::<LittleEndian>()?;
    let grid = TimeGrid::new(T::lit(horizon), steps)
        .map_err(|e| Error::Format(format!("bad grid: {e}")))?;
    let total = paths
        .checked_mul(len)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::Format("record too large".into()))?;
    let mut data = PathArray::zeros(paths, len, width);
    let mut bytes = vec![0u8; paths * 8];
    debug_assert_eq!(data.data.len(), total);
    for k in 0..len {
        for c in 0..width {
            r.read_exact(&mut bytes)?;
            for j in 0..paths {
                let v = f64::from_le_bytes(bytes[j * 8..j * 8 + 8].try_into().expect("8 bytes"));
                data.at_mut(j, k)[c] = T::lit(v);
            }
        }
    }
    Ok((kind, grid, seed, data))
}
