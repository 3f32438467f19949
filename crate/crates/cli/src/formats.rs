//! On-disk formats.
//!
//! HBT (binarized tensor), all integers little-endian:
//!
//! ```text
//! "HBT1"            4 bytes
//! version           u32 (= 1)
//! rank              u32
//! dims              u32 × rank
//! max_bits          u8
//! element_count     u64
//! mask              u8 × element_count   (bitwidth 1..=8 per element)
//! planes            max_bits × { scale f32, activity u64 × W, signs u64 × W }
//! ```
//!
//! with `W = ceil(element_count / 64)` words per bitmap, LSB-first.
//!
//! RAWTENS1 (raw tensor): `"RAWTENS1"`, rank u32, dims u32 × rank, then
//! `f32 × product(dims)`.

use std::io::{self, Read, Write};

use hbnn_core::packed::{words_for, PackedPlane};
use hbnn_core::{BitMask, HeterogeneousBinaryTensor, PackedPlanes, Tensor, MAX_BITS};
use thiserror::Error;

pub const HBT_MAGIC: &[u8; 4] = b"HBT1";
pub const HBT_VERSION: u32 = 1;
pub const RAW_MAGIC: &[u8; 8] = b"RAWTENS1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("malformed file: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, FormatError>;

fn malformed(msg: impl Into<String>) -> FormatError {
    FormatError::Malformed(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_dims(r: &mut impl Read) -> Result<Vec<usize>> {
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 16 {
        return Err(malformed(format!("rank {rank}")));
    }
    (0..rank).map(|_| Ok(read_u32(r)? as usize)).collect()
}

fn write_dims(w: &mut impl Write, dims: &[usize]) -> Result<()> {
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| malformed(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn check_magic(r: &mut impl Read, magic: &[u8]) -> Result<()> {
    let mut got = vec![0u8; magic.len()];
    r.read_exact(&mut got)?;
    if got != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    Ok(())
}

/// Writes `h` in HBT layout. Plane scales are stored as `f32`.
pub fn write_hbt(w: &mut impl Write, h: &HeterogeneousBinaryTensor) -> Result<()> {
    let packed = PackedPlanes::pack(h);
    w.write_all(HBT_MAGIC)?;
    w.write_all(&HBT_VERSION.to_le_bytes())?;
    write_dims(w, h.shape())?;
    w.write_all(&[h.max_bits() as u8])?;
    w.write_all(&(h.len() as u64).to_le_bytes())?;
    w.write_all(h.mask().widths())?;
    for p in packed.planes() {
        w.write_all(&(p.scale as f32).to_le_bytes())?;
        for word in &p.active {
            w.write_all(&word.to_le_bytes())?;
        }
        for word in &p.signs {
            w.write_all(&word.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads an HBT file, checking that the mask agrees with the plane activity
/// bitmaps.
pub fn read_hbt(r: &mut impl Read) -> Result<HeterogeneousBinaryTensor> {
    check_magic(r, HBT_MAGIC)?;
    let version = read_u32(r)?;
    if version != HBT_VERSION {
        return Err(FormatError::Version(version));
    }
    let dims = read_dims(r)?;
    let mut mb = [0u8; 1];
    r.read_exact(&mut mb)?;
    let max_bits = mb[0] as usize;
    if max_bits == 0 || max_bits > MAX_BITS as usize {
        return Err(malformed(format!("max_bits {max_bits}")));
    }
    let count = read_u64(r)? as usize;
    if dims.iter().product::<usize>() != count {
        return Err(malformed(format!("dims {dims:?} do not hold {count} elements")));
    }
    let mut mask = vec![0u8; count];
    r.read_exact(&mut mask)?;
    let words = words_for(count);
    let mut planes = Vec::with_capacity(max_bits);
    for _ in 0..max_bits {
        let scale = read_f32(r)? as f64;
        let active = (0..words).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
        let signs = (0..words).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
        planes.push(PackedPlane { scale, signs, active });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(malformed("trailing bytes"));
    }
    let packed = PackedPlanes::from_raw(count, planes).map_err(|e| malformed(e.to_string()))?;
    if packed.widths() != mask {
        return Err(malformed("mask does not match plane activity"));
    }
    if mask.iter().copied().max().unwrap_or(0) as usize != max_bits {
        return Err(malformed("max_bits does not match mask"));
    }
    BitMask::new(dims.clone(), mask).map_err(|e| malformed(e.to_string()))?;
    packed.unpack(dims).map_err(|e| malformed(e.to_string()))
}

pub fn write_raw(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(RAW_MAGIC)?;
    write_dims(w, t.shape())?;
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raw(r: &mut impl Read) -> Result<Tensor> {
    check_magic(r, RAW_MAGIC)?;
    let dims = read_dims(r)?;
    let n: usize = dims.iter().product();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 4 * n {
        return Err(malformed(format!("{} data bytes for {n} values", bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(dims, data).map_err(|e| malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hbnn_core::binarize::hetero_binarize;

    fn example() -> HeterogeneousBinaryTensor {
        let t = Tensor::from_vec(vec![0.2, -0.9, 0.6, -0.1]);
        hetero_binarize(&t, &BitMask::new(vec![4], vec![2, 1, 2, 1]).unwrap()).unwrap()
    }

    #[test]
    fn hbt_layout() {
        let mut buf = Vec::new();
        write_hbt(&mut buf, &example()).unwrap();
        assert_eq!(&buf[..4], b"HBT1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 4);
        assert_eq!(buf[16], 2);
        assert_eq!(u64::from_le_bytes(buf[17..25].try_into().unwrap()), 4);
        assert_eq!(&buf[25..29], &[2, 1, 2, 1]);
        // plane 1: scale, activity 0b1111, signs +,-,+,- = 0b0101
        assert_eq!(u64::from_le_bytes(buf[33..41].try_into().unwrap()), 0b1111);
        assert_eq!(u64::from_le_bytes(buf[41..49].try_into().unwrap()), 0b0101);
        assert_eq!(buf.len(), 29 + 2 * (4 + 16));
    }

    #[test]
    fn hbt_rejects_corruption() {
        let mut buf = Vec::new();
        write_hbt(&mut buf, &example()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_hbt(&mut bad.as_slice()), Err(FormatError::BadMagic { .. })));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_hbt(&mut bad.as_slice()), Err(FormatError::Version(2))));
        let mut bad = buf.clone();
        bad[25] = 1;
        assert!(read_hbt(&mut bad.as_slice()).is_err());
        assert!(read_hbt(&mut &buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_hbt(&mut long.as_slice()).is_err());
    }

    #[test]
    fn raw_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.25, 0.0, 3.0, -0.125]).unwrap();
        let mut buf = Vec::new();
        write_raw(&mut buf, &t).unwrap();
        assert_eq!(&buf[..8], b"RAWTENS1");
        assert_eq!(read_raw(&mut buf.as_slice()).unwrap(), t);
        assert!(read_raw(&mut &buf[..buf.len() - 2]).is_err());
    }
}
