//! `MOTN` binary pose-sequence files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 4    | magic `MOTN`                        |
//! | 4      | 2    | format version (1)                  |
//! | 6      | 1    | dtype flag: 0 = f32, 1 = f64        |
//! | 7      | 1    | reserved, 0                         |
//! | 8      | 4    | num_frames (u32)                    |
//! | 12     | 4    | joints S (u32)                      |
//! | 16     | 4    | joint_dim M (u32)                   |
//! | 20     | 8    | frame rate in Hz (f64)              |
//! | 28     | n    | payload, frame-major `[N, S, M]`    |
//! | 28+n   | 4    | CRC32 of bytes `0..28+n`            |

use std::fs;
use std::path::Path;

use crate::data::PoseSequence;
use crate::error::{Error, FormatError, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"MOTN";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 28;

pub fn encode_motion(seq: &PoseSequence, dtype: DType) -> Vec<u8> {
    let shape = seq.frames.shape();
    let mut buf = Vec::with_capacity(HEADER_LEN + seq.frames.len() * dtype.size_bytes() + 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(match dtype {
        DType::F32 => 0,
        DType::F64 => 1,
    });
    buf.push(0);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&seq.frame_rate_hz.to_le_bytes());
    for &v in seq.frames.data() {
        match dtype {
            DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn need(bytes: &[u8], n: usize) -> Result<(), FormatError> {
    if bytes.len() < n {
        return Err(FormatError::Truncated {
            needed: n,
            available: bytes.len(),
        });
    }
    Ok(())
}

fn u32_at(b: &[u8], off: usize) -> usize {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap()) as usize
}

pub fn decode_motion(bytes: &[u8]) -> Result<(PoseSequence, DType), FormatError> {
    need(bytes, 4)?;
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    need(bytes, HEADER_LEN)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let dtype = match bytes[6] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(FormatError::Malformed(format!("dtype flag {other}"))),
    };
    let dims = [u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16)];
    if dims.iter().any(|&d| d == 0) {
        return Err(FormatError::Malformed(format!("zero dimension in {dims:?}")));
    }
    let frame_rate_hz = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| FormatError::Malformed("dimensions overflow".into()))?;
    let payload = count * dtype.size_bytes();
    let total = HEADER_LEN + payload + 4;
    need(bytes, total)?;
    if bytes.len() > total {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - total
        )));
    }
    let stored = u32::from_le_bytes(bytes[total - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..total - 4]);
    if stored != computed {
        return Err(FormatError::Crc { stored, computed });
    }
    let body = &bytes[HEADER_LEN..HEADER_LEN + payload];
    let data: Vec<f64> = match dtype {
        DType::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let frames = Tensor::new(dims.to_vec(), data).map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok((
        PoseSequence {
            frames,
            frame_rate_hz,
        },
        dtype,
    ))
}

pub fn write_motion(path: impl AsRef<Path>, seq: &PoseSequence, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_motion(seq, dtype)).map_err(|e| Error::from(e).in_file(path))
}

pub fn read_motion(path: impl AsRef<Path>) -> Result<PoseSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    let (seq, _) = decode_motion(&bytes).map_err(|e| Error::from(e).in_file(path))?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn sample(seed: u64, frames: usize) -> PoseSequence {
        let mut rng = Rng::seed_from(seed);
        PoseSequence::new(Tensor::from_fn(&[frames, 4, 3], |_| rng.normal())).unwrap()
    }

    #[test]
    fn f32_files_round_trip_f32_values() {
        let seq = sample(1, 9);
        let rounded = PoseSequence::new(seq.frames.to_dtype(DType::F32)).unwrap();
        let (back, dtype) = decode_motion(&encode_motion(&rounded, DType::F32)).unwrap();
        assert_eq!(dtype, DType::F32);
        assert_eq!(back.frames.data(), rounded.frames.data());
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode_motion(&sample(2, 5), DType::F64);
        for cut in [2, 10, bytes.len() - 1, bytes.len() - 30] {
            assert!(matches!(
                decode_motion(&bytes[..cut]),
                Err(FormatError::Truncated { .. })
            ));
        }
    }

    #[test]
    fn corruption_is_reported() {
        let mut bytes = encode_motion(&sample(3, 5), DType::F64);
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        assert!(matches!(decode_motion(&bytes), Err(FormatError::Crc { .. })));
        let mut bytes = encode_motion(&sample(3, 5), DType::F64);
        bytes[40] ^= 0x01;
        assert!(matches!(decode_motion(&bytes), Err(FormatError::Crc { .. })));
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = encode_motion(&sample(4, 2), DType::F32);
        bytes[0] = b'X';
        assert!(matches!(decode_motion(&bytes), Err(FormatError::BadMagic { .. })));
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(seed in any::<u64>(), frames in 1usize..20) {
            let seq = sample(seed, frames);
            let bytes = encode_motion(&seq, DType::F64);
            let (back, _) = decode_motion(&bytes).unwrap();
            prop_assert_eq!(&back, &seq);
            prop_assert_eq!(encode_motion(&back, DType::F64), bytes);
        }
    }
}
