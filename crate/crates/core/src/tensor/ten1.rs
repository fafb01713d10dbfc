//! `TEN1` binary tensor files.
//!
//! Layout: magic `TEN1`, one byte of rank, `rank` little-endian `u32` dims,
//! then the row-major payload as little-endian `f32`.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"TEN1";

#[derive(Debug, Error)]
pub enum Ten1Error {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated TEN1 data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after TEN1 payload")]
    Trailing,
    #[error("rank {0} exceeds 255")]
    RankTooLarge(usize),
    #[error("dimension {0} exceeds u32")]
    DimTooLarge(usize),
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>, Ten1Error> {
    let rank = t.rank();
    if rank > u8::MAX as usize {
        return Err(Ten1Error::RankTooLarge(rank));
    }
    let mut out = Vec::with_capacity(5 + 4 * rank + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(rank as u8);
    for &d in t.shape() {
        let d32 = u32::try_from(d).map_err(|_| Ten1Error::DimTooLarge(d))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, Ten1Error> {
    let need = |expected: usize| {
        if bytes.len() < expected {
            Err(Ten1Error::Truncated {
                expected,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(5)?;
    if &bytes[..4] != MAGIC {
        return Err(Ten1Error::BadMagic);
    }
    let rank = bytes[4] as usize;
    let header = 5 + 4 * rank;
    need(header)?;
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let total = header + 4 * numel;
    need(total)?;
    if bytes.len() > total {
        return Err(Ten1Error::Trailing);
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::new(shape, data).expect("numel matches payload"))
}

pub fn write(path: &Path, t: &Tensor) -> Result<(), Ten1Error> {
    let bytes = encode(t)?;
    fs::write(path, bytes).map_err(|source| Ten1Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read(path: &Path) -> Result<Tensor, Ten1Error> {
    let bytes = fs::read(path).map_err(|source| Ten1Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"TEN1");
        assert_eq!(b[4], 2);
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(&b[13..17], &1.0f32.to_le_bytes());
        assert_eq!(&b[17..21], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 21);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::ones(&[3]);
        let b = encode(&t).unwrap();
        assert!(matches!(
            decode(&b[..b.len() - 1]),
            Err(Ten1Error::Truncated { .. })
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Ten1Error::BadMagic)));
        let mut long = b;
        long.push(0);
        assert!(matches!(decode(&long), Err(Ten1Error::Trailing)));
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(shape in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let mut rng = crate::rng::Rng64::new(seed);
            let mut t = Tensor::randn(&shape, 3.0, &mut rng);
            t.round_to_f32();
            let back = decode(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
