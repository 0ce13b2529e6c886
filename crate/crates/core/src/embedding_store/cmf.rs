//! CMF1: `"CMF1"`, rows (u32 LE), cols (u32 LE), then rows*cols binary32 LE
//! values in row-major order. No padding, no trailing bytes.

use std::fs;
use std::path::Path;

use super::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const CMF1_MAGIC: &[u8; 4] = b"CMF1";
pub const CMF1_HEADER_LEN: usize = 12;

/// Serializes one matrix as a CMF1 block. Values are rounded to `f32`.
pub fn encode_feature_block(m: &EmbeddingMatrix, out: &mut Vec<u8>) -> Result<()> {
    let rows = u32::try_from(m.rows())
        .map_err(|_| Error::Shape(format!("{} rows exceed u32", m.rows())))?;
    let cols = u32::try_from(m.cols())
        .map_err(|_| Error::Shape(format!("{} cols exceed u32", m.cols())))?;
    out.reserve(CMF1_HEADER_LEN + 4 * m.data().len());
    out.extend_from_slice(CMF1_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for (i, &v) in m.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite {
                row: i / m.cols(),
                col: i % m.cols(),
                value: v,
            });
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

/// Parses one CMF1 block from the front of `bytes`, returning the matrix and
/// the number of bytes consumed. Trailing bytes are left to the caller.
pub fn decode_feature_block(bytes: &[u8]) -> Result<(EmbeddingMatrix, usize)> {
    if bytes.len() < 4 || &bytes[..4] != CMF1_MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < CMF1_HEADER_LEN {
        return Err(Error::Truncated {
            expected: 0,
            found: 0,
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Shape(format!("{rows}x{cols} overflows")))?;
    let payload = &bytes[CMF1_HEADER_LEN..];
    let need = expected
        .checked_mul(4)
        .ok_or_else(|| Error::Shape(format!("{rows}x{cols} overflows")))?;
    if payload.len() < need {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<f64> = payload[..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((
        EmbeddingMatrix::new(rows, cols, data)?,
        CMF1_HEADER_LEN + need,
    ))
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (m, used) = decode_feature_block(&bytes)?;
    if used != bytes.len() {
        return Err(Error::TrailingData {
            extra: bytes.len() - used,
        });
    }
    Ok(m)
}

pub fn save_feature_file(path: impl AsRef<Path>, m: &EmbeddingMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    encode_feature_block(m, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(rows: u32, cols: u32) -> Vec<u8> {
        let mut b = CMF1_MAGIC.to_vec();
        b.extend_from_slice(&rows.to_le_bytes());
        b.extend_from_slice(&cols.to_le_bytes());
        b
    }

    #[test]
    fn one_by_one_zero_is_sixteen_bytes() {
        let m = EmbeddingMatrix::new(1, 1, vec![0.0]).unwrap();
        let mut buf = Vec::new();
        encode_feature_block(&m, &mut buf).unwrap();
        assert_eq!(buf.len(), CMF1_HEADER_LEN + 4);
        assert_eq!(&buf[..4], b"CMF1");
        assert_eq!(&buf[4..12], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&buf[12..], &[0, 0, 0, 0]);
    }

    #[test]
    fn exact_layout() {
        let m = EmbeddingMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        encode_feature_block(&m, &mut buf).unwrap();
        let mut expected = header(2, 3);
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0, -0.5] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(buf, expected);
        let (back, used) = decode_feature_block(&buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_payload() {
        let mut b = header(2, 3);
        for _ in 0..5 {
            b.extend_from_slice(&1.0f32.to_le_bytes());
        }
        assert!(matches!(
            decode_feature_block(&b),
            Err(Error::Truncated {
                expected: 6,
                found: 20
            })
        ));
    }

    #[test]
    fn bad_magic() {
        let mut b = b"CMF2".to_vec();
        b.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(
            decode_feature_block(&b),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            decode_feature_block(b"CM"),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn nan_names_row_and_col() {
        let mut b = header(2, 2);
        for v in [1.0f32, 1.0, 1.0, f32::NAN] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            decode_feature_block(&b),
            Err(Error::NonFinite { row: 1, col: 1, .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected_in_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.cmf");
        let mut b = header(1, 1);
        b.extend_from_slice(&1.0f32.to_le_bytes());
        b.push(0);
        std::fs::write(&p, b).unwrap();
        assert!(matches!(
            load_feature_file(&p),
            Err(Error::TrailingData { extra: 1 })
        ));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let m = EmbeddingMatrix::new(1, 1, vec![0.0]).unwrap();
        let err = save_feature_file("/nonexistent-dir/sub/x.cmf", &m).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn f32_overflow_rejected_on_save() {
        let m = EmbeddingMatrix::new(1, 1, vec![1e300]).unwrap();
        assert!(matches!(
            encode_feature_block(&m, &mut Vec::new()),
            Err(Error::NonFinite { .. })
        ));
    }
}
