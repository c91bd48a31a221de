//! The HHAF feature file: a 16-byte header (`b"HHAF"`, version, T, D as
//! little-endian `u32`) followed by `T * D` little-endian `f32` values in
//! row-major order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::datamodel::FeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"HHAF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 16;
/// Default cap on `T * D` accepted from a header (1 GiB of payload).
pub const DEFAULT_MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub version: u32,
    pub frames: u32,
    pub dim: u32,
}

impl FeatureFileHeader {
    pub fn to_bytes(&self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..12].copy_from_slice(&self.frames.to_le_bytes());
        b[12..16].copy_from_slice(&self.dim.to_le_bytes());
        b
    }

    pub fn payload_len(&self) -> u64 {
        (self.frames as u64 * self.dim as u64).saturating_mul(4)
    }
}

/// Write `seq` as HHAF. Values are narrowed to `f32`. Returns the byte count.
pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<u64> {
    let values = seq.values();
    let header = FeatureFileHeader {
        version: VERSION,
        frames: u32::try_from(values.rows())
            .map_err(|_| Error::shape("feature rows", "<= u32::MAX", values.rows()))?,
        dim: u32::try_from(values.cols())
            .map_err(|_| Error::shape("feature cols", "<= u32::MAX", values.cols()))?,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&header.to_bytes()).map_err(io)?;
    for &v in values.as_slice() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(HEADER_LEN + header.payload_len())
}

/// Read and validate an HHAF file, rejecting non-finite values.
pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    read_features_with_limit(path, DEFAULT_MAX_ELEMENTS)
}

pub fn read_features_with_limit(path: &Path, max_elements: u64) -> Result<FeatureSequence> {
    FeatureSequence::new(read_matrix(path, max_elements)?)
}

/// Header-validated read that leaves non-finite payload values in place.
pub(crate) fn read_features_unchecked(path: &Path) -> Result<FeatureSequence> {
    Ok(FeatureSequence::new_unchecked(read_matrix(path, DEFAULT_MAX_ELEMENTS)?))
}

pub fn read_header(path: &Path) -> Result<FeatureFileHeader> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    parse_header(&mut file, path, file_len)
}

fn parse_header(file: &mut File, path: &Path, file_len: u64) -> Result<FeatureFileHeader> {
    if file_len < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected: HEADER_LEN,
            found: file_len,
        });
    }
    let mut buf = [0u8; 16];
    file.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    let magic: [u8; 4] = buf[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            found: magic,
        });
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
    let header = FeatureFileHeader {
        version: word(4),
        frames: word(8),
        dim: word(12),
    };
    if header.version != VERSION {
        return Err(Error::BadVersion {
            path: path.to_owned(),
            found: header.version,
        });
    }
    if header.frames == 0 || header.dim == 0 {
        return Err(Error::EmptyHeader {
            path: path.to_owned(),
            rows: header.frames,
            cols: header.dim,
        });
    }
    Ok(header)
}

fn read_matrix(path: &Path, max_elements: u64) -> Result<Matrix> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let header = parse_header(&mut file, path, file_len)?;
    let elements = header.frames as u64 * header.dim as u64;
    if elements > max_elements {
        return Err(Error::HeaderTooLarge {
            path: path.to_owned(),
            rows: header.frames,
            cols: header.dim,
            limit: max_elements,
        });
    }
    let expected = HEADER_LEN.saturating_add(header.payload_len());
    if file_len != expected {
        // Trailing bytes are as suspicious as missing ones.
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected,
            found: file_len,
        });
    }
    let mut bytes = vec![0u8; header.payload_len() as usize];
    file.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Matrix::from_vec(header.frames as usize, header.dim as usize, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: usize, cols: usize) -> FeatureSequence {
        let data = (0..rows * cols).map(|i| i as f64 * 0.25 - 1.0).collect();
        FeatureSequence::new(Matrix::from_vec(rows, cols, data)).unwrap()
    }

    #[test]
    fn file_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.hhaf");
        assert_eq!(write_features(&seq(1, 1), &p).unwrap(), 20);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 20);
        assert_eq!(write_features(&seq(3, 2), &p).unwrap(), 40);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 40);
    }

    #[test]
    fn round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.hhaf");
        let s = seq(4, 3);
        write_features(&s, &p).unwrap();
        assert_eq!(read_features(&p).unwrap(), s);
        let h = read_header(&p).unwrap();
        assert_eq!((h.version, h.frames, h.dim), (1, 4, 3));
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.hhaf");
        write_features(&seq(2, 2), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_features(&p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.hhaf");
        write_features(&seq(2, 2), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 2;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_features(&p), Err(Error::BadVersion { found: 2, .. })));
    }

    #[test]
    fn truncated_by_four_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.hhaf");
        write_features(&seq(3, 2), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        match read_features(&p) {
            Err(Error::Truncated { expected, found, .. }) => {
                assert_eq!((expected, found), (40, 36));
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn hostile_header_rejected_before_allocation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.hhaf");
        let header = FeatureFileHeader {
            version: 1,
            frames: u32::MAX,
            dim: u32::MAX,
        };
        std::fs::write(&p, header.to_bytes()).unwrap();
        assert!(matches!(read_features(&p), Err(Error::HeaderTooLarge { .. })));
        assert!(matches!(
            read_features_with_limit(&p, u64::MAX),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.hhaf");
        let header = FeatureFileHeader {
            version: 1,
            frames: 1,
            dim: 2,
        };
        let mut bytes = header.to_bytes().to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_features(&p),
            Err(Error::NonFiniteFeature { row: 0, col: 1 })
        ));
    }
}
