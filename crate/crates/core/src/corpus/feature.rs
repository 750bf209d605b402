//! FEAT binary feature files.
//!
//! Layout (little-endian): magic `FEAT`, u32 version (1), u32 rows, u32 dim,
//! then `rows * dim` f32 values in row-major order. No padding, no trailer.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, FormatError, Result};

pub const FEAT_MAGIC: [u8; 4] = *b"FEAT";
pub const FEAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Per-window trunk features of one video (or the sampled clips of one
/// dictionary entry). Row `t` describes the 16-frame window starting at frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "feature sequence must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite feature value at flat index {i}"
            )));
        }
        Ok(Self { data })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f32> {
        self.data.row(t)
    }

    pub fn row_f64(&self, t: usize) -> Array1<f64> {
        self.data.row(t).mapv(f64::from)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }
}

/// Header fields of a FEAT file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatHeader {
    pub rows: u32,
    pub dim: u32,
}

pub fn encode_feature(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + seq.data.len() * 4);
    out.extend_from_slice(&FEAT_MAGIC);
    out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for v in seq.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_header(bytes: &[u8]) -> Result<FeatHeader, FormatError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != FEAT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: FEAT_MAGIC,
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FEAT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: FEAT_MAGIC,
            found: magic,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEAT_VERSION {
        return Err(FormatError::Version {
            expected: FEAT_VERSION,
            found: version,
        });
    }
    let rows = word(8);
    let dim = word(12);
    if rows == 0 || dim == 0 {
        return Err(FormatError::Shape { rows, cols: dim });
    }
    Ok(FeatHeader { rows, dim })
}

pub fn decode_feature(bytes: &[u8]) -> Result<FeatureSequence, FormatError> {
    let header = parse_header(bytes)?;
    let count = header.rows as u64 * header.dim as u64;
    let expected = HEADER_LEN as u64 + count * 4;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(FormatError::Truncated { expected, found });
    }
    if found > expected {
        return Err(FormatError::Trailing(found - expected));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(i));
    }
    let data = Array2::from_shape_vec((header.rows as usize, header.dim as usize), values)
        .expect("shape checked against payload length");
    Ok(FeatureSequence { data })
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads and checks only the 16-byte header plus the payload length.
pub fn read_feature_header(path: impl AsRef<Path>) -> Result<FeatHeader> {
    let path = path.as_ref();
    let fmt = |source| Error::Format {
        path: path.to_path_buf(),
        source,
    };
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let mut head = Vec::with_capacity(HEADER_LEN);
    {
        use std::io::Read;
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        f.take(HEADER_LEN as u64)
            .read_to_end(&mut head)
            .map_err(|e| Error::io(path, e))?;
    }
    let header = parse_header(&head).map_err(fmt)?;
    let expected = HEADER_LEN as u64 + header.rows as u64 * header.dim as u64 * 4;
    if meta.len() < expected {
        return Err(fmt(FormatError::Truncated {
            expected,
            found: meta.len(),
        }));
    }
    if meta.len() > expected {
        return Err(fmt(FormatError::Trailing(meta.len() - expected)));
    }
    Ok(header)
}

pub fn write_feature_file(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_feature(seq))
        .map_err(|e| Error::io(path, e))
}
