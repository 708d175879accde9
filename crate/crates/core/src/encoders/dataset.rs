//! Sample records and the on-disk dataset format.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! magic           8 bytes  "FPMDATA\0"
//! version         u32      currently 1
//! region_count    u32      K
//! image_raw_dim   u32
//! max_words       u32      n
//! text_raw_dim    u32
//! identity_count  u32
//! sample_count    u64
//! then per sample:
//!   identity      u32
//!   text_len      u32
//!   strips        K * image_raw_dim f64, row-major
//!   tokens        n * text_raw_dim f64, row-major, rows >= text_len are padding
//! ```
//!
//! Synthetic generation metadata is only carried by the JSON export.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticMeta;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"FPMDATA\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub identity: usize,
    /// `[K, image_raw_dim]`
    pub image: Tensor,
    /// `[n, text_raw_dim]`, dense with padding rows after `text_len`.
    pub tokens: Tensor,
    pub text_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDims {
    pub region_count: usize,
    pub image_raw_dim: usize,
    pub max_words: usize,
    pub text_raw_dim: usize,
    pub identity_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dims: DatasetDims,
    pub samples: Vec<Sample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<SyntheticMeta>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        for (i, s) in self.samples.iter().enumerate() {
            if s.identity >= d.identity_count {
                return Err(Error::Data(format!(
                    "sample {i}: identity {} >= {}",
                    s.identity, d.identity_count
                )));
            }
            if s.image.shape() != [d.region_count, d.image_raw_dim] {
                return Err(Error::Data(format!("sample {i}: image shape {:?}", s.image.shape())));
            }
            if s.tokens.shape() != [d.max_words, d.text_raw_dim] {
                return Err(Error::Data(format!("sample {i}: token shape {:?}", s.tokens.shape())));
            }
            if s.text_len == 0 || s.text_len > d.max_words {
                return Err(Error::Data(format!("sample {i}: text length {}", s.text_len)));
            }
        }
        Ok(())
    }

    /// Splits sample indices into (train, held-out) by identity.
    ///
    /// The held-out identities are the last `round(identity_count·fraction)`
    /// ids (at least one when `fraction > 0`). Contiguous blocks keep the
    /// generator's near-duplicate identity chains together.
    pub fn split_by_identity(&self, fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("held-out fraction {fraction} not in [0, 1)")));
        }
        let n = self.dims.identity_count;
        let mut held = (n as f64 * fraction).round() as usize;
        if fraction > 0.0 {
            held = held.max(1);
        }
        if held >= n && n > 0 {
            return Err(Error::Config("held-out split would leave no training identities".into()));
        }
        let cutoff = n - held;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, s) in self.samples.iter().enumerate() {
            if s.identity < cutoff {
                train.push(i);
            } else {
                val.push(i);
            }
        }
        Ok((train, val))
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        let d = &self.dims;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        for v in [
            d.region_count,
            d.image_raw_dim,
            d.max_words,
            d.text_raw_dim,
            d.identity_count,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            w.write_all(&(s.identity as u32).to_le_bytes())?;
            w.write_all(&(s.text_len as u32).to_le_bytes())?;
            for v in s.image.data().iter().chain(s.tokens.data()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Data("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Data(format!("unsupported dataset version {version}")));
        }
        let dims = DatasetDims {
            region_count: read_u32(r)? as usize,
            image_raw_dim: read_u32(r)? as usize,
            max_words: read_u32(r)? as usize,
            text_raw_dim: read_u32(r)? as usize,
            identity_count: read_u32(r)? as usize,
        };
        let count = read_u64(r)? as usize;
        let img_len = dims.region_count * dims.image_raw_dim;
        let tok_len = dims.max_words * dims.text_raw_dim;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let identity = read_u32(r)? as usize;
            let text_len = read_u32(r)? as usize;
            let image = read_f64s(r, img_len)?;
            let tokens = read_f64s(r, tok_len)?;
            samples.push(Sample {
                identity,
                image: Tensor::matrix(dims.region_count, dims.image_raw_dim, image)
                    .map_err(|e| Error::Data(e.to_string()))?,
                tokens: Tensor::matrix(dims.max_words, dims.text_raw_dim, tokens)
                    .map_err(|e| Error::Data(e.to_string()))?,
                text_len,
            });
        }
        let ds = Dataset {
            dims,
            samples,
            meta: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let ds: Dataset = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| Error::Data(e.to_string()))?;
        ds.validate()?;
        Ok(ds)
    }

    /// Reads either format, choosing JSON for a `.json` extension.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "json") {
            Self::read_json(path)
        } else {
            Self::read_binary(path)
        }
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Data("dataset file truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let dims = DatasetDims {
            region_count: 2,
            image_raw_dim: 2,
            max_words: 3,
            text_raw_dim: 1,
            identity_count: 2,
        };
        let s = |id: usize, x: f64| Sample {
            identity: id,
            image: Tensor::matrix(2, 2, vec![x, 1.0, -x, 0.5]).unwrap(),
            tokens: Tensor::matrix(3, 1, vec![x, 2.0 * x, 0.0]).unwrap(),
            text_len: 2,
        };
        Dataset {
            dims,
            samples: vec![s(0, 0.25), s(1, -1.5)],
            meta: None,
        }
    }

    #[test]
    fn byte_layout_is_stable() {
        let mut buf = Vec::new();
        tiny().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"FPMDATA\0");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        // header 8 + 4 + 5*4 + 8, then per sample 8 + (4 + 3) * 8
        assert_eq!(buf.len(), 40 + 2 * (8 + 7 * 8));
        assert_eq!(u64::from_le_bytes(buf[32..40].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[48..56].try_into().unwrap()), 0.25);
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, tiny());
    }

    #[test]
    fn corrupt_files_are_data_errors() {
        let mut buf = Vec::new();
        tiny().write_to(&mut buf).unwrap();
        let short = &buf[..buf.len() - 3];
        assert!(matches!(Dataset::read_from(&mut &short[..]), Err(Error::Data(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::read_from(&mut bad.as_slice()), Err(Error::Data(_))));
        let mut bad_id = buf.clone();
        bad_id[40] = 9;
        assert!(matches!(Dataset::read_from(&mut bad_id.as_slice()), Err(Error::Data(_))));
    }

    #[test]
    fn split_holds_out_trailing_identities() {
        let ds = tiny();
        let (train, val) = ds.split_by_identity(0.1).unwrap();
        assert_eq!(train, vec![0]);
        assert_eq!(val, vec![1]);
        let (train, val) = ds.split_by_identity(0.0).unwrap();
        assert_eq!(train.len(), 2);
        assert!(val.is_empty());
        assert!(ds.split_by_identity(1.0).is_err());
    }
}
