//! `ATMC` checkpoint files.
//!
//! Layout, little-endian: magic `ATMC`, version `u32` = 1, descriptor
//! length `u32`, UTF-8 JSON descriptor, parameter count `u64`, then the
//! parameters as `f64`.

use crate::error::{Error, Result};
use crate::io::{len_from_u64, BinReader, BinWriter};
use std::path::Path;

pub const ATMC_MAGIC: [u8; 4] = *b"ATMC";
pub const ATMC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: serde_json::Value,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.descriptor)?;
        let json_len = u32::try_from(json.len())
            .map_err(|_| Error::InvalidParameter("checkpoint descriptor exceeds 4 GiB".into()))?;
        let mut w = BinWriter::new(Vec::with_capacity(24 + json.len() + 8 * self.params.len()));
        w.bytes(&ATMC_MAGIC)?;
        w.u32(ATMC_VERSION)?;
        w.u32(json_len)?;
        w.bytes(&json)?;
        w.u64(self.params.len() as u64)?;
        w.f64s(&self.params)?;
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::new(bytes);
        r.magic(ATMC_MAGIC)?;
        let version = r.u32()?;
        if version != ATMC_VERSION {
            return Err(Error::VersionMismatch {
                expected: ATMC_VERSION,
                found: version,
            });
        }
        let json_len = r.u32()? as usize;
        let descriptor = serde_json::from_slice(r.bytes(json_len)?)?;
        let count = len_from_u64(r.u64()?, bytes.len())?;
        let params = r.f64s(count)?;
        if r.remaining() != 0 {
            return Err(Error::InvalidParameter(format!("{} trailing bytes after parameters", r.remaining())));
        }
        Ok(Self { descriptor, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_errors() {
        let ck = Checkpoint {
            descriptor: serde_json::json!({"kind": "mlp", "depth": 2}),
            params: vec![1.5, -2.0, f64::MIN_POSITIVE],
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::VersionMismatch { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedPayload { .. })
        ));
    }
}
