//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "MMARCKPT"
//! version      u32
//! scalar width u8       bytes per payload element (4 or 8)
//! config       u64 length + JSON bytes (ModelConfig)
//! tensor count u32
//! per tensor:  u32 name length + UTF-8 name, u8 group tag, u32 rank,
//!              u64 dims[rank], payload (width bytes per element)
//! optimizer    u8 (0: no optimizer state stored)
//! rng          32-byte seed, u64 stream, u128 word position (ChaCha8)
//! counters     u8 stage completed, u64 global step
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamGroup, ParamSet};
use crate::tensor::{Scalar, Tensor, SCALAR_BYTES};

pub const MAGIC: &[u8; 8] = b"MMARCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub rng: ChaCha8Rng,
    /// Last completed stage (0 for a fresh model).
    pub stage: u8,
    pub step: u64,
}

impl Checkpoint {
    /// Freshly initialized model; the RNG keeps running after initialization.
    pub fn fresh(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamSet::init(&config, &mut rng)?;
        Ok(Checkpoint {
            config,
            params,
            rng,
            stage: 0,
            step: 0,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(SCALAR_BYTES as u8);
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.group.tag());
            out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.push(0);
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out.push(self.stage);
        out.extend_from_slice(&self.step.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let width = r.u8()? as usize;
        if width != SCALAR_BYTES {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {width}-byte scalars but this build uses {SCALAR_BYTES}-byte scalars"
            )));
        }
        let cfg_len = r.u64()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(cfg_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?
                .to_string();
            let group = ParamGroup::from_tag(r.u8()?)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * SCALAR_BYTES)?;
            let data = payload
                .chunks_exact(SCALAR_BYTES)
                .map(|c| Scalar::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(&name, group, Tensor::new(shape, data)?)?;
        }
        if r.u8()? != 0 {
            return Err(Error::Checkpoint("optimizer state is not supported".into()));
        }
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let stage = r.u8()?;
        let step = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            rng,
            stage,
            step,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = BufWriter::new(File::create(&tmp)?);
            f.write_all(&bytes)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(
            File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?,
        )
        .read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = Checkpoint::fresh(ModelConfig::default(), 3).unwrap();
        ck.rng.next_u64();
        ck.stage = 2;
        ck.step = 77;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn rejects_unknown_version_and_truncation() {
        let ck = Checkpoint::fresh(ModelConfig::default(), 0).unwrap();
        let mut bytes = ck.to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint::fresh(ModelConfig::default(), 0).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        assert_eq!(bytes[12] as usize, SCALAR_BYTES);
    }
}
