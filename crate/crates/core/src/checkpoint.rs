//! `GDCK` checkpoint files.
//!
//! Layout, little-endian: magic, `u32` version, `u64` config length and the
//! config JSON, `u32` entry count, entries (`u32` name length, name, `u64`
//! offset, `u8` rank, `u32` dims), the `f32` parameters, the two `f32`
//! Adam moment vectors, `u32` epoch.

use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::model_layout;
use crate::params::{ParamEntry, ParamLayout, Params};
use crate::train::Adam;

const MAGIC: &[u8; 4] = b"GDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub layout: ParamLayout,
    pub values: Vec<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    pub epoch: u32,
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl Checkpoint {
    pub fn from_state(cfg: &TrainConfig, params: &Params, adam: &Adam, epoch: usize) -> Self {
        Self {
            config: cfg.clone(),
            layout: params.layout.clone(),
            values: to_f32(&params.values),
            adam_m: to_f32(&adam.m),
            adam_v: to_f32(&adam.v),
            epoch: epoch as u32,
        }
    }

    /// Parameters widened to `f64`.
    pub fn params(&self) -> Params {
        Params { layout: self.layout.clone(), values: self.values.iter().map(|&x| x as f64).collect() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.layout.entries().len() as u32).to_le_bytes());
        for e in self.layout.entries() {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.offset as u64).to_le_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for payload in [&self.values, &self.adam_m, &self.adam_v] {
            for x in payload.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing GDCK magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(len)?)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let offset = r.u64()? as usize;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            entries.push(ParamEntry { name, offset, shape });
        }
        let layout = ParamLayout::from_entries(entries)?;
        let n = layout.total();
        let mut payload = || -> Result<Vec<f32>> {
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload size overflows".into()))?)?;
            Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
        };
        let values = payload()?;
        let adam_m = payload()?;
        let adam_v = payload()?;
        let epoch = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        let expected = model_layout(&config);
        if !expected.same_shape(&layout) {
            return Err(Error::Config("checkpoint layout does not match its configuration".into()));
        }
        Ok(Self { config, layout: expected, values, adam_m, adam_v, epoch })
    }

    /// The stored layout must be the one the stored config declares.
    pub fn check_layout(&self) -> Result<()> {
        if !model_layout(&self.config).same_shape(&self.layout) {
            return Err(Error::Config("checkpoint layout does not match its configuration".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn sample() -> Checkpoint {
        let cfg = TrainConfig::tiny();
        let params = model_layout(&cfg).initialize(4, true);
        let mut adam = Adam::new(params.values.len());
        adam.m.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 1e-3);
        Checkpoint::from_state(&cfg, &params, &adam, 7)
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.encode();
        assert_eq!(&bytes[..4], b"GDCK");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
    }
}
