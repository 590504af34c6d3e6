//! Binary checkpoint container.
//!
//! Little-endian layout: `CALCKPT1`, `u32` version, stage tag, then
//! `u32` parameter count and per parameter its name, role tag, `u8`
//! trainable flag, `u32` rank, `u32` dims and `f32` data; then `u32`
//! batch-norm layer count and per layer its name, `u32` channels, `f64`
//! means and `f64` variances; then `u32` metric count and per metric its
//! name and `f64` value. Strings are `u32` length plus UTF-8 bytes.

use std::fs;
use std::path::Path;

use crate::autodiff::{ChannelStats, Tensor};
use crate::error::{Error, Result};
use crate::model::{BnState, Param, ParamRole, ParamSet, Stage};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CALCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub stage: Stage,
    pub params: ParamSet<f32>,
    /// Named scalars in insertion order, e.g. epoch and validation stats.
    pub metrics: Vec<(String, f64)>,
}

impl CheckpointFile {
    pub fn new(stage: Stage, params: ParamSet<f32>) -> Self {
        Self {
            stage,
            params,
            metrics: Vec::new(),
        }
    }

    pub fn with_metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.push((name.to_string(), value));
        self
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(self.stage.tag());
        w.u32(self.params.params.len() as u32);
        for p in &self.params.params {
            w.str(&p.name);
            w.str(p.role.tag());
            w.0.push(p.trainable as u8);
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u32(d as u32);
            }
            for &x in p.value.data() {
                w.0.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.u32(self.params.bn.len() as u32);
        for b in &self.params.bn {
            w.str(&b.name);
            w.u32(b.running.mean.len() as u32);
            for &x in b.running.mean.iter().chain(&b.running.var) {
                w.0.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.u32(self.metrics.len() as u32);
        for (name, v) in &self.metrics {
            w.str(name);
            w.0.extend_from_slice(&v.to_le_bytes());
        }
        w.0
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "missing checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let stage = r.str()?.parse().map_err(|_| Error::format(path, "unknown stage tag"))?;
        let mut params = ParamSet::default();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let role = ParamRole::from_tag(&r.str()?).ok_or_else(|| Error::format(path, "unknown parameter role"))?;
            let trainable = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product::<usize>();
            let data = r
                .take(
                    len.checked_mul(4)
                        .ok_or_else(|| Error::format(path, "parameter size overflows"))?,
                )?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
            params.params.push(Param {
                name,
                role,
                value,
                trainable,
            });
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let channels = r.u32()? as usize;
            let mut f64s = |n: usize| -> Result<Vec<f64>> {
                Ok(r.take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect())
            };
            let mean = f64s(channels)?;
            let var = f64s(channels)?;
            params.bn.push(BnState {
                name,
                running: ChannelStats { mean, var },
            });
        }
        let mut metrics = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            metrics.push((name, v));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after metrics block"));
        }
        Ok(Self { stage, params, metrics })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SegArch, SegModel};
    use crate::rng;

    fn small_model() -> SegModel<f32> {
        let arch = SegArch {
            widths: vec![4, 4, 4],
            ..SegArch::default()
        };
        SegModel::new(arch, &mut rng::stream(3, rng::INIT, 0)).unwrap()
    }

    #[test]
    fn round_trip_gives_identical_forward_pass() {
        let mut m = small_model();
        m.params.bn[0].running.mean[1] = 0.25;
        let ckpt = CheckpointFile::new(Stage::Source, m.params.clone()).with_metric("epoch", 3.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = CheckpointFile::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.metric("epoch"), Some(3.0));

        let mut m2 = small_model();
        m2.params.load_from(&back.params).unwrap();
        let x = Tensor::full(&[1, 3, 16, 16], 0.3f32);
        let (a, _) = m.infer(&x).unwrap();
        let (b, _) = m2.infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn damaged_files_rejected() {
        let bytes = CheckpointFile::new(Stage::Adapt, small_model().params).to_bytes();
        let p = Path::new("x.ckpt");
        assert!(CheckpointFile::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(CheckpointFile::from_bytes(&bad, p), Err(Error::Format { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(CheckpointFile::from_bytes(&long, p).is_err());
    }
}
