//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic      8 bytes  "TFMXCKPT"
//! version    u32
//! hash       u32 length + ASCII hex SHA-256 of the model config JSON
//! meta       u32 length + JSON {model, ablations, epoch}
//! optimizer  u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps
//! count      u32
//! tensors    count × { u32 name length, name, u32 rank, u64 dims[rank],
//!                      f64 value[len], u8 has_moments, [f64 m[len], f64 v[len]] }
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ablations, ModelConfig, TfMixer};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::training::Adam;

pub const MAGIC: &[u8; 8] = b"TFMXCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    ablations: Ablations,
    epoch: usize,
}

/// Everything needed to resume training or serve predictions.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Ablations the parameters were trained under.
    pub ablations: Ablations,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn new(model: &TfMixer, ablations: &Ablations, optimizer: &Adam, epoch: usize) -> Self {
        Self {
            config: model.config.clone(),
            ablations: ablations.clone(),
            params: model.params.clone(),
            optimizer: optimizer.clone(),
            epoch,
        }
    }

    pub fn into_model(self) -> Result<TfMixer> {
        TfMixer::from_params(self.config, self.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(w, self.config.hash().as_bytes())?;
        let meta = Meta {
            model: self.config.clone(),
            ablations: self.ablations.clone(),
            epoch: self.epoch,
        };
        write_bytes(w, &serde_json::to_vec(&meta)?)?;
        let opt = &self.optimizer;
        w.write_all(&opt.step.to_le_bytes())?;
        for x in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, value) in self.params.iter() {
            write_bytes(w, name.as_bytes())?;
            w.write_all(&(value.rank() as u32).to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            write_f64s(w, value.data())?;
            match (opt.m.get(name), opt.v.get(name)) {
                (Some(m), Some(v)) => {
                    w.write_all(&[1])?;
                    write_f64s(w, m.data())?;
                    write_f64s(w, v.data())?;
                }
                _ => w.write_all(&[0])?,
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
        }
        let hash = String::from_utf8(read_bytes(r)?).map_err(|_| Error::Checkpoint("hash is not UTF-8".into()))?;
        let meta: Meta = serde_json::from_slice(&read_bytes(r)?)?;
        if meta.model.hash() != hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let step = read_u64(r)?;
        let [lr, beta1, beta2, eps] = [read_f64(r)?, read_f64(r)?, read_f64(r)?, read_f64(r)?];
        let count = read_u32(r)? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(r)?).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let value = Tensor::new(shape.clone(), read_f64s(r, len)?)?;
            let mut flag = [0u8];
            r.read_exact(&mut flag).map_err(truncated)?;
            if flag[0] == 1 {
                m.insert(name.clone(), Tensor::new(shape.clone(), read_f64s(r, len)?)?);
                v.insert(name.clone(), Tensor::new(shape, read_f64s(r, len)?)?);
            }
            params.insert(name, value);
        }
        Ok(Self {
            config: meta.model,
            ablations: meta.ablations,
            params,
            optimizer: Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            },
            epoch: meta.epoch,
        })
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    read_array(r).map(u32::from_le_bytes)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    read_array(r).map(u64::from_le_bytes)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    read_array(r).map(f64::from_le_bytes)
}

fn read_f64s(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    (0..len).map(|_| read_f64(r)).collect()
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    if len > 1 << 30 {
        return Err(Error::Checkpoint(format!("implausible field length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ablation;

    fn small() -> TfMixer {
        let mut c = ModelConfig::new(2);
        c.d_model = 4;
        c.n_freqs = 3;
        c.n_queries = 2;
        TfMixer::new(c, 9).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let model = small();
        let mut adam = Adam::new(0.01);
        adam.step = 7;
        adam.m.insert("freq.omega".into(), Tensor::full([3], 0.25));
        adam.v.insert("freq.omega".into(), Tensor::full([3], 1e-300));
        let ckpt = Checkpoint::new(&model, &Ablations::only(Ablation::NoRefine), &adam, 12);
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.optimizer, adam);
        assert_eq!(back.config, model.config);
        assert_eq!(back.ablations, ckpt.ablations);
        assert_eq!(back.epoch, 12);
        back.into_model().unwrap();
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = small();
        let mut buf = Vec::new();
        Checkpoint::new(&model, &Ablations::none(), &Adam::new(1e-3), 0)
            .write_to(&mut buf)
            .unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad_magic.as_slice()).is_err());
        let mut bad_version = buf.clone();
        bad_version[8] = 99;
        assert!(Checkpoint::read_from(&mut bad_version.as_slice()).is_err());
        let cut = &buf[..buf.len() - 5];
        assert!(matches!(Checkpoint::read_from(&mut &cut[..]), Err(Error::Checkpoint(_))));
        // Flip one hex digit of the stored hash.
        let mut bad_hash = buf.clone();
        bad_hash[16] = if bad_hash[16] == b'0' { b'1' } else { b'0' };
        assert!(Checkpoint::read_from(&mut bad_hash.as_slice()).is_err());
    }
}
