//! Checkpoint container: magic, version, a JSON block holding the model
//! config and training metadata, then named parameter tensors as
//! shape-prefixed little-endian f64 payloads. f64 payloads (not f32) keep
//! the round trip bit-exact, which resume-equals-uninterrupted training
//! depends on. Optimizer moments are stored the same way so a resumed run
//! continues the exact trajectory.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::model::ModelConfig;
use crate::numerics::{Params, Tensor};
use crate::objective::{Optimizer, OptimizerKind};

const MAGIC: &[u8; 8] = b"SDIARCKP";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub step: u64,
    pub seed: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: TrainingMeta,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params,
    pub meta: TrainingMeta,
    pub optimizer: Option<Optimizer>,
}

fn write_tensor_block(buf: &mut Vec<u8>, params: &Params) {
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "unexpected end of file at byte {}",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

fn read_tensor_block(r: &mut Reader) -> Result<Params, CheckpointError> {
    let count = r.u32()? as usize;
    let mut params = Params::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for chunk in r.take(numel * 8)?.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        params.insert(&name, Tensor::new(shape, data));
    }
    Ok(params)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let header = Header {
        config: ckpt.config.clone(),
        meta: ckpt.meta,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            kind: o.kind,
            lr: o.lr,
            step: o.step,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    write_tensor_block(&mut buf, &ckpt.params);
    match &ckpt.optimizer {
        Some(o) => {
            buf.push(1);
            write_tensor_block(&mut buf, &o.m);
            write_tensor_block(&mut buf, &o.v);
        }
        None => buf.push(0),
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let json_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(json_len)?)?;
    let params = read_tensor_block(&mut r)?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let oh = header
                .optimizer
                .as_ref()
                .ok_or_else(|| CheckpointError::Corrupt("optimizer tensors without header".into()))?;
            let m = read_tensor_block(&mut r)?;
            let v = read_tensor_block(&mut r)?;
            Some(Optimizer { kind: oh.kind, lr: oh.lr, step: oh.step, m, v })
        }
        other => {
            return Err(CheckpointError::Corrupt(format!(
                "bad optimizer flag {other}"
            )))
        }
    };
    if r.pos != buf.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config: header.config,
        params,
        meta: header.meta,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use tempfile::tempdir;

    fn sample_checkpoint(with_opt: bool) -> Checkpoint {
        let config = ModelConfig::toy(4, 8, 2, 1, 1, 2);
        let params = init_params(&config, 42);
        let optimizer = with_opt.then(|| {
            let mut o = Optimizer::new(OptimizerKind::adam_default(), 1e-3, &params).unwrap();
            o.step = 17;
            o.m.get_mut("enc.in.w").data_mut()[0] = 0.125;
            o
        });
        Checkpoint {
            config,
            params,
            meta: TrainingMeta { step: 17, seed: 42, loss: 3.25 },
            optimizer,
        }
    }

    fn assert_params_bit_equal(a: &Params, b: &Params) {
        assert_eq!(a.len(), b.len());
        for (name, t) in a.iter() {
            let u = b.get(name);
            assert_eq!(t.shape(), u.shape(), "{name}");
            for (x, y) in t.data().iter().zip(u.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint(true);
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.meta, ckpt.meta);
        assert_params_bit_equal(&loaded.params, &ckpt.params);
        let (lo, o) = (loaded.optimizer.unwrap(), ckpt.optimizer.unwrap());
        assert_eq!(lo.kind, o.kind);
        assert_eq!(lo.step, 17);
        assert_params_bit_equal(&lo.m, &o.m);
        assert_params_bit_equal(&lo.v, &o.v);
    }

    #[test]
    fn roundtrip_without_optimizer() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &sample_checkpoint(false)).unwrap();
        assert!(load(&path).unwrap().optimizer.is_none());
    }

    #[test]
    fn special_float_values_survive() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ckpt = sample_checkpoint(false);
        let t = ckpt.params.get_mut("enc.in.w");
        t.data_mut()[0] = -0.0;
        t.data_mut()[1] = f64::MIN_POSITIVE / 2.0;
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();
        assert_params_bit_equal(&loaded.params, &ckpt.params);
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempdir().unwrap();
        let magic = dir.path().join("bad1.ckpt");
        std::fs::write(&magic, b"WRONGMAG rest of file").unwrap();
        assert!(matches!(load(&magic), Err(CheckpointError::BadMagic)));

        let path = dir.path().join("ok.ckpt");
        save(&path, &sample_checkpoint(true)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        let versioned = dir.path().join("bad2.ckpt");
        std::fs::write(&versioned, &bytes).unwrap();
        assert!(matches!(load(&versioned), Err(CheckpointError::BadVersion(99))));

        let mut truncated = std::fs::read(&path).unwrap();
        truncated.truncate(truncated.len() - 10);
        let short = dir.path().join("bad3.ckpt");
        std::fs::write(&short, &truncated).unwrap();
        assert!(load(&short).is_err());
    }
}
