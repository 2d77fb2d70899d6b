//! `EAAC` checkpoints: an ordered list of named `f64` tensors.
//!
//! Layout after the magic: record count, then per record the UTF-8 name, the
//! shape and the raw values, all little-endian with `u32` lengths, followed by
//! a CRC-32 of everything between magic and checksum.

use std::fs;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{EaaNet, Fusion, NetworkConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"EAAC\x01";
/// Name of the record holding the network configuration.
pub const CONFIG_RECORD: &str = "config";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("record {name}: {} values for shape {shape:?}", data.len())));
        }
        Ok(Self {
            name,
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| Error::Validation(format!("checkpoint has no record `{name}`")))
    }

    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.len_u32(self.records.len())?;
        for r in &self.records {
            w.len_u32(r.name.len())?;
            w.bytes(r.name.as_bytes());
            w.len_u32(r.shape.len())?;
            for &d in &r.shape {
                w.len_u32(d)?;
            }
            w.f64s(&r.data);
        }
        Ok(w.finish(CHECKPOINT_MAGIC))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
        let count = r.u32("record count")? as usize;
        let mut records = Vec::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "record name")?.to_vec())
                .map_err(|_| Error::Validation(format!("record {i} name is not UTF-8")))?;
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::new();
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Validation(format!("record {name} is too large")))?;
            let data = r.f64s(n, &format!("values of {name}"))?;
            records.push(Record { name, shape, data });
        }
        r.finish()?;
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn config_record(cfg: &NetworkConfig, fusion: Fusion) -> Record {
    let fusion_code = match fusion {
        Fusion::I2 => 0.0,
        Fusion::PassThrough => 1.0,
    };
    let data = vec![
        cfg.depth as f64,
        cfg.base_channels as f64,
        cfg.recon_fraction,
        cfg.num_classes as f64,
        cfg.se_reduction as f64,
        cfg.height as f64,
        cfg.width as f64,
        fusion_code,
    ];
    Record {
        name: CONFIG_RECORD.into(),
        shape: vec![data.len()],
        data,
    }
}

fn parse_config(r: &Record) -> Result<(NetworkConfig, Fusion)> {
    let d = &r.data;
    if d.len() != 8 {
        return Err(Error::Validation(format!("config record has {} fields, expected 8", d.len())));
    }
    let int = |i: usize| -> Result<usize> {
        let v = d[i];
        if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(Error::Validation(format!("config field {i} = {v} is not a count")))
        }
    };
    let cfg = NetworkConfig {
        depth: int(0)?,
        base_channels: int(1)?,
        recon_fraction: d[2],
        num_classes: int(3)?,
        se_reduction: int(4)?,
        height: int(5)?,
        width: int(6)?,
    };
    let fusion = match int(7)? {
        0 => Fusion::I2,
        1 => Fusion::PassThrough,
        k => return Err(Error::Validation(format!("unknown fusion code {k}"))),
    };
    Ok((cfg, fusion))
}

/// Configuration, parameters and BN statistics of `net`.
pub fn model_checkpoint(net: &EaaNet) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.push(config_record(net.config(), net.fusion()));
    for (name, t) in net.named_params().into_iter().chain(net.named_buffers()) {
        ck.push(Record::from_tensor(name, &t));
    }
    ck
}

/// Rebuilds a network from a checkpoint written by [`model_checkpoint`].
/// Records other than the config and the network's own tensors are ignored.
pub fn restore_model(ck: &Checkpoint) -> Result<EaaNet> {
    let (cfg, fusion) = parse_config(ck.require(CONFIG_RECORD)?)?;
    let net = EaaNet::with_fusion(cfg, fusion, 0)?;
    for (name, t) in net.named_params().into_iter().chain(net.named_buffers()) {
        let r = ck.require(&name)?;
        if r.shape != t.shape() {
            return Err(Error::Shape(format!("record {name}: {:?} vs model {:?}", r.shape, t.shape())));
        }
        t.data_mut().copy_from_slice(&r.data);
    }
    Ok(net)
}

pub fn save_model(net: &EaaNet, path: &Path) -> Result<()> {
    model_checkpoint(net).save(path)
}

pub fn load_model(path: &Path) -> Result<EaaNet> {
    restore_model(&Checkpoint::load(path)?)
}
