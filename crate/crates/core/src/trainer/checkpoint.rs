//! `"CSFKPT"`, u32 version, metadata, codec config, then one directory
//! entry per parameter group: name, frozen flag, parameter names and
//! shapes, f32 payload, and the SHA-256 of the payload bytes.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainError;
use crate::codec::{Codec, CodecConfig};
use crate::diffcore::{ParamStore, Tensor};
use crate::wire::{Reader, WireError, Writer};

const MAGIC: &str = "CSFKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMeta {
    pub stage: u8,
    pub epochs: u32,
    pub best_epoch: u32,
    pub best_val: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CodecConfig,
    /// Values are held at f32 precision so a save/load cycle is exact.
    pub store: ParamStore,
    pub frozen: Vec<String>,
    pub meta: TrainMeta,
}

fn payload(store: &ParamStore, group: &str) -> Vec<u8> {
    store
        .entries()
        .iter()
        .filter(|e| e.group == group)
        .flat_map(|e| e.value.data().iter().flat_map(|&v| (v as f32).to_le_bytes()))
        .collect()
}

/// SHA-256 of a group's serialized parameter values.
pub fn group_hash(store: &ParamStore, group: &str) -> [u8; 32] {
    Sha256::digest(payload(store, group)).into()
}

impl Checkpoint {
    pub fn new(config: CodecConfig, mut store: ParamStore, frozen: Vec<String>, meta: TrainMeta) -> Self {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
        Self {
            config,
            store,
            frozen,
            meta,
        }
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.iter().any(|g| g == group)
    }

    /// Model and parameter store ready for inference.
    pub fn codec(&self) -> Result<(Codec, ParamStore), TrainError> {
        let (codec, mut store) = Codec::new(&self.config, 0)?;
        store.load_values(&self.store)?;
        Ok((codec, store))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC.as_bytes());
        w.u32(VERSION);
        w.u8(self.meta.stage);
        w.u32(self.meta.epochs);
        w.u32(self.meta.best_epoch);
        w.f64(self.meta.best_val);
        self.config.write_to(&mut w);
        let groups = self.store.groups();
        w.u32(groups.len() as u32);
        for g in &groups {
            w.str(g);
            w.u8(self.is_frozen(g) as u8);
            let members: Vec<_> = self.store.entries().iter().filter(|e| &e.group == g).collect();
            w.u32(members.len() as u32);
            for e in &members {
                w.str(&e.name);
                w.u32(e.value.shape().len() as u32);
                for &d in e.value.shape() {
                    w.u32(d as u32);
                }
            }
            let bytes = payload(&self.store, g);
            w.u64(bytes.len() as u64);
            w.bytes(&bytes);
            w.bytes(&Sha256::digest(&bytes));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let meta = TrainMeta {
            stage: r.u8()?,
            epochs: r.u32()?,
            best_epoch: r.u32()?,
            best_val: r.f64()?,
        };
        let config = CodecConfig::read_from(&mut r)?;
        let mut store = ParamStore::new();
        let mut frozen = Vec::new();
        for _ in 0..r.u32()? {
            let group = r.str()?;
            match r.u8()? {
                0 => {}
                1 => frozen.push(group.clone()),
                f => return Err(WireError::Malformed(format!("frozen flag {f}")).into()),
            }
            let mut shapes = Vec::new();
            for _ in 0..r.u32()? {
                let name = r.str()?;
                let rank = r.u32()? as usize;
                let shape = (0..rank)
                    .map(|_| Ok(r.u32()? as usize))
                    .collect::<Result<Vec<_>, WireError>>()?;
                shapes.push((name, shape));
            }
            let len = r.u64()? as usize;
            let expected: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>() * 4).sum();
            if len != expected {
                return Err(WireError::Malformed(format!(
                    "group {group}: payload {len} bytes, shapes need {expected}"
                ))
                .into());
            }
            let data = r.take(len)?;
            let hash = r.take(32)?;
            if Sha256::digest(data).as_slice() != hash {
                return Err(WireError::Malformed(format!("group {group}: content hash mismatch")).into());
            }
            let mut values = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
            for (name, shape) in shapes {
                let n = shape.iter().product();
                let t = Tensor::new(shape, values.by_ref().take(n).collect())?;
                store.add(&group, &name, t);
            }
        }
        r.expect_end()?;
        Ok(Self {
            config,
            store,
            frozen,
            meta,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<(), TrainError> {
    std::fs::write(path, ck.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
