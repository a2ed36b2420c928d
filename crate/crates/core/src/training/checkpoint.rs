//! Versioned binary checkpoint.
//!
//! Layout (little-endian): magic `SADCKPT\0`, version u32, dtype u8, the eight
//! `ModelConfig` fields as u64, an optional normalizer, then every named
//! tensor (name, rank, dims, values) and finally a CRC-32 of all preceding
//! bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::vitals::Normalizer;

const MAGIC: &[u8; 8] = b"SADCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Storage type of the tensor values. `F64` round-trips bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Self::F64 => 0,
            Self::F32 => 1,
        }
    }
}

/// Model parameters plus the input normalization they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub normalizer: Option<Normalizer>,
}

impl Checkpoint {
    pub fn expect_config(&self, config: &ModelConfig) -> Result<()> {
        let mut have = self.state.config;
        let mut want = *config;
        // the init seed does not change the architecture
        have.seed = 0;
        want.seed = 0;
        if have != want {
            return Err(Error::VersionMismatch(format!("checkpoint holds {:?}, expected {:?}", have, want)));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    save_checkpoint_with(path, ckpt, Precision::F64)
}

pub fn save_checkpoint_with(path: &Path, ckpt: &Checkpoint, precision: Precision) -> Result<()> {
    std::fs::write(path, encode(ckpt, precision)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_values(out: &mut Vec<u8>, values: &[f64], precision: Precision) {
    for &x in values {
        match precision {
            Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
            Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
        }
    }
}

fn config_fields(c: &ModelConfig) -> [u64; 8] {
    [
        c.n_vars as u64,
        c.window_len as u64,
        c.patch_size as u64,
        c.embed_dim as u64,
        c.n_blocks as u64,
        c.n_heads as u64,
        c.n_prompt as u64,
        c.seed,
    ]
}

pub(crate) fn encode(ckpt: &Checkpoint, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.push(precision.tag());
    for f in config_fields(&ckpt.state.config) {
        put_u64(&mut out, f);
    }
    match &ckpt.normalizer {
        Some(norm) => {
            out.push(1);
            put_u32(&mut out, norm.mean.len() as u32);
            put_values(&mut out, &norm.mean, Precision::F64);
            put_values(&mut out, &norm.std, Precision::F64);
        }
        None => out.push(0),
    }
    let params = ckpt.state.params();
    put_u32(&mut out, params.len() as u32);
    for p in params {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.shape.len() as u32);
        for &d in &p.shape {
            put_u64(&mut out, d as u64);
        }
        put_values(&mut out, p.data, precision);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values(&mut self, n: usize, precision: Precision) -> Result<Vec<f64>> {
        let width = match precision {
            Precision::F64 => 8,
            Precision::F32 => 4,
        };
        let raw = self.take(n.checked_mul(width).ok_or_else(|| Error::CorruptCheckpoint("tensor too large".into()))?)?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| match precision {
                Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            })
            .collect())
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptCheckpoint("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "file version {version}, reader version {CHECKPOINT_VERSION}"
        )));
    }
    let precision = match r.u8()? {
        0 => Precision::F64,
        1 => Precision::F32,
        t => return Err(Error::CorruptCheckpoint(format!("unknown dtype tag {t}"))),
    };
    let mut f = [0u64; 8];
    for x in f.iter_mut() {
        *x = r.u64()?;
    }
    let config = ModelConfig {
        n_vars: f[0] as usize,
        window_len: f[1] as usize,
        patch_size: f[2] as usize,
        embed_dim: f[3] as usize,
        n_blocks: f[4] as usize,
        n_heads: f[5] as usize,
        n_prompt: f[6] as usize,
        seed: f[7],
    };
    config
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("stored config invalid: {e}")))?;
    let normalizer = match r.u8()? {
        0 => None,
        1 => {
            let n = r.u32()? as usize;
            let mean = r.values(n, Precision::F64)?;
            let std = r.values(n, Precision::F64)?;
            Some(Normalizer { mean, std })
        }
        t => return Err(Error::CorruptCheckpoint(format!("bad normalizer flag {t}"))),
    };

    let mut state = ModelState::zeros(config);
    let count = r.u32()? as usize;
    let mut params = state.params_mut();
    if count != params.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} tensors, config implies {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not utf-8".into()))?;
        if name != p.name {
            return Err(Error::CorruptCheckpoint(format!("expected tensor {}, found {name}", p.name)));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != p.shape {
            return Err(Error::CorruptCheckpoint(format!("{name}: shape {shape:?}, expected {:?}", p.shape)));
        }
        let values = r.values(p.data.len(), precision)?;
        p.data.copy_from_slice(&values);
    }
    drop(params);
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { state, normalizer })
}
