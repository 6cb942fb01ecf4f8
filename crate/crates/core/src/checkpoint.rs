//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SBD1"  u32 version
//! u32 n_layers  u32 n_heads  u32 d_model  u32 vocab_size  u32 max_len
//! u64 training step
//! u32 rng count, then per generator: [u8; 32] seed, u64 stream, u128 word position
//! u32 tensor count, then per tensor:
//!     u32 name length, name bytes (UTF-8), u32 ndim, ndim × u32 dims, f32 values
//! ```
//!
//! Optimizer moments are not stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DenoiserConfig, Transformer};
use crate::optim::ParamStore;
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SBD1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub step: u64,
    pub rngs: Vec<RngState>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Transformer<T>, step: u64, rngs: &[RngState]) -> Self {
        let tensors = model
            .params()
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self {
            config: *model.config(),
            step,
            rngs: rngs.to_vec(),
            tensors,
        }
    }

    /// Rebuilds the model; names and shapes are checked against the config.
    pub fn to_model<T: Real>(&self) -> Result<Transformer<T>> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            let data = t.data.iter().map(|&v| T::from_f64(v as f64)).collect();
            store.insert(&t.name, Tensor::new(t.shape.clone(), data)?)?;
        }
        store.set_step_count(self.step);
        Transformer::from_params(self.config, store)
            .map_err(|e| Error::Checkpoint(format!("tensors do not match the config: {e}")))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        let c = &self.config;
        for v in [c.n_layers, c.n_heads, c.d_model, c.vocab_size, c.max_len] {
            put_u32(w, to_u32(v)?)?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        put_u32(w, to_u32(self.rngs.len())?)?;
        for r in &self.rngs {
            w.write_all(&r.seed)?;
            w.write_all(&r.stream.to_le_bytes())?;
            w.write_all(&r.word_pos.to_le_bytes())?;
        }
        put_u32(w, to_u32(self.tensors.len())?)?;
        for t in &self.tensors {
            put_u32(w, to_u32(t.name.len())?)?;
            w.write_all(t.name.as_bytes())?;
            put_u32(w, to_u32(t.shape.len())?)?;
            for &d in &t.shape {
                put_u32(w, to_u32(d)?)?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = get_u32(r)? as usize;
        }
        let config = DenoiserConfig {
            n_layers: dims[0],
            n_heads: dims[1],
            d_model: dims[2],
            vocab_size: dims[3],
            max_len: dims[4],
        };
        config.validate()?;
        let step = u64::from_le_bytes(get::<8>(r)?);
        let n_rng = get_u32(r)?;
        let mut rngs = Vec::new();
        for _ in 0..n_rng {
            rngs.push(RngState {
                seed: get::<32>(r)?,
                stream: u64::from_le_bytes(get::<8>(r)?),
                word_pos: u128::from_le_bytes(get::<16>(r)?),
            });
        }
        let n_tensors = get_u32(r)?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name_len = get_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = get_u32(r)?;
            let mut shape = Vec::new();
            for _ in 0..ndim {
                shape.push(get_u32(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            config,
            step,
            rngs,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Self::read(&mut BufReader::new(f))
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get::<4>(r)?))
}
