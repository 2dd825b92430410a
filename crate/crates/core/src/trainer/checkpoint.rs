//! Binary checkpoint: `"PXDA"`, u32 version, u64 step, a length-prefixed table of
//! `(name, dtype, shape, little-endian values)` entries, then optimizer, RNG and iterator state.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use pixelda_tensor::{Scalar, Tensor};

use crate::data::IteratorState;
use crate::error::{format_err, io_err, Result};

pub const MAGIC: &[u8; 4] = b"PXDA";
pub const VERSION: u32 = 1;

/// Position of a ChaCha generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Every named parameter and buffer of the three networks.
    pub params: IndexMap<String, Tensor<f32>>,
    /// Optimizer moments, keyed like `adam/<network>/m/<parameter>`.
    pub optimizer: IndexMap<String, Tensor<f32>>,
    /// Update counters per optimizer.
    pub optimizer_steps: IndexMap<String, u64>,
    pub rng: RngState,
    pub iterators: Vec<IteratorState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_table<T: Scalar>(out: &mut Vec<u8>, table: &IndexMap<String, Tensor<T>>) {
    put_u32(out, table.len() as u32);
    for (name, t) in table {
        put_str(out, name);
        out.push(T::DTYPE.code());
        put_u32(out, t.rank() as u32);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(self.path, format!("truncated checkpoint at byte {}", self.pos)));
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

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err(self.path, "entry name is not UTF-8"))
    }

    fn table<T: Scalar>(&mut self) -> Result<IndexMap<String, Tensor<T>>> {
        let n = self.u32()? as usize;
        let mut table = IndexMap::new();
        for _ in 0..n {
            let name = self.string()?;
            let code = self.u8()?;
            if code != T::DTYPE.code() {
                return Err(format_err(self.path, format!("{name}: dtype code {code}, expected {}", T::DTYPE.code())));
            }
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|c| c.checked_mul(T::DTYPE.size()))
                .ok_or_else(|| format_err(self.path, format!("{name}: shape overflow")))?;
            let raw = self.take(count)?;
            let data = raw.chunks(T::DTYPE.size()).map(T::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| format_err(self.path, format!("{name}: {e}")))?;
            if table.insert(name.clone(), t).is_some() {
                return Err(format_err(self.path, format!("duplicate entry {name}")));
            }
        }
        Ok(table)
    }
}

impl Checkpoint {
    /// Parameter values of one network (`generator`, `discriminator` or `classifier`).
    pub fn network(&self, net: &str) -> IndexMap<String, Tensor<f32>> {
        let prefix = format!("{net}/");
        self.params.iter().filter(|(k, _)| k.starts_with(&prefix)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.step);
        put_table(&mut out, &self.params);
        put_table(&mut out, &self.optimizer);
        put_u32(&mut out, self.optimizer_steps.len() as u32);
        for (name, &s) in &self.optimizer_steps {
            put_str(&mut out, name);
            put_u64(&mut out, s);
        }
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut out, self.iterators.len() as u32);
        for it in &self.iterators {
            put_u64(&mut out, it.epoch);
            put_u64(&mut out, it.cursor as u64);
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(path, format!("checkpoint version {version}, expected {VERSION}")));
        }
        let step = r.u64()?;
        let params = r.table()?;
        let optimizer = r.table()?;
        let n = r.u32()? as usize;
        let mut optimizer_steps = IndexMap::new();
        for _ in 0..n {
            let name = r.string()?;
            optimizer_steps.insert(name, r.u64()?);
        }
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng = RngState { seed, stream: r.u64()?, word_pos: r.u128()? };
        let n = r.u32()? as usize;
        let iterators = (0..n)
            .map(|_| Ok(IteratorState { epoch: r.u64()?, cursor: r.u64()? as usize }))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(format_err(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { step, params, optimizer, optimizer_steps, rng, iterators })
    }

    /// Writes through a temporary file so an existing checkpoint is never left half-written.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode(path, &bytes)
    }
}
