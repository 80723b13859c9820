//! Named parameters, persistent buffers and the checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DYNFCKPT"
//! version  u32      1
//! count    u32      number of entries
//! entry:
//!   kind   u8       0 = parameter, 1 = buffer
//!   name   u32 length + UTF-8 bytes
//!   dtype  u8       1 = f64
//!   ndim   u32, then ndim x u64 extents
//!   data   product(extents) x f64
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;

use crate::autograd::{BatchStats, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DYNFCKPT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Trainable parameters and persistent buffers, iterated in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    buffers: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_free(&self, name: &str) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate name `{name}`")));
        }
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        self.check_free(&name)?;
        self.params.insert(name, Param { value, grad: None });
        Ok(())
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        self.check_free(&name)?;
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total scalar count over all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let p = self.param_mut(name)?;
        if p.value.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                grad.shape(),
                p.value.shape()
            )));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)?.grad.as_ref()
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    pub fn running_stats(&self, prefix: &str) -> Result<RunningStats> {
        Ok(RunningStats {
            mean: self.buffer(&format!("{prefix}.running_mean"))?.data().to_vec(),
            var: self.buffer(&format!("{prefix}.running_var"))?.data().to_vec(),
        })
    }

    /// Fold batch statistics recorded during a training forward pass into
    /// the running buffers of the named batch-norm layers.
    pub fn apply_batch_stats(&mut self, updates: &[(String, BatchStats)], momentum: f64) -> Result<()> {
        for (prefix, stats) in updates {
            let mut running = self.running_stats(prefix)?;
            running.update(stats, momentum);
            self.buffer_mut(&format!("{prefix}.running_mean"))?
                .data_mut()
                .copy_from_slice(&running.mean);
            self.buffer_mut(&format!("{prefix}.running_var"))?
                .data_mut()
                .copy_from_slice(&running.var);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count = self.params.len() + self.buffers.len();
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(count as u32).unwrap();
        let entries = self
            .params
            .iter()
            .map(|(n, p)| (0u8, n, &p.value))
            .chain(self.buffers.iter().map(|(n, t)| (1u8, n, t)));
        for (kind, name, t) in entries {
            out.push(kind);
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.write_u32::<LittleEndian>(t.ndim() as u32).unwrap();
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            for &v in t.data() {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let trunc = |_| bad("truncated entry");
            let kind = cur.read_u8().map_err(trunc)?;
            let len = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            if len > bytes.len() {
                return Err(bad("name length out of range"));
            }
            let mut name = vec![0u8; len];
            cur.read_exact(&mut name).map_err(trunc)?;
            let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
            if cur.read_u8().map_err(trunc)? != DTYPE_F64 {
                return Err(bad(&format!("unsupported dtype for `{name}`")));
            }
            let ndim = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(cur.read_u64::<LittleEndian>().map_err(trunc)? as usize);
            }
            let n: usize = shape.iter().product();
            let remaining = bytes.len() - cur.position() as usize;
            if n.checked_mul(8).is_none_or(|b| b > remaining) {
                return Err(bad(&format!("data of `{name}` truncated")));
            }
            let mut data = vec![0.0; n];
            cur.read_f64_into::<LittleEndian>(&mut data).map_err(trunc)?;
            let t = Tensor::new(&shape, data)?;
            match kind {
                0 => store.add_param(name, t)?,
                1 => store.add_buffer(name, t)?,
                k => return Err(bad(&format!("unknown entry kind {k}"))),
            }
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Overwrite values from `other`, which must hold exactly the same names
    /// and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        let same_names = self.params.keys().eq(other.params.keys()) && self.buffers.keys().eq(other.buffers.keys());
        if !same_names {
            return Err(Error::Checkpoint("architecture mismatch: parameter names differ".into()));
        }
        for (name, p) in self.params.iter_mut() {
            let src = &other.params[name].value;
            if src.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "architecture mismatch: `{name}` is {:?} in checkpoint, {:?} in model",
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
            p.grad = None;
        }
        for (name, b) in self.buffers.iter_mut() {
            let src = &other.buffers[name];
            if src.shape() != b.shape() {
                return Err(Error::Checkpoint(format!("architecture mismatch: buffer `{name}` shape differs")));
            }
            *b = src.clone();
        }
        Ok(())
    }
}
