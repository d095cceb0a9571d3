//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "RFCN" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 rank | rank x u32 extents
//!             | u8 dtype (0 = f32, 1 = f64) | raw elements
//! u64 iteration | 32-byte RNG state
//! ```
//!
//! Parameters are stored as `<layer>.weight` / `<layer>.bias`, momentum
//! buffers under the same names with a `momentum/` prefix.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Params, TrainState};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RFCN";
pub const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

pub fn encode_checkpoint<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let mut named: Vec<(String, &Tensor<T>)> = state.params.named_tensors();
    named.extend(
        state
            .momentum
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("{MOMENTUM_PREFIX}{n}"), t)),
    );
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(T::DTYPE_CODE);
        for &v in t.data() {
            v.extend_le(&mut out);
        }
    }
    out.extend_from_slice(&state.iteration.to_le_bytes());
    out.extend_from_slice(&state.rng_seed);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.origin.to_string(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn elements<T: Scalar>(&mut self, dtype: u8, n: usize) -> Result<Vec<T>> {
        let width = match dtype {
            0 => 4,
            1 => 8,
            other => return Err(self.fail(format!("unknown dtype code {other}"))),
        };
        let raw = self.take(
            n.checked_mul(width)
                .ok_or_else(|| self.fail("tensor too large"))?,
            "tensor data",
        )?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| {
                if dtype == T::DTYPE_CODE {
                    T::from_le(c)
                } else if dtype == 0 {
                    T::lit(f32::from_le(c) as f64)
                } else {
                    T::lit(f64::from_le(c))
                }
            })
            .collect())
    }
}

/// Decodes a checkpoint; tensors stored in another dtype are converted.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], origin: &str) -> Result<TrainState<T>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        origin,
    };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")?;
    let mut params = Vec::new();
    let mut momentum = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = r.u8("dtype")?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.fail("extent overflow"))?;
        let data = r.elements::<T>(dtype, n)?;
        let t =
            Tensor::from_vec(&shape, data).map_err(|e| r.fail(format!("tensor `{name}`: {e}")))?;
        match name.strip_prefix(MOMENTUM_PREFIX) {
            Some(base) => momentum.push((base.to_string(), t)),
            None => params.push((name, t)),
        }
    }
    let iteration = r.u64("iteration counter")?;
    let rng_seed: [u8; 32] = r.take(32, "rng state")?.try_into().unwrap();
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after the rng state"));
    }
    let params = Params::from_named(params)?;
    let momentum = Params::from_named(momentum)?;
    let shapes = |p: &Params<T>| -> Vec<Vec<usize>> {
        p.named_tensors()
            .into_iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect()
    };
    if shapes(&params) != shapes(&momentum) {
        return Err(r.fail("momentum buffers do not match the parameters"));
    }
    Ok(TrainState {
        params,
        momentum,
        iteration,
        rng_seed,
    })
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
