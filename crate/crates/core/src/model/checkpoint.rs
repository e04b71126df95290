//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "LMSCNET\0"
//! version u32      1
//! config  u32 length + UTF-8 TOML of the ModelConfig
//! count   u32      number of parameters
//! each:   u32 name length, name, u32 rank, u64 per extent, f64 per element
//! adam    u8 flag; if 1: u64 step, f64 beta1, beta2, eps,
//!         then per parameter its first and second moments (f64 each)
//! ```
//!
//! Trailing bytes are rejected, as is any short read.

use std::io::{Read, Write};
use std::path::Path;

use super::{LmscNet, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::AdamState;
use crate::Scalar;

const MAGIC: &[u8; 8] = b"LMSCNET\0";
const VERSION: u32 = 1;

/// A model together with optional optimizer state.
#[derive(Debug)]
pub struct Checkpoint<T> {
    pub model: LmscNet<T>,
    pub adam: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize to bytes.
pub fn save_checkpoint<T: Scalar>(model: &LmscNet<T>, adam: Option<&AdamState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = toml::to_string(model.config()).expect("config serializes");
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, model.parameters().len());
    for p in model.parameters() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.shape().len());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, p.value.data().iter().map(|v| v.as_f64()));
    }
    match adam {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            out.extend_from_slice(&st.step.to_le_bytes());
            put_f64s(&mut out, [st.beta1, st.beta2, st.eps]);
            for (i, p) in model.parameters().iter().enumerate() {
                let zeros = vec![0.0; p.numel()];
                let m = st.m.get(i).unwrap_or(&zeros);
                let v = st.v.get(i).unwrap_or(&zeros);
                put_f64s(&mut out, m.iter().copied());
                put_f64s(&mut out, v.iter().copied());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format(format!("{what}: size overflow")))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

/// Parse bytes produced by [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_text = r.string("config")?;
    let config: ModelConfig =
        toml::from_str(&cfg_text).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = LmscNet::<T>::new(config)?;
    let count = r.u32("parameter count")?;
    if count != model.parameters().len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, config implies {}",
            model.parameters().len()
        )));
    }
    for p in model.parameters_mut() {
        let name = r.string("parameter name")?;
        if name != p.name {
            return Err(Error::Format(format!(
                "expected parameter {}, found {name}",
                p.name
            )));
        }
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        if shape != p.shape() {
            return Err(Error::Format(format!(
                "parameter {name}: shape {shape:?} does not match {:?}",
                p.shape()
            )));
        }
        let vals = r.f64s(p.numel(), &name)?;
        p.set_data(vals.into_iter().map(T::from_f64_lossy).collect())?;
    }
    let adam = match r.take(1, "optimizer flag")?[0] {
        0 => None,
        1 => {
            let step = r.u64("adam step")?;
            let h = r.f64s(3, "adam hyperparameters")?;
            let mut st = AdamState::new(h[0], h[1], h[2]);
            st.step = step;
            for p in model.parameters() {
                st.m.push(r.f64s(p.numel(), "adam first moment")?);
                st.v.push(r.f64s(p.numel(), "adam second moment")?);
            }
            Some(st)
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { model, adam })
}

/// Write atomically: to a sibling temp file, then rename.
pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    model: &LmscNet<T>,
    adam: Option<&AdamState>,
) -> Result<()> {
    let bytes = save_checkpoint(model, adam);
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(format!("writing checkpoint {}", path.display()), e);
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    load_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
