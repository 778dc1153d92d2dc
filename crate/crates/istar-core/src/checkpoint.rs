//! Binary checkpoint format.
//!
//! Layout, all integers little-endian, floats raw 32-bit little-endian:
//!
//! ```text
//! magic            8 bytes  "ISTAR001"
//! config_len       u32
//! config_text      key=value lines: scale, channels, iterations,
//!                  st_channels, colors
//! tensor_count     u32
//! tensor*          u32 name_len, UTF-8 name, u32 rank, u32 extents[rank],
//!                  f32 data[numel]
//! -- optional optimizer section (training checkpoints) --
//! opt_count        u32      (two tensors per parameter)
//! tensor*          same framing, names "<param>.m" and "<param>.v"
//! step             u64
//! ```
//!
//! Tensors appear in the canonical topology order; loading validates names,
//! order, and shapes, so a checkpoint with any missing or extra tensor fails.
//! Writing is byte-deterministic: save -> load -> save reproduces the file
//! exactly.

use std::path::Path;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::{IstarModel, ModelConfig};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ISTAR001";

fn config_text(c: &ModelConfig) -> String {
    format!(
        "scale={}\nchannels={}\niterations={}\nst_channels={}\ncolors={}\n",
        c.scale, c.channels, c.iterations, c.st_channels, c.colors
    )
}

fn parse_config_text(text: &str) -> Result<ModelConfig> {
    let mut scale = None;
    let mut channels = None;
    let mut iterations = None;
    let mut st_channels = None;
    let mut colors = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line: {line}")))?;
        let v: usize = value
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad config value {line}: {e}")))?;
        match key {
            "scale" => scale = Some(v),
            "channels" => channels = Some(v),
            "iterations" => iterations = Some(v),
            "st_channels" => st_channels = Some(v),
            "colors" => colors = Some(v),
            other => return Err(Error::Checkpoint(format!("unknown config key {other}"))),
        }
    }
    let want = |name: &str, v: Option<usize>| {
        v.ok_or_else(|| Error::Checkpoint(format!("config key {name} missing")))
    };
    Ok(ModelConfig {
        scale: want("scale", scale)?,
        channels: want("channels", channels)?,
        iterations: want("iterations", iterations)?,
        st_channels: want("st_channels", st_channels)?,
        colors: want("colors", colors)?,
    })
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Element>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.rank() as u32);
    for &e in t.shape() {
        put_u32(buf, e as u32);
    }
    for v in t.iter() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
}

fn encode<T: Element>(model: &IstarModel<T>, with_optimizer: bool) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let cfg = config_text(&model.config);
    put_u32(&mut buf, cfg.len() as u32);
    buf.extend_from_slice(cfg.as_bytes());
    put_u32(&mut buf, model.params.len() as u32);
    for (name, entry) in model.params.iter() {
        put_tensor(&mut buf, name, &entry.value);
    }
    if with_optimizer {
        put_u32(&mut buf, 2 * model.params.len() as u32);
        for (name, entry) in model.params.iter() {
            put_tensor(&mut buf, &format!("{name}.m"), &entry.m);
            put_tensor(&mut buf, &format!("{name}.v"), &entry.v);
        }
        buf.extend_from_slice(&model.params.step().to_le_bytes());
    }
    buf
}

/// Write the model weights only.
pub fn save_model<T: Element>(path: &Path, model: &IstarModel<T>) -> Result<()> {
    std::fs::write(path, encode(model, false))?;
    Ok(())
}

/// Write the model weights plus Adam moments and the step counter, enough
/// to resume training bit-identically.
pub fn save_training<T: Element>(path: &Path, model: &IstarModel<T>) -> Result<()> {
    std::fs::write(path, encode(model, true))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file while reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn tensor<T: Element>(&mut self) -> Result<(String, Tensor<T>)> {
        let name_len = self.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(name_len, "tensor name")?)
            .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?
            .to_string();
        let rank = self.u32("tensor rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(4 * numel, "tensor data")?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Load a checkpoint. Returns the model (with Adam moments and step counter
/// restored when the file has an optimizer section) and whether that
/// section was present.
pub fn load<T: Element>(path: &Path) -> Result<(IstarModel<T>, bool)> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor {
        buf: &bytes,
        pos: 0,
    };
    if cur.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let cfg_len = cur.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(cur.take(cfg_len, "config block")?)
        .map_err(|e| Error::Checkpoint(format!("config not UTF-8: {e}")))?;
    let config = parse_config_text(cfg_text)?;

    let count = cur.u32("tensor count")? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let (name, tensor) = cur.tensor::<T>()?;
        store.insert(name, tensor)?;
    }

    let mut has_optimizer = false;
    if !cur.at_end() {
        has_optimizer = true;
        let opt_count = cur.u32("optimizer tensor count")? as usize;
        if opt_count != 2 * count {
            return Err(Error::Checkpoint(format!(
                "optimizer section has {opt_count} tensors, expected {}",
                2 * count
            )));
        }
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in &names {
            for suffix in ["m", "v"] {
                let (got_name, tensor) = cur.tensor::<T>()?;
                let want = format!("{name}.{suffix}");
                if got_name != want {
                    return Err(Error::Checkpoint(format!(
                        "optimizer tensor {got_name}, expected {want}"
                    )));
                }
                let entry = store.entry_mut(name).expect("known name");
                if tensor.shape() != entry.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{got_name}: moment shape {:?} does not match parameter {:?}",
                        tensor.shape(),
                        entry.value.shape()
                    )));
                }
                match suffix {
                    "m" => entry.m = tensor,
                    _ => entry.v = tensor,
                }
            }
        }
        let step = cur.u64("step counter")?;
        store.set_step(step);
    }
    if !cur.at_end() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - cur.pos
        )));
    }

    let model = IstarModel::from_store(config, store)?;
    Ok((model, has_optimizer))
}
