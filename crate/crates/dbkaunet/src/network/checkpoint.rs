//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "DBKAUNET"
//! format_version   u32      currently 1
//! config           u32 byte length + UTF-8 `key=value` lines
//! epoch            u64
//! best_f1          f64
//! rng_seed         u64      (duplicates config seed for quick inspection)
//! parameters       u32 count, then per tensor:
//!                    name   u32 length + UTF-8
//!                    dtype  u8 (0 = f64)
//!                    rank   u32, dims u32 × rank
//!                    data   f64 × numel
//! bn statistics    u32 count, then per entry:
//!                    name   u32 length + UTF-8 ("<bn>.mean" / "<bn>.var")
//!                    len    u32, data f64 × len
//! optimizer        u8 present flag; when 1:
//!                    lr0 f64, weight_decay f64, total_steps u64, step u64,
//!                    u32 slot count, per slot: u32 len + f64 × len for the
//!                    first moments, then the same sequence for the second
//! ```
//!
//! A round-trip reproduces forward outputs bitwise: raw f64 bits are stored.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::network::model::{AblationFlags, DbKaUnet, NetworkConfig};
use crate::network::optim::AdamW;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"DBKAUNET";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

// ---------------------------------------------------------------------------
// Primitive writers/readers

fn w_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn w_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn w_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn w_str(out: &mut Vec<u8>, s: &str) {
    w_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn w_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        w_f64(out, v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(bad("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("non-UTF-8 string"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(8 * n)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

// ---------------------------------------------------------------------------
// Config as key=value text

fn config_text(c: &NetworkConfig) -> String {
    let f = c.flags;
    format!(
        "base_channels={}\nseed={}\nuse_transformer={}\nuse_hdbe={}\nuse_cci={}\nuse_sfe={}\nuse_gaf={}\nuse_kan_decoder={}\n",
        c.base_channels,
        c.seed,
        f.use_transformer as u8,
        f.use_hdbe as u8,
        f.use_cci as u8,
        f.use_sfe as u8,
        f.use_gaf as u8,
        f.use_kan_decoder as u8
    )
}

fn parse_config(text: &str) -> Result<NetworkConfig, CheckpointError> {
    let mut map = HashMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad config line '{line}'")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<String, CheckpointError> {
        map.get(k).cloned().ok_or_else(|| bad(format!("config key '{k}' missing")))
    };
    let num = |k: &str| -> Result<u64, CheckpointError> {
        get(k)?.parse().map_err(|_| bad(format!("config key '{k}' not numeric")))
    };
    let flag = |k: &str| -> Result<bool, CheckpointError> { Ok(num(k)? != 0) };
    let flags = AblationFlags {
        use_transformer: flag("use_transformer")?,
        use_hdbe: flag("use_hdbe")?,
        use_cci: flag("use_cci")?,
        use_sfe: flag("use_sfe")?,
        use_gaf: flag("use_gaf")?,
        use_kan_decoder: flag("use_kan_decoder")?,
    };
    Ok(NetworkConfig::new(num("base_channels")? as usize, num("seed")?, flags))
}

// ---------------------------------------------------------------------------
// Save / load

pub fn save_checkpoint(
    path: &Path,
    model: &DbKaUnet,
    opt: Option<&AdamW>,
    epoch: usize,
    best_f1: f64,
) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    w_u32(&mut out, FORMAT_VERSION);
    w_str(&mut out, &config_text(&model.config));
    w_u64(&mut out, epoch as u64);
    w_f64(&mut out, best_f1);
    w_u64(&mut out, model.config.seed);

    let params = model.named_params();
    w_u32(&mut out, params.len() as u32);
    for (name, t) in &params {
        w_str(&mut out, name);
        out.push(0); // dtype f64
        w_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            w_u32(&mut out, d as u32);
        }
        w_f64s(&mut out, &t.to_vec());
    }

    let bns = model.named_bn_states();
    w_u32(&mut out, 2 * bns.len() as u32);
    for (name, bn) in &bns {
        for (suffix, stat) in [("mean", &bn.running_mean), ("var", &bn.running_var)] {
            let data = stat.borrow();
            w_str(&mut out, &format!("{name}.{suffix}"));
            w_u32(&mut out, data.len() as u32);
            w_f64s(&mut out, &data);
        }
    }

    match opt {
        Some(o) => {
            out.push(1);
            w_f64(&mut out, o.lr0);
            w_f64(&mut out, o.weight_decay);
            w_u64(&mut out, o.total_steps as u64);
            w_u64(&mut out, o.step as u64);
            w_u32(&mut out, o.m.len() as u32);
            for table in [&o.m, &o.v] {
                for slot in table.iter() {
                    w_u32(&mut out, slot.len() as u32);
                    w_f64s(&mut out, slot);
                }
            }
        }
        None => out.push(0),
    }

    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Restores the model (and optimizer, when one was saved) along with the
/// epoch counter and best validation F1.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(DbKaUnet, Option<AdamW>, usize, f64), CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format_version {version}")));
    }
    let config = parse_config(&r.str()?)?;
    let epoch = r.u64()? as usize;
    let best_f1 = r.f64()?;
    let _seed = r.u64()?;

    let model = DbKaUnet::new(config);
    let by_name: HashMap<String, _> = model.named_params().into_iter().collect();
    let n = r.u32()? as usize;
    if n != by_name.len() {
        return Err(bad(format!("parameter count {} does not match config ({})", n, by_name.len())));
    }
    for _ in 0..n {
        let name = r.str()?;
        if r.u8()? != 0 {
            return Err(bad(format!("unknown dtype for '{name}'")));
        }
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let data = r.f64s(numel)?;
        let t = by_name.get(&name).ok_or_else(|| bad(format!("unknown parameter '{name}'")))?;
        if t.shape() != dims.as_slice() {
            return Err(bad(format!(
                "parameter '{name}': shape {:?} in file, {:?} in model",
                dims,
                t.shape()
            )));
        }
        t.set_data(&data);
    }

    let bn_by_name: HashMap<String, _> = model.named_bn_states().into_iter().collect();
    let nb = r.u32()? as usize;
    for _ in 0..nb {
        let name = r.str()?;
        let len = r.u32()? as usize;
        let data = r.f64s(len)?;
        let (base, suffix) =
            name.rsplit_once('.').ok_or_else(|| bad(format!("bad bn entry '{name}'")))?;
        let bn = bn_by_name.get(base).ok_or_else(|| bad(format!("unknown bn state '{name}'")))?;
        let stat = match suffix {
            "mean" => &bn.running_mean,
            "var" => &bn.running_var,
            _ => return Err(bad(format!("bad bn suffix in '{name}'"))),
        };
        let mut s = stat.borrow_mut();
        if s.len() != data.len() {
            return Err(bad(format!("bn state '{name}' length mismatch")));
        }
        s.copy_from_slice(&data);
    }

    let opt = if r.u8()? == 1 {
        let lr0 = r.f64()?;
        let weight_decay = r.f64()?;
        let total_steps = r.u64()? as usize;
        let step = r.u64()? as usize;
        let slots = r.u32()? as usize;
        let read_table = |r: &mut Reader| -> Result<Vec<Vec<f64>>, CheckpointError> {
            (0..slots)
                .map(|_| {
                    let len = r.u32()? as usize;
                    r.f64s(len)
                })
                .collect()
        };
        let mut o = AdamW::new(lr0, weight_decay, total_steps);
        o.step = step;
        o.m = read_table(&mut r)?;
        o.v = read_table(&mut r)?;
        Some(o)
    } else {
        None
    };
    if !r.done() {
        return Err(bad("trailing bytes after checkpoint payload"));
    }
    Ok((model, opt, epoch, best_f1))
}
