//! Binary container for network parameters and optimizer state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "JETFITCK"
//! version    u32       currently 1
//! header_len u32
//! header     JSON      {"arch": NetArch, "meta": any, "optim_step": u64 | null}
//! count      u32       number of tensors
//! tensor*    name_len u16, name utf-8, ndim u8, dims u64 × ndim, data f32 × prod(dims)
//! ```
//!
//! Tensor names are the canonical parameter names (`point.0.weight`,
//! `head.3.bias`, `global.1.bn.running_var`, ...). Adam moments, when present,
//! use the same names prefixed with `optim.m.` and `optim.v.`. Weights are
//! stored `in × out`, row-major.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{NetArch, WeightNet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"JETFITCK";
pub const VERSION: u32 = 1;

/// First and second moments of Adam, flattened in canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: WeightNet,
    /// Free-form run information (training config, epoch, validation score).
    pub meta: serde_json::Value,
    pub optim: Option<MomentState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: NetArch,
    meta: serde_json::Value,
    optim_step: Option<u64>,
}

struct Tensor {
    dims: Vec<u64>,
    data: Vec<f32>,
}

fn collect(net: &WeightNet, optim: Option<&MomentState>) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: [usize; 2], d: &[f64]| {
        let dims = if shape[0] == 1 { vec![shape[1] as u64] } else { vec![shape[0] as u64, shape[1] as u64] };
        out.push((
            name,
            Tensor {
                dims,
                data: d.iter().map(|&v| v as f32).collect(),
            },
        ));
    };
    net.visit(&mut |n, s, d| push(n.to_string(), s, d));
    net.visit_buffers(&mut |n, s, d| push(n.to_string(), s, d));
    if let Some(o) = optim {
        for (prefix, flat) in [("optim.m.", &o.m), ("optim.v.", &o.v)] {
            let mut pos = 0;
            net.visit(&mut |n, s, d| {
                push(format!("{prefix}{n}"), s, &flat[pos..pos + d.len()]);
                pos += d.len();
            });
        }
    }
    out
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if let Some(o) = &ckpt.optim {
        let n = ckpt.net.num_params();
        if o.m.len() != n || o.v.len() != n {
            return Err(Error::Checkpoint(format!(
                "optimizer moments have {}/{} entries for {n} parameters",
                o.m.len(),
                o.v.len()
            )));
        }
    }
    let header = serde_json::to_vec(&Header {
        arch: ckpt.net.arch.clone(),
        meta: ckpt.meta.clone(),
        optim_step: ckpt.optim.as_ref().map(|o| o.step),
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tensors = collect(&ckpt.net, ckpt.optim.as_ref());

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.dims.len() as u8);
        for d in &t.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let len = dims.iter().product::<u64>() as usize;
        let raw = r.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor { dims, data }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }

    let mut net = WeightNet::init_params(&header.arch, 0)?;
    let mut fill = |name: &str, shape: [usize; 2], dst: &mut [f64]| -> Result<()> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let numel: u64 = t.dims.iter().product();
        if numel as usize != dst.len() || t.dims.last().copied() != Some(shape[1] as u64) {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.dims, shape
            )));
        }
        for (d, s) in dst.iter_mut().zip(&t.data) {
            *d = *s as f64;
        }
        Ok(())
    };
    let mut status = Ok(());
    net.visit_mut(&mut |n, s, d| {
        if status.is_ok() {
            status = fill(n, s, d);
        }
    });
    net.visit_buffers_mut(&mut |n, s, d| {
        if status.is_ok() {
            status = fill(n, s, d);
        }
    });
    std::mem::replace(&mut status, Ok(()))?;

    let optim = match header.optim_step {
        None => None,
        Some(step) => {
            let n = net.num_params();
            let mut m = vec![0.0; n];
            let mut v = vec![0.0; n];
            for (prefix, flat) in [("optim.m.", &mut m), ("optim.v.", &mut v)] {
                let mut pos = 0;
                net.visit(&mut |name, s, d| {
                    if status.is_ok() {
                        status = fill(&format!("{prefix}{name}"), s, &mut flat[pos..pos + d.len()]);
                    }
                    pos += d.len();
                });
            }
            status?;
            Some(MomentState { step, m, v })
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    if !net.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok(Checkpoint {
        net,
        meta: header.meta,
        optim,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Rounds every parameter and buffer through f32, matching what a save/load
/// round trip produces.
pub fn quantize(net: &mut WeightNet) {
    net.visit_mut(&mut |_, _, d| d.iter_mut().for_each(|v| *v = *v as f32 as f64));
    net.visit_buffers_mut(&mut |_, _, d| d.iter_mut().for_each(|v| *v = *v as f32 as f64));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut net = WeightNet::init_params(&NetArch::tiny(), 4).unwrap();
        quantize(&mut net);
        let n = net.num_params();
        Checkpoint {
            net,
            meta: serde_json::json!({"epoch": 3}),
            optim: Some(MomentState {
                step: 17,
                m: (0..n).map(|i| i as f32 as f64 * 0.5).collect(),
                v: (0..n).map(|i| i as f32 as f64 * 0.25).collect(),
            }),
        }
    }

    #[test]
    fn round_trip_is_exact_after_quantization() {
        let ck = sample();
        let back = from_bytes(&to_bytes(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        save(&path, &ck).unwrap();
        assert_eq!(load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&sample()).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(to_bytes(&sample()).unwrap(), to_bytes(&sample()).unwrap());
    }
}
