//! Base-network (`MBAS`) and adapter (`MLRA`) checkpoints.
//!
//! Base: `"MBAS"`, `u32` version, `u32` entry count, then per entry a
//! `u32`-prefixed UTF-8 name, `u32` rank, `u32` dims and the `f32` data; the
//! network configuration is stored as the entry `__config__`. Adapters:
//! `"MLRA"`, `u32` version, `u32` entry count, then per entry the host name,
//! `u32` d_in, d_out, r, `f32` alpha, `W_down` (`d_in x r`) and `W_up`
//! (`r x d_out`). Both end with the CRC-32 of all preceding bytes.

use std::path::Path;

use motia_core::adapters::{AdapterSet, LoraAdapter};
use motia_core::denoiser::{DenoiserConfig, DenoiserNet};
use motia_core::Tensor;

use crate::binio::{Reader, Writer};
use crate::error::{self, Result};

pub const BASE_MAGIC: &[u8; 4] = b"MBAS";
pub const ADAPTER_MAGIC: &[u8; 4] = b"MLRA";
pub const VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "__config__";

fn config_values(c: &DenoiserConfig) -> [f32; 5] {
    [c.width, c.blocks, c.embed_dim, c.channels, c.groups].map(|v| v as f32)
}

pub fn encode_base(net: &DenoiserNet) -> Vec<u8> {
    let mut w = Writer::new(BASE_MAGIC, VERSION);
    w.u32(net.params().len() as u32 + 1);
    let write_entry = |w: &mut Writer, name: &str, shape: &[usize], data: &[f32]| {
        w.name(name);
        w.u32(shape.len() as u32);
        for &d in shape {
            w.u32(d as u32);
        }
        w.f32s(data);
    };
    write_entry(&mut w, CONFIG_ENTRY, &[5], &config_values(net.config()));
    for (name, t) in net.named_params() {
        write_entry(&mut w, name, t.shape(), t.data());
    }
    w.finish()
}

pub fn decode_base(bytes: &[u8], path: &Path) -> Result<DenoiserNet> {
    let mut r = Reader::open(bytes, BASE_MAGIC, VERSION, path)?;
    let count = r.u32()? as usize;
    let mut config = None;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.corrupt(format!("entry {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.corrupt("entry size overflow"))?;
        let data = r.f32s(n)?;
        if name == CONFIG_ENTRY {
            if data.len() != 5 || data.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
                return Err(r.corrupt("malformed configuration entry"));
            }
            let v: Vec<usize> = data.iter().map(|&x| x as usize).collect();
            config = Some(DenoiserConfig {
                width: v[0],
                blocks: v[1],
                embed_dim: v[2],
                channels: v[3],
                groups: v[4],
            });
        } else {
            named.push((name, Tensor::new(&shape, data)?));
        }
    }
    r.expect_end()?;
    let config = config.ok_or_else(|| r.corrupt("missing configuration entry"))?;
    Ok(DenoiserNet::from_params(config, named)?)
}

pub fn save_base(net: &DenoiserNet, path: &Path) -> Result<()> {
    error::write(path, &encode_base(net))
}

pub fn load_base(path: &Path) -> Result<DenoiserNet> {
    decode_base(&error::read(path)?, path)
}

pub fn encode_adapters(set: &AdapterSet) -> Vec<u8> {
    let mut w = Writer::new(ADAPTER_MAGIC, VERSION);
    w.u32(set.len() as u32);
    for (name, a) in set.iter() {
        w.name(name);
        w.u32(a.d_in() as u32);
        w.u32(a.d_out() as u32);
        w.u32(a.rank() as u32);
        w.f32(a.alpha);
        w.f32s(a.down.data());
        w.f32s(a.up.data());
    }
    w.finish()
}

pub fn decode_adapters(bytes: &[u8], path: &Path) -> Result<AdapterSet> {
    let mut r = Reader::open(bytes, ADAPTER_MAGIC, VERSION, path)?;
    let count = r.u32()? as usize;
    let mut set = AdapterSet::new();
    for _ in 0..count {
        let name = r.name()?;
        let d_in = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let alpha = r.f32()?;
        let n_down = d_in.checked_mul(rank).ok_or_else(|| r.corrupt("entry size overflow"))?;
        let n_up = rank.checked_mul(d_out).ok_or_else(|| r.corrupt("entry size overflow"))?;
        let down = Tensor::new(&[d_in, rank], r.f32s(n_down)?)?;
        let up = Tensor::new(&[rank, d_out], r.f32s(n_up)?)?;
        set.insert(name, LoraAdapter::new(down, up, alpha)?);
    }
    r.expect_end()?;
    Ok(set)
}

pub fn save_adapters(set: &AdapterSet, path: &Path) -> Result<()> {
    error::write(path, &encode_adapters(set))
}

pub fn load_adapters(path: &Path) -> Result<AdapterSet> {
    decode_adapters(&error::read(path)?, path)
}
