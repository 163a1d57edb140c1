//! `JCNP` parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "JCNP" | version: u32 | block*
//! block  = name_len: u32 | name: utf-8 | dims: 4 × u32 | payload: f64 × prod(dims)
//! ```
//!
//! Each layer is written as two blocks, `<layer>.kernel` with dims `(out, in, kh, kw)` and
//! `<layer>.bias` with dims `(out, 1, 1, 1)`. Blocks run to end of file.

use std::io::{Read, Write};

use super::{LayerParams, NetworkParams};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"JCNP";
pub const PARAMS_VERSION: u32 = 1;

/// One named, four-dimensional array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub dims: [u32; 4],
    pub values: Vec<f64>,
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_block<W: Write>(w: &mut W, name: &str, dims: [usize; 4], values: &[f64]) -> std::io::Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    for d in dims {
        write_u32(w, d as u32)?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_params<W: Write>(mut w: W, params: &NetworkParams) -> std::io::Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    write_u32(&mut w, PARAMS_VERSION)?;
    for (name, layer) in &params.layers {
        write_block(&mut w, &format!("{name}.kernel"), layer.dims(), &layer.kernels)?;
        write_block(&mut w, &format!("{name}.bias"), [layer.out_channels(), 1, 1, 1], &layer.biases)?;
    }
    Ok(())
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        path: "<params>".into(),
        reason: reason.into(),
    }
}

fn read_blocks(bytes: &[u8]) -> Result<Vec<ParamBlock>> {
    if bytes.len() < 8 || &bytes[..4] != PARAMS_MAGIC {
        return Err(format_err("missing JCNP magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PARAMS_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(format_err("truncated block"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut blocks = Vec::new();
    while let Ok(len) = take(4) {
        let name_len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| format_err("block name is not utf-8"))?
            .to_string();
        let mut dims = [0u32; 4];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(4)?.try_into().unwrap());
        }
        let count = dims.iter().map(|&d| d as usize).product::<usize>();
        let payload = take(count * 8)?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push(ParamBlock { name, dims, values });
    }
    Ok(blocks)
}

pub fn read_params<R: Read>(mut r: R) -> Result<NetworkParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| format_err(format!("read failed: {e}")))?;
    let blocks = read_blocks(&bytes)?;
    if blocks.len() % 2 != 0 {
        return Err(format_err("odd number of blocks"));
    }
    let mut net = NetworkParams::new();
    for pair in blocks.chunks_exact(2) {
        let (k, b) = (&pair[0], &pair[1]);
        let layer = k
            .name
            .strip_suffix(".kernel")
            .ok_or_else(|| format_err(format!("expected a .kernel block, found {}", k.name)))?;
        if b.name != format!("{layer}.bias") {
            return Err(format_err(format!("expected {layer}.bias, found {}", b.name)));
        }
        let [o, i, kh, kw] = k.dims.map(|d| d as usize);
        let params = LayerParams::new(o, i, kh, kw, k.values.clone(), b.values.clone())
            .map_err(|e| format_err(e.to_string()))?;
        net.push(layer, params);
    }
    Ok(net)
}
