//! The `TTNS` binary tensor container.
//!
//! Layout, all little-endian:
//!
//! | bytes        | field                       |
//! |--------------|-----------------------------|
//! | 4            | magic `TTNS`                |
//! | 4            | `u32` version (currently 1) |
//! | 4            | `u32` rank                  |
//! | 8 × rank     | `u64` dims, outermost first |
//! | 4 × numel    | `f32` payload, row-major    |
//!
//! A bundle is several containers back to back, with a JSON sidecar naming
//! them in order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TTNS";
pub const VERSION: u32 = 1;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(NumError::Format(format!("unsupported version {version}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(NumError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + 4 * t.numel());
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    read_tensor(&mut &bytes[..])
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BundleEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BundleSidecar {
    format: String,
    version: u32,
    tensors: Vec<BundleEntry>,
    meta: serde_json::Value,
}

/// Path of the JSON sidecar belonging to a bundle file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_bundle<'a>(
    path: impl AsRef<Path>,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    meta: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    let mut listed = Vec::new();
    for (name, t) in entries {
        write_tensor(&mut w, t)?;
        listed.push(BundleEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
    }
    w.flush()?;
    let sidecar = BundleSidecar {
        format: "ttns-bundle".into(),
        version: VERSION,
        tensors: listed,
        meta,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| NumError::Format(e.to_string()))?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let path = path.as_ref();
    let json = std::fs::read_to_string(sidecar_path(path))?;
    let sidecar: BundleSidecar = serde_json::from_str(&json).map_err(|e| NumError::Format(e.to_string()))?;
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::with_capacity(sidecar.tensors.len());
    for e in sidecar.tensors {
        let t = read_tensor(&mut r)?;
        if t.shape() != e.shape.as_slice() {
            return Err(NumError::Format(format!(
                "{}: sidecar shape {:?} but payload {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
        out.push((e.name, t));
    }
    Ok((out, sidecar.meta))
}
