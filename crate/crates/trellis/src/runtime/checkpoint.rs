//! Parameter checkpoints: a flat binary container of named tensors.
//!
//! Layout, in order:
//!
//! 1. the 7-byte magic `TCKPT1\n`;
//! 2. a little-endian `u64` with the manifest's byte length;
//! 3. the manifest: one line per tensor, `{dtype}[{dims}] {name}\n`, with
//!    dims comma-separated (empty for scalars), in the order the data
//!    buffers follow;
//! 4. each tensor's elements as little-endian values, back to back, in
//!    manifest order.
//!
//! Only parameters are stored; optimizer slots are training state and are
//! rebuilt from zero when training resumes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::runtime::params::ParameterStore;
use crate::tensor::{DType, Tensor};

const MAGIC: &[u8] = b"TCKPT1\n";

pub fn save(params: &ParameterStore, path: &Path) -> Result<()> {
    let mut manifest = String::new();
    let mut names = Vec::new();
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{}[{}] {}\n", t.dtype(), dims.join(","), name));
        names.push(name.to_string());
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::Checkpoint(format!("create {}: {e}", path.display())))?;
    let put = |file: &mut std::fs::File, bytes: &[u8]| -> Result<()> {
        file.write_all(bytes)
            .map_err(|e| Error::Checkpoint(format!("write {}: {e}", path.display())))
    };
    put(&mut file, MAGIC)?;
    put(&mut file, &(manifest.len() as u64).to_le_bytes())?;
    put(&mut file, manifest.as_bytes())?;
    for name in &names {
        let t = params.get(name)?;
        let mut buf: Vec<u8> = Vec::with_capacity(t.len() * 8);
        match t.dtype() {
            DType::Float32 => {
                for v in t.as_f32()? {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::Float64 => {
                for v in t.as_f64()? {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::Int32 => {
                for v in t.as_i32()? {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        put(&mut file, &buf)?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<ParameterStore> {
    let bad = |message: String| Error::Checkpoint(format!("{}: {message}", path.display()));
    let mut file = std::fs::File::open(path).map_err(|e| bad(format!("open: {e}")))?;

    let mut magic = [0u8; 7];
    file.read_exact(&mut magic).map_err(|e| bad(format!("read magic: {e}")))?;
    if magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len).map_err(|e| bad(format!("read manifest length: {e}")))?;
    let mut manifest = vec![0u8; u64::from_le_bytes(len) as usize];
    file.read_exact(&mut manifest).map_err(|e| bad(format!("read manifest: {e}")))?;
    let manifest =
        String::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8".into()))?;

    let mut entries = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        let parse = || -> Option<(DType, Vec<usize>, &str)> {
            let (head, name) = line.split_once(' ')?;
            let (dtype, dims) = head.strip_suffix(']')?.split_once('[')?;
            let dtype = match dtype {
                "f32" => DType::Float32,
                "f64" => DType::Float64,
                "i32" => DType::Int32,
                _ => return None,
            };
            let shape = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',').map(|d| d.parse().ok()).collect::<Option<Vec<usize>>>()?
            };
            Some((dtype, shape, name))
        };
        let (dtype, shape, name) =
            parse().ok_or_else(|| bad(format!("manifest line {}: {line:?}", i + 1)))?;
        entries.push((dtype, shape, name.to_string()));
    }

    let mut params = ParameterStore::new();
    for (dtype, shape, name) in entries {
        let n: usize = shape.iter().product();
        let width = match dtype {
            DType::Float32 | DType::Int32 => 4,
            DType::Float64 => 8,
        };
        let mut buf = vec![0u8; n * width];
        file.read_exact(&mut buf)
            .map_err(|e| bad(format!("read data for {name:?}: {e}")))?;
        let t = match dtype {
            DType::Float32 => {
                let vals: Vec<f32> = buf
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_f32(&shape, vals)?
            }
            DType::Float64 => {
                let vals: Vec<f64> = buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_f64(&shape, vals)?
            }
            DType::Int32 => {
                let vals: Vec<i32> = buf
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_i32(&shape, vals)?
            }
        };
        params.insert(&name, t);
    }
    let mut rest = [0u8; 1];
    match file.read(&mut rest) {
        Ok(0) => Ok(params),
        Ok(_) => Err(bad("trailing bytes after the last tensor".into())),
        Err(e) => Err(bad(format!("read: {e}"))),
    }
}
