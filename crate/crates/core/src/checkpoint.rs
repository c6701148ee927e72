//! Flat binary tensor container.
//!
//! Layout: the magic `DDCF1`, then per-tensor records of
//! `(name length u64, name bytes, rank u64, dims u64..., data f64...)`,
//! all little-endian, until end of file. Round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"DDCF1";

pub fn write_container<'a, W: Write>(
    mut w: W,
    tensors: impl Iterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape.len() as u64).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 8];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Save every store entry (including non-trainable state) in insertion order.
pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    write_container(file, store.iter().map(|(_, e)| (e.name.as_str(), &e.tensor)))
}

/// Load a checkpoint into an existing store; every checkpoint tensor must
/// exist in the store with a matching shape.
pub fn load_params_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let file = BufReader::new(File::open(path)?);
    let tensors = read_container(file)?;
    let mut incoming = ParamStore::new();
    for (name, t) in tensors {
        incoming.add(&name, t, false);
    }
    store.load_values_from(&incoming)
}

pub fn save_single(path: &Path, name: &str, tensor: &Tensor) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    write_container(file, std::iter::once((name, tensor)))
}

pub fn load_single(path: &Path, name: &str) -> Result<Tensor> {
    let file = BufReader::new(File::open(path)?);
    let tensors = read_container(file)?;
    tensors
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {name} not found in {path:?}")))
}
