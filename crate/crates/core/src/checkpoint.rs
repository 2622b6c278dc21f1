//! Single-file tensor dumps.
//!
//! Layout, all integers little-endian:
//! `b"SADP"`, `u32` version, `u32` tensor count, then per tensor:
//! `u32` name length, UTF-8 name, `u8` dtype tag (1 = f64), `u8` frozen flag,
//! `u8` rank, `u64` per dimension, and the values as `f64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SADP";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub frozen: bool,
    pub tensor: Tensor,
}

pub fn save<W: Write>(store: &ParamStore, mut out: W) -> Result<()> {
    let params: Vec<_> = store.iter().collect();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, p) in params {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&[DTYPE_F64, u8::from(!p.tensor.requires_grad()), p.tensor.shape().len() as u8])?;
        for &d in p.tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let bytes: Vec<u8> = p.tensor.value_bytes().collect();
        out.write_all(&bytes)?;
    }
    out.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn load<R: Read>(mut input: R) -> Result<Vec<NamedTensor>> {
    if &read_array::<4, _>(&mut input)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut input)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut input)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut input)?) as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let [dtype, frozen, rank] = read_array(&mut input)?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {dtype}")));
        }
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(read_array(&mut input)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let values = (0..numel)
            .map(|_| Ok(f64::from_le_bytes(read_array(&mut input)?)))
            .collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(&shape, values)?.with_requires_grad(frozen == 0);
        out.push(NamedTensor {
            name,
            frozen: frozen != 0,
            tensor,
        });
    }
    Ok(out)
}

/// Copies saved values into the store's parameters of the same name.
/// Every present parameter must appear in the dump with the same shape.
pub fn restore(store: &mut ParamStore, saved: &[NamedTensor]) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let entry = saved
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let t = store.tensor_mut(id);
        if t.shape() != entry.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not match saved {:?}",
                t.shape(),
                entry.tensor.shape()
            )));
        }
        t.values_mut().copy_from_slice(entry.tensor.values());
    }
    Ok(())
}
