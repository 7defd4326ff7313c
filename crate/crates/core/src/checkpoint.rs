//! Binary named-tensor container used for model checkpoints and recorded
//! gradients.
//!
//! Layout: magic bytes `FILMCKPT`, u32 little-endian version (currently 1),
//! u32 tensor count; then per tensor: u16 name length, UTF-8 name, u8 dtype
//! code (1 = IEEE-754 binary64), u8 rank, rank u64 dims, and the row-major
//! little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{Gradients, Hyperparams, ModelParams, TensorMut, TensorRef};

pub const MAGIC: &[u8; 8] = b"FILMCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// A tensor read back from a container, before being matched to a model slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_tensors(path: &Path, tensors: &[(String, TensorRef<'_>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[DTYPE_F64])?;
        let dims = tensor.dims();
        w.write_all(&[dims.len() as u8])?;
        for d in &dims {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in tensor.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<RawTensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointMismatch(format!(
            "bad magic bytes in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported container version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::CheckpointMismatch("tensor name is not UTF-8".into()))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F64 {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {name}: unsupported dtype code {}",
                dtype[0]
            )));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            dims.push(read_u64(&mut r)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push(RawTensor { name, dims, data });
    }
    Ok(out)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Fills the named tensor slots of `target` from `raw`; every slot must be
/// present with matching shape, and no extra tensors are allowed.
fn fill_from_raw(slots: Vec<(String, TensorMut<'_>)>, raw: &[RawTensor]) -> Result<()> {
    if slots.len() != raw.len() {
        return Err(Error::CheckpointMismatch(format!(
            "expected {} tensors, container holds {}",
            slots.len(),
            raw.len()
        )));
    }
    let by_name: std::collections::HashMap<&str, &RawTensor> =
        raw.iter().map(|t| (t.name.as_str(), t)).collect();
    for (name, mut slot) in slots {
        let t = by_name.get(name.as_str()).ok_or_else(|| {
            Error::CheckpointMismatch(format!("missing tensor {name}"))
        })?;
        if t.dims != slot.dims() {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {name}: shape {:?} does not match expected {:?}",
                t.dims,
                slot.dims()
            )));
        }
        slot.as_slice_mut().copy_from_slice(&t.data);
    }
    Ok(())
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    write_tensors(path, &params.named_tensors())
}

/// Loads parameters into the shape dictated by `hyper`; any missing, extra,
/// or mis-shaped tensor is a [`Error::CheckpointMismatch`].
pub fn load_params(path: &Path, hyper: &Hyperparams) -> Result<ModelParams> {
    hyper.validate()?;
    let mut params = zero_params(hyper);
    let raw = read_tensors(path)?;
    fill_from_raw(params.named_tensors_mut(), &raw)?;
    Ok(params)
}

pub fn save_gradients(path: &Path, grads: &Gradients) -> Result<()> {
    write_tensors(path, &grads.named_tensors())
}

pub fn load_gradients(path: &Path, hyper: &Hyperparams) -> Result<Gradients> {
    hyper.validate()?;
    let mut grads = Gradients::zeros_like(&zero_params(hyper));
    let raw = read_tensors(path)?;
    fill_from_raw(grads.named_tensors_mut(), &raw)?;
    Ok(grads)
}

fn zero_params(hyper: &Hyperparams) -> ModelParams {
    // All-zero parameter set with the right shapes; filled by the loader.
    let g = Gradients::zeros_like(&ModelParams {
        hyper: *hyper,
        w_embed: Array2::zeros((hyper.vocab_size, hyper.hidden_dim)),
        p_embed: Array2::zeros((hyper.max_positions, hyper.hidden_dim)),
        layers: Vec::new(),
        ln_f: crate::model::LayerNormParams {
            gain: Array1::zeros(hyper.hidden_dim),
            bias: Array1::zeros(hyper.hidden_dim),
        },
        u_out: None,
    });
    ModelParams {
        hyper: *hyper,
        w_embed: g.w_embed,
        p_embed: g.p_embed,
        layers: g.layers,
        ln_f: g.ln_f,
        u_out: if hyper.tie_embeddings {
            None
        } else {
            Some(Array2::zeros((hyper.hidden_dim, hyper.vocab_size)))
        },
    }
}
