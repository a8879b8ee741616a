//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic       8 bytes  "PXMLP\0v1"
//! in_dim      u32
//! activation  u32      0 softplus, 1 tanh, 2 relu
//! n_widths    u32
//! widths      u32 * n_widths
//! seed        u64
//! flat_len    u64
//! params      f64 * flat_len
//! ```

use std::io::{Read, Write};

use super::{Activation, MlpParams, MlpSpec, NnError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PXMLP\0v1";

pub fn write_params<W: Write>(mut w: W, params: &MlpParams) -> Result<(), NnError> {
    let spec = params.spec();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(spec.in_dim as u32).to_le_bytes())?;
    w.write_all(&spec.activation.code().to_le_bytes())?;
    w.write_all(&(spec.widths.len() as u32).to_le_bytes())?;
    for &width in &spec.widths {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    w.write_all(&params.seed().to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params.flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_params<R: Read>(mut r: R) -> Result<MlpParams, NnError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::BadCheckpoint(format!("magic {magic:?}")));
    }
    let in_dim = read_u32(&mut r)? as usize;
    let code = read_u32(&mut r)?;
    let activation = Activation::from_code(code)
        .ok_or_else(|| NnError::BadCheckpoint(format!("activation code {code}")))?;
    let n = read_u32(&mut r)? as usize;
    if n > 1024 {
        return Err(NnError::BadCheckpoint(format!("{n} hidden layers")));
    }
    let widths = (0..n)
        .map(|_| read_u32(&mut r).map(|w| w as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let seed = read_u64(&mut r)?;
    let len = read_u64(&mut r)? as usize;
    let spec = MlpSpec::new(in_dim, widths, activation);
    spec.validate()?;
    if len != spec.param_count() {
        return Err(NnError::BadCheckpoint(format!(
            "flat length {len} does not match spec ({})",
            spec.param_count()
        )));
    }
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    let flat = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    MlpParams::from_flat(spec, flat, seed)
}
