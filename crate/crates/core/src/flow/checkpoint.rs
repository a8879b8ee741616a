//! Potential checkpoints: a short header with the flow constants followed by
//! the MLP parameter block.
//!
//! ```text
//! magic    8 bytes  "PXFLOW\0\x01"
//! lambda   f64 LE
//! horizon  f64 LE
//! steps    u64 LE
//! network  MLP block (see `nn::write_params`)
//! ```

use std::io::{Read, Write};

use super::{FlowError, Potential, Result};
use crate::nn::{read_params, write_params, NnError};

pub const POTENTIAL_MAGIC: &[u8; 8] = b"PXFLOW\0\x01";

/// Writes `potential` with the `lambda` and step count it was trained with.
pub fn write_potential<W: Write>(mut w: W, potential: &Potential, lambda: f64, steps: usize) -> Result<()> {
    let io = |e: std::io::Error| FlowError::Nn(NnError::Io(e));
    w.write_all(POTENTIAL_MAGIC).map_err(io)?;
    w.write_all(&lambda.to_le_bytes()).map_err(io)?;
    w.write_all(&potential.horizon.to_le_bytes()).map_err(io)?;
    w.write_all(&(steps as u64).to_le_bytes()).map_err(io)?;
    write_params(&mut w, &potential.net)?;
    Ok(())
}

/// Reads a checkpoint written by [`write_potential`]; returns the potential,
/// `lambda` and the training step count.
pub fn read_potential<R: Read>(mut r: R) -> Result<(Potential, f64, usize)> {
    let bad = |m: &str| FlowError::Nn(NnError::BadCheckpoint(m.to_owned()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != POTENTIAL_MAGIC {
        return Err(bad("not a potential checkpoint"));
    }
    let mut word = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        Ok(word)
    };
    let lambda = f64::from_le_bytes(next(&mut r)?);
    let horizon = f64::from_le_bytes(next(&mut r)?);
    let steps = u64::from_le_bytes(next(&mut r)?) as usize;
    if !(lambda > 0.0 && horizon > 0.0 && steps > 0) {
        return Err(bad("flow constants out of range"));
    }
    let net = read_params(&mut r)?;
    if net.spec().in_dim < 2 {
        return Err(bad("potential input must hold space and time"));
    }
    Ok((Potential { net, horizon }, lambda, steps))
}
