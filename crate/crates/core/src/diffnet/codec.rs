//! Binary parameter format: the magic `CARRL1`, the layer-width count and
//! widths as little-endian `u32`, then every parameter as a little-endian
//! `f64` in layout order.

use super::{NetSpec, ParamSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"CARRL1";

pub fn encode_params(spec: &NetSpec, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * spec.widths().len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(spec.widths().len() as u32).to_le_bytes());
    for &w in spec.widths() {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one parameter block. Returns the layer widths, the parameters
/// and the number of bytes consumed.
pub fn decode_params(bytes: &[u8]) -> Result<(Vec<usize>, ParamSet, usize)> {
    let mut pos = 0;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("truncated parameter block"))?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    if take(&mut pos, 6)? != MAGIC {
        return Err(Error::format("bad magic in parameter block"));
    }
    let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    if !(2..=64).contains(&n) {
        return Err(Error::format(format!("implausible layer count {n}")));
    }
    let mut widths = Vec::with_capacity(n);
    for _ in 0..n {
        let w = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        if w == 0 {
            return Err(Error::format("zero layer width"));
        }
        widths.push(w);
    }
    let count: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let raw = take(&mut pos, count * 8)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((widths, ParamSet::from_vec(values), pos))
}
