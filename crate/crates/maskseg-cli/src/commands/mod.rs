pub mod ablate;
pub mod datagen;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod train;

use maskseg::{Error, Result};

/// Parse a "HxW" size such as `48x64`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::config(format!("size '{}' must be HxW, e.g. 48x64", s)))?;
    let h = h
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("bad height in size '{}'", s)))?;
    let w = w
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("bad width in size '{}'", s)))?;
    Ok((h, w))
}
