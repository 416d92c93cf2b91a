//! 8-bit binary PGM (P5) heatmap export for score and attention maps.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encode an H×W map as a min-max normalized 8-bit P5 image.
pub fn encode(map: &Tensor) -> Result<Vec<u8>> {
    if map.shape().len() != 2 {
        return Err(Error::shape(format!(
            "PGM export needs an H×W map, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let data = map.data();
    let lo = data.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::numeric("non-finite values in PGM export"));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    out.extend(
        data.iter()
            .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

pub fn write(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let bytes = encode(map)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
