//! Foreground-only rendering: keep the original colours where the mask marks
//! foreground and paint everything else white.

use crate::error::{Error, Result};
use crate::raster::Raster;

/// `image` where `mask >= 0.5`, white elsewhere.
pub fn enhance(image: &Raster, mask: &Raster) -> Result<Raster> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::invalid(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    if mask.channels() != 1 {
        return Err(Error::invalid("mask must have one channel"));
    }
    Ok(Raster::from_fn(image.height(), image.width(), image.channels(), |y, x, c| {
        if mask.get(y, x, 0) >= 0.5 {
            image.get(y, x, c)
        } else {
            1.0
        }
    }))
}
