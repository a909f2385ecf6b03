//! Sweep grid: one row per starting step, stacked top to bottom.

use std::path::Path;

use speckle_ddpm::data::io::save_png8;
use speckle_ddpm::{Image, Result};

/// Pixels between rows, drawn at the top of the display range.
const GAP: usize = 2;

/// Stack equally sized images vertically and write an 8-bit PNG that maps
/// `[-1, 1]` to `[0, 255]`.
pub fn write_column(rows: &[Image], path: &Path) -> Result<()> {
    let (h, w) = rows
        .first()
        .map(Image::shape)
        .ok_or_else(|| speckle_ddpm::Error::Contract("no images for the grid".into()))?;
    let total = rows.len() * h + (rows.len() - 1) * GAP;
    let grid = Image::from_fn(total, w, |(r, c)| {
        let (k, y) = (r / (h + GAP), r % (h + GAP));
        if y < h {
            rows[k].get(y, c)
        } else {
            1.0
        }
    });
    save_png8(&grid, -1.0, 1.0, path)
}
