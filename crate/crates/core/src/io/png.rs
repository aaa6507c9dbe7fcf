//! 8-bit PNG emission and ingestion of normalized grids, heatmaps and masks.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};

use crate::analysis::Heatmap;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Writes a 1- or 3-channel grid, mapping `[-1, 1]` to bytes with clamping.
pub fn save_png(path: &Path, grid: &ImageGrid) -> Result<()> {
    let (w, h) = (grid.width() as u32, grid.height() as u32);
    let bytes = grid.to_bytes();
    match grid.channels() {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("sized buffer").save(path)?,
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("sized buffer").save(path)?,
        c => {
            return Err(Error::UnsupportedPixelFormat { path: path.into(), msg: format!("{c} channels; PNG output needs 1 or 3") })
        }
    }
    Ok(())
}

/// Reads an 8-bit grayscale or RGB PNG. Other bit depths and alpha
/// channels are rejected rather than silently converted.
pub fn load_png(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(b) => ImageGrid::from_bytes(h, w, 1, b.as_raw()),
        DynamicImage::ImageRgb8(b) => ImageGrid::from_bytes(h, w, 3, b.as_raw()),
        other => Err(Error::UnsupportedPixelFormat { path: path.into(), msg: format!("{:?}", other.color()) }),
    }
}

/// Grayscale heatmap scaled so the maximum maps to white.
pub fn save_heatmap(path: &Path, heat: &Heatmap) -> Result<()> {
    let max = heat.max();
    let px: Vec<u8> = heat
        .values
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    GrayImage::from_raw(heat.width as u32, heat.height as u32, px).expect("sized buffer").save(path)?;
    Ok(())
}

/// Pass/fail mask: passing pixels white, failing black.
pub fn save_mask(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let px = mask.iter().map(|&p| if p { 255 } else { 0 }).collect();
    GrayImage::from_raw(width as u32, height as u32, px)
        .ok_or_else(|| Error::ShapeMismatch { expected: format!("{} mask entries", height * width), actual: mask.len().to_string() })?
        .save(path)?;
    Ok(())
}

/// Lays equally shaped grids out row by row, `cols` per row, separated by
/// `gap` pixels of value 0 (mid gray).
pub fn tile_grids(grids: &[ImageGrid], cols: usize, gap: usize) -> Result<ImageGrid> {
    let first = grids.first().ok_or(Error::Empty("image list"))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let cols = cols.clamp(1, grids.len());
    let rows = grids.len().div_ceil(cols);
    let (th, tw) = (rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap);
    let mut out = ImageGrid::zeros(th, tw, c);
    for (i, g) in grids.iter().enumerate() {
        first.check_same_shape(g)?;
        let (r0, c0) = ((i / cols) * (h + gap), (i % cols) * (w + gap));
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    out.set(r0 + r, c0 + col, ch, g.get(r, col, ch));
                }
            }
        }
    }
    Ok(out)
}
