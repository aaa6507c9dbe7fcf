//! File formats: datasets, PNG images, `TNS1` tensors and `PDX1` dictionaries.

pub mod dataset;
pub mod pdx;
pub mod png;
pub mod tensor;

pub use dataset::{load_dataset, DatasetFormat, DatasetSpec};
pub use pdx::{read_dictionary, write_dictionary};
pub use png::{load_png, save_png};
pub use tensor::{load_tensors, save_tensors, Tensor};

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Reads an image from a `.png` file or the first record of a `.tns` file.
pub fn load_image(path: &Path) -> Result<ImageGrid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => load_png(path),
        Some("tns") => load_tensors(path)?
            .first()
            .ok_or_else(|| Error::format(path, "no tensor records"))?
            .to_grid(),
        _ => Err(Error::format(path, "expected a .png or .tns file")),
    }
}
