//! Image grids, square windows and boundary handling.
//!
//! All pixel data is row-major and channel-last: the value of channel `k` at
//! `(row, col)` lives at `(row * width + col) * channels + k`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H x W x C` image with values nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    label: Option<u32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let expected = height * width * channels;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Empty("image dimensions"));
        }
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width}x{channels} = {expected} values"),
                actual: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        Ok(Self { height, width, channels, data, label: None })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty image");
        assert!(value.is_finite());
        Self { height, width, channels, data: vec![value; height * width * channels], label: None }
    }

    /// Builds a grid from raw bytes, mapping `v -> v / 127.5 - 1`.
    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| byte_to_unit(b)).collect())
    }

    /// Inverse of [`ImageGrid::from_bytes`], clamping out-of-range values.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| unit_to_byte(v)).collect()
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> Shape {
        Shape { height: self.height, width: self.width, channels: self.channels }
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    /// Channel values of pixel `(row, col)`.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col) + channel]
    }

    /// Writes one value. Panics on a non-finite value.
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        assert!(value.is_finite(), "non-finite pixel value");
        let i = self.index(row, col) + channel;
        self.data[i] = value;
    }

    /// Same shape and label, new data. The data must be finite.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        let mut out = Self::new(self.height, self.width, self.channels, data)?;
        out.label = self.label;
        Ok(out)
    }

    pub fn check_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape().to_string(),
                actual: other.shape().to_string(),
            });
        }
        Ok(())
    }

    pub fn squared_distance(&self, other: &ImageGrid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[inline]
pub fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

#[inline]
pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Boundary condition for windows that reach past the image edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Circular,
    Zero,
}

impl fmt::Display for PaddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PaddingMode::Circular => "circular",
            PaddingMode::Zero => "zero",
        })
    }
}

impl FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "circular" | "periodic" => Ok(PaddingMode::Circular),
            "zero" | "zeros" => Ok(PaddingMode::Zero),
            other => Err(Error::Config(format!("unknown padding mode '{other}'"))),
        }
    }
}

/// A `P x P` window centered on a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    size: usize,
    row: usize,
    col: usize,
}

impl Window {
    pub fn new(size: usize, row: usize, col: usize) -> Result<Self> {
        check_patch_size(size)?;
        Ok(Self { size, row, col })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn center(&self) -> (usize, usize) {
        (self.row, self.col)
    }

    pub fn half(&self) -> usize {
        self.size / 2
    }
}

pub fn check_patch_size(size: usize) -> Result<()> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::InvalidPatchSize(size));
    }
    Ok(())
}

/// Number of padded rows/columns a window sees past each image side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BorderSignature {
    pub top: u16,
    pub bottom: u16,
    pub left: u16,
    pub right: u16,
}

impl BorderSignature {
    pub const INTERIOR: BorderSignature = BorderSignature { top: 0, bottom: 0, left: 0, right: 0 };

    pub fn new(top: u16, bottom: u16, left: u16, right: u16) -> Self {
        Self { top, bottom, left, right }
    }

    /// Signature of a `size`-window centered at `(row, col)` in an
    /// `height x width` image under zero padding.
    pub fn of(height: usize, width: usize, size: usize, row: usize, col: usize) -> Self {
        let half = size / 2;
        let top = half.saturating_sub(row) as u16;
        let bottom = (row + half).saturating_sub(height - 1) as u16;
        let left = half.saturating_sub(col) as u16;
        let right = (col + half).saturating_sub(width - 1) as u16;
        Self { top, bottom, left, right }
    }

    pub fn is_interior(&self) -> bool {
        *self == Self::INTERIOR
    }
}

impl fmt::Display for BorderSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.top, self.bottom, self.left, self.right)
    }
}

/// Where a dictionary patch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    pub image: usize,
    pub row: usize,
    pub col: usize,
    pub label: Option<u32>,
}

/// Values of one window, `size * size * channels` entries, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub source: Option<PatchSource>,
    pub border: BorderSignature,
}

impl Patch {
    /// Channel values of the center pixel.
    pub fn center(&self) -> &[f64] {
        let half = self.size / 2;
        let i = (half * self.size + half) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn at(&self, dr: usize, dc: usize) -> &[f64] {
        let i = (dr * self.size + dc) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Extracts the window `w` from `img`, resolving out-of-range reads per `pad`.
pub fn extract_window(img: &ImageGrid, w: Window, pad: PaddingMode) -> Result<Patch> {
    let (row, col) = w.center();
    if row >= img.height || col >= img.width {
        return Err(Error::OutOfBounds { row, col, height: img.height, width: img.width });
    }
    let mut data = vec![0.0; w.size * w.size * img.channels];
    fill_window(img, w.size, row, col, pad, &mut data);
    let border = match pad {
        PaddingMode::Circular => BorderSignature::INTERIOR,
        PaddingMode::Zero => BorderSignature::of(img.height, img.width, w.size, row, col),
    };
    Ok(Patch { size: w.size, channels: img.channels, data, source: None, border })
}

/// Writes the `size`-window at `(row, col)` into `out` without bounds checks
/// on the center. `out.len()` must be `size * size * channels`.
pub fn fill_window(img: &ImageGrid, size: usize, row: usize, col: usize, pad: PaddingMode, out: &mut [f64]) {
    let c = img.channels;
    let half = (size / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    debug_assert_eq!(out.len(), size * size * c);
    let mut o = 0;
    for dr in -half..=half {
        let r = row as isize + dr;
        for dc in -half..=half {
            let cc = col as isize + dc;
            let src = match pad {
                PaddingMode::Circular => Some((r.rem_euclid(h), cc.rem_euclid(w))),
                PaddingMode::Zero if r >= 0 && r < h && cc >= 0 && cc < w => Some((r, cc)),
                PaddingMode::Zero => None,
            };
            match src {
                Some((sr, sc)) => {
                    let i = img.index(sr as usize, sc as usize);
                    out[o..o + c].copy_from_slice(&img.data[i..i + c]);
                }
                None => out[o..o + c].fill(0.0),
            }
            o += c;
        }
    }
}

/// Circular translation: output pixel `(r, c)` is input pixel
/// `((r - dr) mod H, (c - dc) mod W)`.
pub fn translate(img: &ImageGrid, shift: (isize, isize)) -> ImageGrid {
    let (h, w, ch) = (img.height, img.width, img.channels);
    let mut data = vec![0.0; img.data.len()];
    for r in 0..h {
        let sr = (r as isize - shift.0).rem_euclid(h as isize) as usize;
        for c in 0..w {
            let sc = (c as isize - shift.1).rem_euclid(w as isize) as usize;
            let dst = (r * w + c) * ch;
            let src = (sr * w + sc) * ch;
            data[dst..dst + ch].copy_from_slice(&img.data[src..src + ch]);
        }
    }
    ImageGrid { height: h, width: w, channels: ch, data, label: img.label }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> ImageGrid {
        ImageGrid::new(h, w, 1, (0..h * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn interior_window_any_padding() {
        let img = ramp(4, 4);
        for pad in [PaddingMode::Circular, PaddingMode::Zero] {
            let p = extract_window(&img, Window::new(3, 1, 1).unwrap(), pad).unwrap();
            assert_eq!(p.data, vec![0., 1., 2., 4., 5., 6., 8., 9., 10.]);
            assert_eq!(p.border, BorderSignature::INTERIOR);
            assert_eq!(p.center(), &[5.0]);
        }
    }

    #[test]
    fn corner_window_circular_wraps() {
        let img = ramp(4, 4);
        let p = extract_window(&img, Window::new(3, 0, 0).unwrap(), PaddingMode::Circular).unwrap();
        // top row = image row 3 at cols (3, 0, 1); left column = image col 3
        assert_eq!(&p.data[0..3], &[15., 12., 13.]);
        assert_eq!([p.data[0], p.data[3], p.data[6]], [15., 3., 7.]);
        assert_eq!(p.border, BorderSignature::INTERIOR);
    }

    #[test]
    fn corner_window_zero_pads() {
        let img = ImageGrid::filled(4, 4, 1, 0.5);
        let p = extract_window(&img, Window::new(3, 0, 0).unwrap(), PaddingMode::Zero).unwrap();
        assert_eq!(&p.data[0..3], &[0., 0., 0.]);
        assert_eq!([p.data[0], p.data[3], p.data[6]], [0., 0., 0.]);
        assert_eq!(p.data[4], 0.5);
        assert_eq!(p.border, BorderSignature::new(1, 0, 1, 0));
    }

    #[test]
    fn window_errors() {
        let img = ramp(4, 4);
        assert!(matches!(Window::new(2, 0, 0), Err(Error::InvalidPatchSize(2))));
        assert!(matches!(Window::new(0, 0, 0), Err(Error::InvalidPatchSize(0))));
        let w = Window::new(3, 4, 0).unwrap();
        assert!(matches!(extract_window(&img, w, PaddingMode::Zero), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn large_window_signature_counts_each_side() {
        let s = BorderSignature::of(4, 4, 9, 0, 3);
        assert_eq!(s, BorderSignature::new(4, 1, 1, 4));
    }

    #[test]
    fn translate_identities() {
        let img = ramp(3, 5);
        assert_eq!(translate(&img, (0, 0)), img);
        assert_eq!(translate(&img, (3, 5)), img);
        assert_eq!(translate(&translate(&img, (1, 0)), (-1, 0)), img);
        let t = translate(&img, (1, 2));
        assert_eq!(t.get(1, 2, 0), img.get(0, 0, 0));
    }

    #[test]
    fn byte_normalization_endpoints() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
        assert_eq!(unit_to_byte(7.0), 255);
        assert_eq!(unit_to_byte(-7.0), 0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(ImageGrid::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(ImageGrid::new(1, 2, 1, vec![0.0]).is_err());
    }

    fn arb_image() -> impl Strategy<Value = ImageGrid> {
        (1usize..7, 1usize..7, 1usize..3).prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(-1.0f64..1.0, h * w * c)
                .prop_map(move |d| ImageGrid::new(h, w, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn circular_extraction_commutes_with_translation(
            img in arb_image(), dr in -10isize..10, dc in -10isize..10,
            p in prop::sample::select(vec![1usize, 3, 5]), r in 0usize..7, c in 0usize..7,
        ) {
            let (r, c) = (r % img.height(), c % img.width());
            let moved = translate(&img, (dr, dc));
            let a = extract_window(&moved, Window::new(p, r, c).unwrap(), PaddingMode::Circular).unwrap();
            let sr = (r as isize - dr).rem_euclid(img.height() as isize) as usize;
            let sc = (c as isize - dc).rem_euclid(img.width() as isize) as usize;
            let b = extract_window(&img, Window::new(p, sr, sc).unwrap(), PaddingMode::Circular).unwrap();
            prop_assert_eq!(a.data, b.data);
        }

        #[test]
        fn zero_and_circular_agree_in_interior(img in arb_image(), r in 0usize..7, c in 0usize..7) {
            let (r, c) = (r % img.height(), c % img.width());
            if r >= 1 && c >= 1 && r + 1 < img.height() && c + 1 < img.width() {
                let w = Window::new(3, r, c).unwrap();
                let a = extract_window(&img, w, PaddingMode::Zero).unwrap();
                let b = extract_window(&img, w, PaddingMode::Circular).unwrap();
                prop_assert_eq!(a.data, b.data);
                prop_assert!(a.border.is_interior());
            }
        }

        #[test]
        fn translation_preserves_histogram(img in arb_image(), dr in -10isize..10, dc in -10isize..10) {
            let mut a: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u64> = translate(&img, (dr, dc)).data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
