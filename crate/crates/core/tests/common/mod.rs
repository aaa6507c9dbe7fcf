//! Shared fixtures for integration tests.
#![allow(dead_code)]

pub mod oracle;

use std::path::Path;

use patchmosaic::io::dataset::{write_idx_images, write_idx_labels};
use patchmosaic::ImageGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stroke skeletons per class on a unit square, as polylines.
fn skeleton(class: u8) -> Vec<Vec<(f64, f64)>> {
    let circle = |cx: f64, cy: f64, r: f64| -> Vec<(f64, f64)> {
        (0..=16).map(|i| {
            let a = i as f64 / 16.0 * std::f64::consts::TAU;
            (cx + r * a.cos(), cy + r * a.sin())
        }).collect()
    };
    match class % 10 {
        0 => vec![circle(0.5, 0.5, 0.3)],
        1 => vec![vec![(0.5, 0.15), (0.5, 0.85)]],
        2 => vec![vec![(0.25, 0.3), (0.5, 0.15), (0.75, 0.3), (0.25, 0.85), (0.8, 0.85)]],
        3 => vec![vec![(0.25, 0.15), (0.75, 0.3), (0.4, 0.5), (0.75, 0.7), (0.25, 0.85)]],
        4 => vec![vec![(0.65, 0.85), (0.65, 0.15), (0.2, 0.6), (0.8, 0.6)]],
        5 => vec![vec![(0.75, 0.15), (0.3, 0.15), (0.3, 0.45), (0.7, 0.55), (0.6, 0.85), (0.25, 0.8)]],
        6 => vec![vec![(0.7, 0.15), (0.35, 0.5)], circle(0.5, 0.65, 0.2)],
        7 => vec![vec![(0.2, 0.15), (0.8, 0.15), (0.4, 0.85)]],
        8 => vec![circle(0.5, 0.32, 0.17), circle(0.5, 0.68, 0.19)],
        _ => vec![circle(0.5, 0.35, 0.2), vec![(0.7, 0.35), (0.6, 0.85)]],
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Deterministic MNIST-like digits: anti-aliased strokes on a black
/// background with per-image jitter of position, scale, slant and width.
pub fn synthetic_digits(n: usize, side: usize, seed: u64) -> Vec<ImageGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = (i % 10) as u8;
            let (ox, oy) = (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06));
            let scale = rng.random_range(0.85..1.05);
            let slant = rng.random_range(-0.2..0.2);
            let width = rng.random_range(0.045..0.075);
            let strokes: Vec<Vec<(f64, f64)>> = skeleton(class)
                .into_iter()
                .map(|s| {
                    s.into_iter()
                        .map(|(x, y)| {
                            let (x, y) = ((x - 0.5) * scale, (y - 0.5) * scale);
                            (0.5 + x + slant * y + ox, 0.5 + y + oy)
                        })
                        .collect()
                })
                .collect();
            let mut bytes = vec![0u8; side * side];
            for r in 0..side {
                for c in 0..side {
                    let p = ((c as f64 + 0.5) / side as f64, (r as f64 + 0.5) / side as f64);
                    let d = strokes
                        .iter()
                        .flat_map(|s| s.windows(2).map(move |w| seg_dist(p, w[0], w[1])))
                        .fold(f64::INFINITY, f64::min);
                    let ink = ((width - d) / (0.6 / side as f64) + 0.5).clamp(0.0, 1.0);
                    bytes[r * side + c] = (ink * 255.0).round() as u8;
                }
            }
            ImageGrid::from_bytes(side, side, 1, &bytes).unwrap().with_label(Some(class as u32))
        })
        .collect()
}

/// Writes `n` synthetic digits as an IDX image/label pair in `dir`.
pub fn write_synthetic_mnist(dir: &Path, n: usize, seed: u64) {
    let imgs = synthetic_digits(n, 28, seed);
    write_idx_images(&dir.join("train-images-idx3-ubyte"), &imgs).unwrap();
    let labels: Vec<u8> = imgs.iter().map(|g| g.label().unwrap() as u8).collect();
    write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &labels).unwrap();
}

/// Training images for tests: the real MNIST files when `MNIST_DIR` points
/// at them, otherwise the synthetic stand-in.
pub fn mnist_like(n: usize) -> Vec<ImageGrid> {
    if let Ok(dir) = std::env::var("MNIST_DIR") {
        let spec = patchmosaic::io::DatasetSpec {
            subset: Some(n),
            ..patchmosaic::io::DatasetSpec::new(patchmosaic::io::DatasetFormat::MnistIdx, dir)
        };
        if let Ok(imgs) = patchmosaic::io::load_dataset(&spec) {
            return imgs;
        }
    }
    synthetic_digits(n, 28, 7)
}

/// Random grid with values on the f32 grid (so f32 dictionary storage is exact).
pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageGrid {
    let v = (0..h * w * c).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect();
    ImageGrid::new(h, w, c, v).unwrap()
}
