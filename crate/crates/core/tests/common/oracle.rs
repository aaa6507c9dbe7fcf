//! Brute-force reference implementations, written directly from the
//! mixture definitions with plain loops and no shared code with the crate.
#![allow(dead_code)]

use patchmosaic::ImageGrid;

/// Softmax weights and score of the Gaussian mixture with means
/// `sqrt(ab) * x_i`, unit-weighted, evaluated at `phi`.
pub fn mixture(phi: &[f64], data: &[Vec<f64>], ab: f64) -> (Vec<f64>, Vec<f64>) {
    let sa = ab.sqrt();
    let logits: Vec<f64> = data
        .iter()
        .map(|x| {
            let mut d = 0.0;
            for k in 0..phi.len() {
                d += (phi[k] - sa * x[k]) * (phi[k] - sa * x[k]);
            }
            -d / (2.0 * (1.0 - ab))
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
    let mut score = vec![0.0; phi.len()];
    for (x, wi) in data.iter().zip(&w) {
        for k in 0..phi.len() {
            score[k] += wi * (sa * x[k] - phi[k]) / (1.0 - ab);
        }
    }
    (w, score)
}

/// Pixel value at `(r, c)` with out-of-range coordinates wrapped
/// (`circular = true`) or read as zero.
pub fn padded(img: &ImageGrid, r: isize, c: isize, ch: usize, circular: bool) -> f64 {
    let (h, w) = (img.height() as isize, img.width() as isize);
    if circular {
        img.get(r.rem_euclid(h) as usize, c.rem_euclid(w) as usize, ch)
    } else if r < 0 || c < 0 || r >= h || c >= w {
        0.0
    } else {
        img.get(r as usize, c as usize, ch)
    }
}

/// The `p x p` window centered at `(r, c)`, row-major with channels innermost.
pub fn window(img: &ImageGrid, p: usize, r: usize, c: usize, circular: bool) -> Vec<f64> {
    let half = (p / 2) as isize;
    let mut out = Vec::new();
    for dr in -half..=half {
        for dc in -half..=half {
            for ch in 0..img.channels() {
                out.push(padded(img, r as isize + dr, c as isize + dc, ch, circular));
            }
        }
    }
    out
}

/// How many padded rows/columns the window at `(r, c)` sees on each side:
/// `(top, bottom, left, right)`, counted by testing coordinates one by one.
pub fn border_pattern(h: usize, w: usize, p: usize, r: usize, c: usize) -> (usize, usize, usize, usize) {
    let half = (p / 2) as isize;
    let (r, c, h, w) = (r as isize, c as isize, h as isize, w as isize);
    let top = (-half..=half).filter(|d| r + d < 0).count();
    let bottom = (-half..=half).filter(|d| r + d >= h).count();
    let left = (-half..=half).filter(|d| c + d < 0).count();
    let right = (-half..=half).filter(|d| c + d >= w).count();
    (top, bottom, left, right)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    /// Same location only.
    Ls,
    /// Every location (circular).
    Els,
    /// Every location with the same border pattern (zero padding).
    Bels,
}

/// One candidate patch of the brute-force local posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCandidate {
    pub image: usize,
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

/// Per-pixel local posterior and score, enumerating every window of every
/// training image.
pub fn local(
    phi: &ImageGrid,
    data: &[ImageGrid],
    p: usize,
    circular: bool,
    rule: Rule,
    ab: f64,
    (r, c): (usize, usize),
) -> (Vec<LocalCandidate>, Vec<f64>) {
    let (h, w, ch) = (phi.height(), phi.width(), phi.channels());
    let q = window(phi, p, r, c, circular);
    let target = border_pattern(h, w, p, r, c);
    let mut locs = Vec::new();
    let mut patches = Vec::new();
    let mut centers = Vec::new();
    for (i, img) in data.iter().enumerate() {
        for pr in 0..h {
            for pc in 0..w {
                let keep = match rule {
                    Rule::Ls => (pr, pc) == (r, c),
                    Rule::Els => true,
                    Rule::Bels => border_pattern(h, w, p, pr, pc) == target,
                };
                if keep {
                    locs.push((i, pr, pc));
                    patches.push(window(img, p, pr, pc, circular));
                    centers.push((0..ch).map(|k| img.get(pr, pc, k)).collect::<Vec<f64>>());
                }
            }
        }
    }
    let (weights, _) = mixture(&q, &patches, ab);
    let sa = ab.sqrt();
    let mut score = vec![0.0; ch];
    for (wi, center) in weights.iter().zip(&centers) {
        for k in 0..ch {
            score[k] += wi * (sa * center[k] - phi.get(r, c, k)) / (1.0 - ab);
        }
    }
    let cands = locs
        .into_iter()
        .zip(&weights)
        .map(|((image, row, col), &weight)| LocalCandidate { image, row, col, weight })
        .collect();
    (cands, score)
}

/// Full local score image from [`local`] at every pixel.
pub fn local_image(phi: &ImageGrid, data: &[ImageGrid], p: usize, circular: bool, rule: Rule, ab: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..phi.height() {
        for c in 0..phi.width() {
            out.extend(local(phi, data, p, circular, rule, ab, (r, c)).1);
        }
    }
    out
}

/// All circular translates of every image, image-major.
pub fn orbit(data: &[ImageGrid]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for img in data {
        let (h, w, ch) = (img.height(), img.width(), img.channels());
        for dr in 0..h {
            for dc in 0..w {
                let mut v = Vec::new();
                for r in 0..h {
                    for c in 0..w {
                        for k in 0..ch {
                            v.push(img.get((r + h - dr) % h, (c + w - dc) % w, k));
                        }
                    }
                }
                out.push(v);
            }
        }
    }
    out
}

/// Squared distance by direct subtraction.
pub fn naive_sq_distance(q: &[f64], p: &[f64], s: f64) -> f64 {
    q.iter().zip(p).map(|(a, b)| (a - s * b) * (a - s * b)).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
