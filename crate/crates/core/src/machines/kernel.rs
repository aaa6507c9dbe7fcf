//! Squared distances between query windows and scaled dictionary patches.
//!
//! Uses `|q - s p|^2 = |q|^2 - 2 s <q, p> + s^2 |p|^2` with precomputed patch
//! norms. Queries are processed in blocks of [`QUERY_BLOCK`]; each patch is
//! loaded once per block. The inner product for a given (query, patch) pair
//! is always summed in the same order, so results do not depend on how
//! queries are grouped into blocks.

use crate::dictionary::PatchDictionary;
use crate::error::{Error, Result};

pub const QUERY_BLOCK: usize = 8;

/// Which dictionary entries a query is compared against.
#[derive(Debug, Clone, Copy)]
pub enum Candidates<'a> {
    All,
    /// Entries `start..start + len`.
    Range { start: usize, len: usize },
    Subset(&'a [usize]),
}

impl Candidates<'_> {
    pub fn len(&self, dict: &PatchDictionary) -> usize {
        match self {
            Candidates::All => dict.len(),
            Candidates::Range { len, .. } => *len,
            Candidates::Subset(s) => s.len(),
        }
    }

    pub fn is_empty(&self, dict: &PatchDictionary) -> bool {
        self.len(dict) == 0
    }

    #[inline]
    pub fn get(&self, j: usize) -> usize {
        match self {
            Candidates::All => j,
            Candidates::Range { start, .. } => start + j,
            Candidates::Subset(s) => s[j],
        }
    }

    /// Positions `start..start + len` of this candidate list.
    pub fn slice(&self, start: usize, len: usize) -> Candidates<'_> {
        match self {
            Candidates::All => Candidates::Range { start, len },
            Candidates::Range { start: s, .. } => Candidates::Range { start: s + start, len },
            Candidates::Subset(s) => Candidates::Subset(&s[start..start + len]),
        }
    }
}

/// Full distance matrix, `queries.len() / dim` rows by candidate columns.
pub fn squared_distances(
    queries: &[f64],
    dict: &PatchDictionary,
    candidates: Candidates<'_>,
    sqrt_alpha_bar: f64,
) -> Result<Vec<f64>> {
    let dim = dict.dim();
    if queries.len() % dim != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("a multiple of {dim} values"),
            actual: format!("{} values", queries.len()),
        });
    }
    let nq = queries.len() / dim;
    let nc = candidates.len(dict);
    let mut out = vec![0.0; nq * nc];
    for (qb, ob) in queries.chunks(dim * QUERY_BLOCK).zip(out.chunks_mut(nc * QUERY_BLOCK)) {
        distance_block(qb, dict, candidates, sqrt_alpha_bar, ob);
    }
    Ok(out)
}

/// Distances for up to [`QUERY_BLOCK`] queries packed in `queries`,
/// written row-major into `out` (`nq x ncand`).
pub(crate) fn distance_block(
    queries: &[f64],
    dict: &PatchDictionary,
    candidates: Candidates<'_>,
    sqrt_alpha_bar: f64,
    out: &mut [f64],
) {
    let dim = dict.dim();
    let nq = queries.len() / dim;
    debug_assert!(nq <= QUERY_BLOCK && nq * dim == queries.len());
    let nc = candidates.len(dict);
    debug_assert_eq!(out.len(), nq * nc);

    let mut qt = vec![[0.0f64; QUERY_BLOCK]; dim];
    let mut qnorm = [0.0f64; QUERY_BLOCK];
    for q in 0..nq {
        let row = &queries[q * dim..(q + 1) * dim];
        for (lane, &v) in qt.iter_mut().zip(row) {
            lane[q] = v;
        }
        qnorm[q] = row.iter().map(|v| v * v).sum();
    }
    let block = Block { qt: &qt, qnorm: &qnorm, nq, nc, sqrt_alpha_bar };
    block.dispatch(dict, candidates, out);
}

struct Block<'a> {
    /// Queries transposed: one lane array per window element.
    qt: &'a [[f64; QUERY_BLOCK]],
    qnorm: &'a [f64; QUERY_BLOCK],
    nq: usize,
    nc: usize,
    sqrt_alpha_bar: f64,
}

impl Block<'_> {
    fn dispatch(&self, dict: &PatchDictionary, candidates: Candidates<'_>, out: &mut [f64]) {
        match candidates {
            Candidates::All => self.run(dict, 0..self.nc, out),
            Candidates::Range { start, len } => self.run(dict, start..start + len, out),
            Candidates::Subset(s) => self.run(dict, s.iter().copied(), out),
        }
    }

    #[inline]
    fn run(&self, dict: &PatchDictionary, indices: impl Iterator<Item = usize>, out: &mut [f64]) {
        let dim = dict.dim();
        let patches = dict.patches();
        let norms = dict.norms();
        let two_s = 2.0 * self.sqrt_alpha_bar;
        let ab = self.sqrt_alpha_bar * self.sqrt_alpha_bar;
        for (j, m) in indices.enumerate() {
            let p = &patches[m * dim..(m + 1) * dim];
            let mut acc = [0.0f64; QUERY_BLOCK];
            for (lane, &pv) in self.qt.iter().zip(p) {
                let pv = pv as f64;
                for q in 0..QUERY_BLOCK {
                    acc[q] += lane[q] * pv;
                }
            }
            let pn = ab * norms[m];
            for q in 0..self.nq {
                out[q * self.nc + j] = (self.qnorm[q] - two_s * acc[q] + pn).max(0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::DictionaryOptions;
    use crate::grid::{ImageGrid, PaddingMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(queries: &[f64], dict: &PatchDictionary, cands: &[usize], s: f64) -> Vec<f64> {
        let dim = dict.dim();
        let mut out = Vec::new();
        for q in queries.chunks(dim) {
            for &m in cands {
                out.push(q.iter().zip(dict.patch(m)).map(|(a, &b)| (a - s * b as f64).powi(2)).sum());
            }
        }
        out
    }

    fn random_dict(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize, p: usize) -> PatchDictionary {
        let imgs: Vec<_> = (0..n)
            .map(|_| ImageGrid::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        PatchDictionary::build(&imgs, DictionaryOptions::new(p, PaddingMode::Circular)).unwrap()
    }

    #[test]
    fn self_distance_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_dict(&mut rng, 2, 5, 5, 1, 3);
        let s = 0.7f64;
        let q: Vec<f64> = d.patch(13).iter().map(|&v| s * v as f64).collect();
        let out = squared_distances(&q, &d, Candidates::All, s).unwrap();
        assert!(out[13].abs() <= 1e-6);
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let mut data = vec![0.0; 9];
        data[4] = 1.0;
        let img = ImageGrid::new(3, 3, 1, data).unwrap();
        let d = PatchDictionary::build(&[img], DictionaryOptions::new(3, PaddingMode::Circular)).unwrap();
        let mut q = vec![0.0; 9];
        q[0] = 1.0;
        // patch centered at (1,1) has its 1 at index 4
        let out = squared_distances(&q, &d, Candidates::Subset(&[4]), 1.0).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn matches_naive_loop_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let d = random_dict(&mut rng, 2, 5, 5, 2, 3);
            let queries: Vec<f64> = (0..10 * d.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let cands: Vec<usize> = (0..50).map(|_| rng.random_range(0..d.len())).collect();
            let s = rng.random_range(0.0..1.0f64).sqrt();
            let fast = squared_distances(&queries, &d, Candidates::Subset(&cands), s).unwrap();
            let slow = naive(&queries, &d, &cands, s);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn block_grouping_does_not_change_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_dict(&mut rng, 3, 6, 6, 1, 3);
        let queries: Vec<f64> = (0..11 * d.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let all = squared_distances(&queries, &d, Candidates::All, 0.4).unwrap();
        for q in 0..11 {
            let one = squared_distances(&queries[q * 9..(q + 1) * 9], &d, Candidates::All, 0.4).unwrap();
            assert_eq!(&all[q * d.len()..(q + 1) * d.len()], one.as_slice());
        }
    }

    #[test]
    fn rejects_ragged_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_dict(&mut rng, 1, 4, 4, 1, 3);
        assert!(squared_distances(&[0.0; 10], &d, Candidates::All, 1.0).is_err());
    }
}
