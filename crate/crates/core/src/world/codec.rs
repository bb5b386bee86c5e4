//! Residual vector quantizer standing in for a neural audio codec.

use crate::delay::TokenGrid;
use crate::error::{Error, Result};
use crate::num::SeededRng;

use super::LatentSeq;

#[derive(Debug, Clone, PartialEq)]
pub struct Rvq {
    dim: usize,
    size: usize,
    /// One `[size, dim]` table per stage.
    books: Vec<Vec<f32>>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row, lowest index on ties.
fn nearest(table: &[f32], dim: usize, v: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (i, row) in table.chunks_exact(dim).enumerate() {
        let d = sq_dist(row, v);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

const RESTARTS: u64 = 2;
const LLOYD_ITERS: usize = 50;

fn distortion(points: &[f32], dim: usize, table: &[f32]) -> f64 {
    points
        .chunks_exact(dim)
        .map(|v| sq_dist(&table[nearest(table, dim, v) * dim..][..dim], v) as f64)
        .sum()
}

/// Seeded k-means++ initialisation followed by Lloyd iterations.
fn kmeans(points: &[f32], dim: usize, k: usize, iters: usize, rng: &mut SeededRng) -> Vec<f32> {
    let n = points.len() / dim;
    assert!(n >= 1);
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centers = Vec::with_capacity(k * dim);
    centers.extend_from_slice(pt(rng.below(n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(pt(i), &centers[..dim]) as f64).collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.below(n)
        };
        let c = pt(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(pt(i), &c) as f64);
        }
        centers.extend_from_slice(&c);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for i in 0..n {
            let a = nearest(&centers, dim, pt(i));
            changed |= a != assign[i];
            assign[i] = a;
        }
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &x) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(pt(i)) {
                *s += x as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed at the point worst served by its current center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(pt(a), &centers[assign[a] * dim..(assign[a] + 1) * dim]);
                        let db = sq_dist(pt(b), &centers[assign[b] * dim..(assign[b] + 1) * dim]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                centers[c * dim..(c + 1) * dim].copy_from_slice(pt(far));
                assign[far] = c;
                changed = true;
            } else {
                for j in 0..dim {
                    centers[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
                }
            }
        }
        if !changed {
            break;
        }
    }
    centers
}

impl Rvq {
    pub fn from_codebooks(dim: usize, books: Vec<Vec<f32>>) -> Result<Self> {
        let size = books
            .first()
            .map(|b| b.len() / dim.max(1))
            .ok_or_else(|| Error::Invalid("quantizer needs at least one codebook".into()))?;
        if dim == 0 || size == 0 || books.iter().any(|b| b.len() != size * dim) {
            return Err(Error::Shape("codebooks must share a non-empty [size, dim] shape".into()));
        }
        Ok(Self { dim, size, books })
    }

    /// Fits each stage by k-means on the residual left by earlier stages.
    pub fn fit(frames: &[f32], dim: usize, n_books: usize, size: usize, rng: &mut SeededRng) -> Self {
        let mut residual = frames.to_vec();
        let mut books = Vec::with_capacity(n_books);
        for stage in 0..n_books {
            let stage_rng = rng.substream(stage as u64);
            let mut book = (0..RESTARTS)
                .map(|r| kmeans(&residual, dim, size, LLOYD_ITERS, &mut stage_rng.substream(r)))
                .map(|b| (distortion(&residual, dim, &b), b))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            if stage > 0 {
                // A zero codeword makes each refinement stage unable to
                // increase the error.
                let zero = vec![0f32; dim];
                let i = nearest(&book, dim, &zero);
                book[i * dim..(i + 1) * dim].copy_from_slice(&zero);
            }
            for v in residual.chunks_exact_mut(dim) {
                let i = nearest(&book, dim, v);
                for (x, c) in v.iter_mut().zip(&book[i * dim..(i + 1) * dim]) {
                    *x -= c;
                }
            }
            books.push(book);
        }
        Self { dim, size, books }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_books(&self) -> usize {
        self.books.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn codeword(&self, book: usize, idx: usize) -> &[f32] {
        &self.books[book][idx * self.dim..(idx + 1) * self.dim]
    }

    /// Stage-by-stage indices for one vector, using the first `stages` books.
    pub fn encode_vector(&self, v: &[f32], stages: usize) -> Vec<u32> {
        let mut residual = v.to_vec();
        let mut out = Vec::with_capacity(stages);
        for book in &self.books[..stages] {
            let i = nearest(book, self.dim, &residual);
            for (x, c) in residual.iter_mut().zip(&book[i * self.dim..(i + 1) * self.dim]) {
                *x -= c;
            }
            out.push(i as u32);
        }
        out
    }

    fn check_dim(&self, latent: &LatentSeq) -> Result<()> {
        if latent.dim() != self.dim {
            return Err(Error::Shape(format!(
                "latent has {} channels, quantizer expects {}",
                latent.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn tokenize(&self, latent: &LatentSeq) -> Result<TokenGrid> {
        self.tokenize_stages(latent, self.n_books())
    }

    /// Tokens from the first `stages` books only.
    pub fn tokenize_stages(&self, latent: &LatentSeq, stages: usize) -> Result<TokenGrid> {
        self.check_dim(latent)?;
        let len = latent.len();
        let mut cells = vec![0u32; stages * len];
        for j in 0..len {
            for (b, id) in self.encode_vector(latent.frame(j), stages).into_iter().enumerate() {
                cells[b * len + j] = id;
            }
        }
        TokenGrid::new(stages, len, self.size as u32, cells)
    }

    pub fn detokenize(&self, tokens: &TokenGrid) -> Result<LatentSeq> {
        if tokens.n_books() > self.n_books() {
            return Err(Error::Shape(format!(
                "{} token streams for a {}-stage quantizer",
                tokens.n_books(),
                self.n_books()
            )));
        }
        let len = tokens.len();
        let mut data = vec![0f32; len * self.dim];
        for b in 0..tokens.n_books() {
            for j in 0..len {
                let id = tokens.get(b, j) as usize;
                if id >= self.size {
                    return Err(Error::ReservedId {
                        book: b,
                        frame: j,
                        id: id as u32,
                    });
                }
                for (x, c) in data[j * self.dim..(j + 1) * self.dim]
                    .iter_mut()
                    .zip(self.codeword(b, id))
                {
                    *x += c;
                }
            }
        }
        LatentSeq::new(self.dim, len, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nested_codebooks(seed: u64) -> Rvq {
        let mut rng = SeededRng::new(seed);
        let coarse: Vec<f32> = rng.gauss_vec(4 * 3).iter().map(|x| 2.0 * x).collect();
        let fine: Vec<f32> = rng.gauss_vec(4 * 3).iter().map(|x| 0.05 * x).collect();
        Rvq::from_codebooks(3, vec![coarse, fine]).unwrap()
    }

    fn min_pairwise(book: &[f32], dim: usize) -> f32 {
        let rows: Vec<&[f32]> = book.chunks_exact(dim).collect();
        let mut m = f32::INFINITY;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                m = m.min(sq_dist(rows[i], rows[j]).sqrt());
            }
        }
        m
    }

    #[test]
    fn tokenize_inverts_detokenize_exhaustively() {
        let q = nested_codebooks(3);
        // Precondition making greedy decoding exact: every fine codeword is
        // shorter than half the closest coarse pair.
        let max_fine = q.books[1]
            .chunks_exact(3)
            .map(|r| r.iter().map(|x| x * x).sum::<f32>().sqrt())
            .fold(0f32, f32::max);
        assert!(max_fine < 0.5 * min_pairwise(&q.books[0], 3));
        // L = 3 frames, every column combination of (coarse, fine) ids.
        let mut count = 0;
        for a in 0..16u32 {
            for b in 0..16u32 {
                for c in 0..16u32 {
                    let ids = [a, b, c];
                    let cells: Vec<u32> = (0..2)
                        .flat_map(|book| ids.iter().map(move |&x| if book == 0 { x / 4 } else { x % 4 }))
                        .collect();
                    let g = TokenGrid::new(2, 3, 4, cells).unwrap();
                    let back = q.tokenize(&q.detokenize(&g).unwrap()).unwrap();
                    assert_eq!(back, g);
                    count += 1;
                }
            }
        }
        assert_eq!(count, 4096);
    }

    #[test]
    fn single_book_grid_decodes_to_codeword() {
        let q = nested_codebooks(4);
        let g = TokenGrid::filled(1, 5, 4, 2);
        let z = q.detokenize(&g).unwrap();
        for j in 0..5 {
            assert_eq!(z.frame(j), q.codeword(0, 2));
        }
    }

    #[test]
    fn reserved_ids_are_not_decodable() {
        let q = nested_codebooks(5);
        let g = TokenGrid::filled(2, 3, 4, 4);
        assert!(matches!(q.detokenize(&g), Err(Error::ReservedId { .. })));
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let table = vec![1.0, 0.0, -1.0, 0.0];
        assert_eq!(nearest(&table, 2, &[0.0, 0.0]), 0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let q = nested_codebooks(6);
        let z = LatentSeq::zeros(5, 2);
        assert!(matches!(q.tokenize(&z), Err(Error::Shape(_))));
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let mut rng = SeededRng::new(9);
        let centers = [[0.0f32, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut pts = Vec::new();
        for i in 0..300 {
            let c = centers[i % 3];
            pts.push(c[0] + 0.1 * rng.gauss());
            pts.push(c[1] + 0.1 * rng.gauss());
        }
        let fitted = kmeans(&pts, 2, 3, 20, &mut SeededRng::new(1));
        for c in centers {
            let i = nearest(&fitted, 2, &c);
            assert!(sq_dist(&fitted[i * 2..i * 2 + 2], &c) < 0.01);
        }
    }
}
