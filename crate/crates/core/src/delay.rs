//! Multi-stream token grids and the codebook delay pattern.
//!
//! With books indexed `i = 1..N_q` and frames `j = 1..L` the delay maps cell
//! `(i, j)` to `(i, j + i - 1)` in a grid of length `L + N_q - 1`; every
//! unmapped cell holds `PAD`. Storage is 0-indexed, so book `i` (0-based) at
//! frame `j` lands in column `j + i`.

use crate::error::{Error, Result};
use crate::num::DenseTensor;

/// Reserved ids, as offsets above the codebook size.
pub mod special {
    pub const PAD: u32 = 0;
    pub const START: u32 = 1;
    pub const FIM_A: u32 = 2;
    pub const FIM_B: u32 = 3;
    pub const FIM_C: u32 = 4;
    pub const EOS: u32 = 5;
    pub const COUNT: u32 = 6;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    n_books: usize,
    len: usize,
    card: u32,
    cells: Vec<u32>,
}

impl TokenGrid {
    /// `cells` is book-major: `cells[book * len + frame]`.
    pub fn new(n_books: usize, len: usize, card: u32, cells: Vec<u32>) -> Result<Self> {
        if cells.len() != n_books * len {
            return Err(Error::Shape(format!(
                "grid {n_books}x{len} needs {} cells, got {}",
                n_books * len,
                cells.len()
            )));
        }
        if let Some(&bad) = cells.iter().find(|&&c| c >= card + special::COUNT) {
            return Err(Error::Invalid(format!(
                "token id {bad} outside vocabulary of {} ids",
                card + special::COUNT
            )));
        }
        Ok(Self {
            n_books,
            len,
            card,
            cells,
        })
    }

    pub fn filled(n_books: usize, len: usize, card: u32, id: u32) -> Self {
        Self {
            n_books,
            len,
            card,
            cells: vec![id; n_books * len],
        }
    }

    pub fn n_books(&self) -> usize {
        self.n_books
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of ordinary codebook entries `|S|`.
    pub fn card(&self) -> u32 {
        self.card
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn get(&self, book: usize, frame: usize) -> u32 {
        self.cells[book * self.len + frame]
    }

    pub fn set(&mut self, book: usize, frame: usize, id: u32) {
        self.cells[book * self.len + frame] = id;
    }

    pub fn row(&self, book: usize) -> &[u32] {
        &self.cells[book * self.len..(book + 1) * self.len]
    }

    pub fn column(&self, frame: usize) -> Vec<u32> {
        (0..self.n_books).map(|b| self.get(b, frame)).collect()
    }

    pub fn special(&self, offset: u32) -> u32 {
        self.card + offset
    }

    pub fn pad(&self) -> u32 {
        self.card + special::PAD
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        id >= self.card
    }

    /// Frames `[start, end)` of every book.
    pub fn slice_frames(&self, start: usize, end: usize) -> TokenGrid {
        let mut cells = Vec::with_capacity(self.n_books * (end - start));
        for b in 0..self.n_books {
            cells.extend_from_slice(&self.row(b)[start..end]);
        }
        TokenGrid {
            n_books: self.n_books,
            len: end - start,
            card: self.card,
            cells,
        }
    }

    /// Concatenates along the frame axis.
    pub fn concat(parts: &[&TokenGrid]) -> Result<TokenGrid> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("nothing to concatenate".into()))?;
        if parts
            .iter()
            .any(|p| p.n_books != first.n_books || p.card != first.card)
        {
            return Err(Error::Shape("grids differ in books or vocabulary".into()));
        }
        let len = parts.iter().map(|p| p.len).sum();
        let mut cells = Vec::with_capacity(first.n_books * len);
        for b in 0..first.n_books {
            for p in parts {
                cells.extend_from_slice(p.row(b));
            }
        }
        Ok(TokenGrid {
            n_books: first.n_books,
            len,
            card: first.card,
            cells,
        })
    }

    /// `[n_books, len]` tensor of ids stored as f32 (exact below 2^24).
    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::from_parts(
            vec![self.n_books, self.len],
            self.cells.iter().map(|&c| c as f32).collect(),
        )
    }

    pub fn from_tensor(t: &DenseTensor, card: u32) -> Result<Self> {
        let &[n_books, len] = t.shape() else {
            return Err(Error::Shape(format!("token grid must be rank 2, got {:?}", t.shape())));
        };
        let mut cells = Vec::with_capacity(t.len());
        for &v in t.data() {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Invalid(format!("token value {v} is not an id")));
            }
            cells.push(v as u32);
        }
        Self::new(n_books, len, card, cells)
    }
}

fn check_no_pad(g: &TokenGrid, allow_special: bool) -> Result<()> {
    for b in 0..g.n_books {
        for (f, &id) in g.row(b).iter().enumerate() {
            let bad = if allow_special {
                id == g.pad()
            } else {
                g.is_reserved(id)
            };
            if bad {
                return Err(Error::ReservedId {
                    book: b,
                    frame: f,
                    id,
                });
            }
        }
    }
    Ok(())
}

fn delay_unchecked(g: &TokenGrid) -> TokenGrid {
    let n = g.n_books;
    let out_len = g.len + n.saturating_sub(1);
    let mut out = TokenGrid::filled(n, out_len, g.card, g.pad());
    for b in 0..n {
        for f in 0..g.len {
            out.set(b, f + b, g.get(b, f));
        }
    }
    out
}

/// Applies the delay pattern. The input must hold codebook ids only.
pub fn apply_delay(g: &TokenGrid) -> Result<TokenGrid> {
    check_no_pad(g, false)?;
    Ok(delay_unchecked(g))
}

/// Like [`apply_delay`] but lets start/FIM/EOS ids through; only `PAD` is
/// rejected. Used for fill-in-the-middle sequences.
pub fn apply_delay_with_specials(g: &TokenGrid) -> Result<TokenGrid> {
    check_no_pad(g, true)?;
    Ok(delay_unchecked(g))
}

/// Inverse of the delay. Checks that `PAD` occupies exactly the unmapped
/// cells.
pub fn revert_delay(g: &TokenGrid) -> Result<TokenGrid> {
    let n = g.n_books;
    if n == 0 {
        return Err(Error::DelayStructure("grid has no codebooks".into()));
    }
    if g.len + 1 < n {
        return Err(Error::DelayStructure(format!(
            "length {} too short for {n} codebooks",
            g.len
        )));
    }
    let len = g.len + 1 - n;
    let pad = g.pad();
    let mut out = TokenGrid::filled(n, len, g.card, pad);
    for b in 0..n {
        for c in 0..g.len {
            let id = g.get(b, c);
            let mapped = c >= b && c < len + b;
            match (mapped, id == pad) {
                (true, false) => out.set(b, c - b, id),
                (false, true) => {}
                (true, true) => {
                    return Err(Error::DelayStructure(format!(
                        "PAD inside the mapped region at book {b}, column {c}"
                    )))
                }
                (false, false) => {
                    return Err(Error::DelayStructure(format!(
                        "expected PAD at book {b}, column {c}, found {id}"
                    )))
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::SeededRng;

    fn random_grid(rng: &mut SeededRng, n: usize, len: usize, card: u32) -> TokenGrid {
        let cells = (0..n * len).map(|_| rng.below(card as usize) as u32).collect();
        TokenGrid::new(n, len, card, cells).unwrap()
    }

    #[test]
    fn single_book_is_identity() {
        let g = random_grid(&mut SeededRng::new(0), 1, 9, 8);
        assert_eq!(apply_delay(&g).unwrap(), g);
    }

    #[test]
    fn cell_mapping_example() {
        // 1-indexed (3, 5) -> (3, 7); 0-indexed (2, 4) -> (2, 6).
        let mut g = TokenGrid::filled(4, 8, 32, 0);
        g.set(2, 4, 17);
        let d = apply_delay(&g).unwrap();
        assert_eq!(d.len(), 11);
        assert_eq!(d.get(2, 6), 17);
    }

    #[test]
    fn pad_count_matches_formula() {
        let g = random_grid(&mut SeededRng::new(1), 3, 2, 16);
        let d = apply_delay(&g).unwrap();
        assert_eq!(d.len(), 4);
        let pads = d.cells().iter().filter(|&&c| c == d.pad()).count();
        // N_q (L + N_q - 1) - N_q L
        assert_eq!(pads, 3 * 4 - 3 * 2);
        assert_eq!(pads, 6);
    }

    #[test]
    fn pad_iff_outside_mapped_band() {
        let g = random_grid(&mut SeededRng::new(2), 4, 6, 10);
        let d = apply_delay(&g).unwrap();
        for i in 1..=4usize {
            for c in 1..=d.len() {
                let is_pad = d.get(i - 1, c - 1) == d.pad();
                assert_eq!(is_pad, c < i || c >= 6 + i, "cell ({i},{c})");
            }
        }
    }

    #[test]
    fn rejects_reserved_input() {
        let mut g = TokenGrid::filled(2, 3, 8, 0);
        g.set(1, 2, 8);
        assert!(matches!(apply_delay(&g), Err(Error::ReservedId { book: 1, frame: 2, .. })));
    }

    #[test]
    fn minimal_round_trip() {
        let g = TokenGrid::new(2, 1, 4, vec![3, 1]).unwrap();
        assert_eq!(revert_delay(&apply_delay(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn misplaced_pad_is_structural_error() {
        let g = random_grid(&mut SeededRng::new(3), 3, 5, 8);
        let mut d = apply_delay(&g).unwrap();
        d.set(1, 3, d.pad());
        assert!(matches!(revert_delay(&d), Err(Error::DelayStructure(_))));
        let mut d = apply_delay(&g).unwrap();
        d.set(2, 0, 1);
        assert!(matches!(revert_delay(&d), Err(Error::DelayStructure(_))));
    }

    #[test]
    fn random_round_trips() {
        let mut rng = SeededRng::new(4);
        for _ in 0..1000 {
            let n = [1, 2, 4][rng.below(3)];
            let len = 1 + rng.below(64);
            let g = random_grid(&mut rng, n, len, 32);
            assert_eq!(revert_delay(&apply_delay(&g).unwrap()).unwrap(), g);
        }
    }

    #[test]
    fn column_holds_earlier_books_at_later_frames() {
        // Column c carries frame c - i of book i, so book i at frame j only
        // sees books < i at frames <= j in earlier-or-equal columns.
        let (n, len) = (4, 7);
        let cells = (0..n * len).map(|k| k as u32).collect();
        let g = TokenGrid::new(n, len, 1000, cells).unwrap();
        let d = apply_delay(&g).unwrap();
        for c in 0..d.len() {
            for b in 0..n {
                let id = d.get(b, c);
                if id == d.pad() {
                    continue;
                }
                let (book, frame) = (id as usize / len, id as usize % len);
                assert_eq!(book, b);
                assert_eq!(frame + b, c);
            }
        }
    }

    #[test]
    fn tensor_round_trip() {
        let g = random_grid(&mut SeededRng::new(5), 3, 4, 32);
        assert_eq!(TokenGrid::from_tensor(&g.to_tensor(), 32).unwrap(), g);
    }
}
