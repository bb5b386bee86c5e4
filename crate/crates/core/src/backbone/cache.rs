use super::layers::{attend_row, gelu};
use super::model::Backbone;
use crate::error::{Error, Result};
use crate::num::Real;

/// Keys and values of every causal block for the positions decoded so far,
/// plus the projected caption memory.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    pos: usize,
    max_len: usize,
    /// Position of the first retained row in `keys` and `values`.
    base: usize,
    /// Rows kept once the window is full; `None` keeps every row.
    keep: Option<usize>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    mem_len: usize,
    mem_keys: Vec<Vec<T>>,
    mem_values: Vec<Vec<T>>,
}

impl<T> KvCache<T> {
    /// Positions already consumed.
    pub fn position(&self) -> usize {
        self.pos
    }
}

impl<T: Real> Backbone<T> {
    pub fn new_cache(&self, caption: &[u32]) -> Result<KvCache<T>> {
        if !self.config.causal() {
            return Err(Error::Invalid("key/value caching needs a causal backbone".into()));
        }
        let caption = self.effective_caption(caption)?;
        let mem = self.memory(&caption);
        let m = caption.len() + 1;
        let n = self.config.n_blocks;
        let d = self.config.model_dim;
        let keep = self.config.attn_window.map(|w| w + 1);
        let rows = keep.map_or(self.config.max_len, |k| (4 * k).min(self.config.max_len));
        Ok(KvCache {
            pos: 0,
            max_len: self.config.max_len,
            base: 0,
            keep,
            keys: (0..n).map(|_| Vec::with_capacity(rows * d)).collect(),
            values: (0..n).map(|_| Vec::with_capacity(rows * d)).collect(),
            mem_len: m,
            mem_keys: self.layout.blocks.iter().map(|b| self.lin(&mem, b.ck, m)).collect(),
            mem_values: self.layout.blocks.iter().map(|b| self.lin(&mem, b.cv, m)).collect(),
        })
    }

    /// Feeds one new position to each cache. `tokens` is `[B, n_books]`,
    /// `cond` is `[B, 3]`; returns `[B, output_dim]`. Rows are computed
    /// exactly as the full forward computes them.
    pub fn step(&self, caches: &mut [&mut KvCache<T>], tokens: &[u32], cond: &[u32]) -> Result<Vec<T>> {
        let c = &self.config;
        let d = c.model_dim;
        let nb = c.n_books;
        let bsz = caches.len();
        if tokens.len() != bsz * nb || cond.len() != bsz * crate::cond::N_STREAMS {
            return Err(Error::Shape("step inputs do not match the batch".into()));
        }
        for cache in caches.iter() {
            if cache.pos >= cache.max_len {
                return Err(Error::Overflow {
                    len: cache.pos + 1,
                    max_len: cache.max_len,
                });
            }
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= c.token_vocab()) {
            return Err(Error::Invalid(format!("token id {bad} out of range")));
        }
        for row in cond.chunks_exact(crate::cond::N_STREAMS) {
            self.check_cond_row(row)?;
        }
        let width = self.input_width();
        let mut u = vec![T::ZERO; bsz * width];
        for r in 0..bsz {
            self.input_row(
                Some(&tokens[r * nb..(r + 1) * nb]),
                None,
                &cond[r * 3..(r + 1) * 3],
                &mut u[r * width..(r + 1) * width],
            );
        }
        let mut x = self.lin(&u, self.layout.input, bsz);
        let pos = self.p(self.layout.pos);
        for (r, cache) in caches.iter().enumerate() {
            let p = cache.pos;
            for k in 0..d {
                x[r * d + k] += pos[p * d + k];
            }
        }

        let heads = c.n_heads;
        let dh = d / heads;
        let vis = self.visibility();
        let mut probs = Vec::new();
        for (i, ids) in self.layout.blocks.iter().enumerate() {
            let (a, _) = self.norm(&x, ids.ln1);
            let q = self.lin(&a, ids.q, bsz);
            let k = self.lin(&a, ids.k, bsz);
            let v = self.lin(&a, ids.v, bsz);
            let mut att = vec![T::ZERO; bsz * d];
            for (r, cache) in caches.iter_mut().enumerate() {
                cache.keys[i].extend_from_slice(&k[r * d..(r + 1) * d]);
                cache.values[i].extend_from_slice(&v[r * d..(r + 1) * d]);
                let (lo, hi) = vis.range(cache.pos, cache.pos + 1);
                let (lo, hi) = (lo - cache.base, hi - cache.base);
                probs.resize(hi - lo, T::ZERO);
                for h in 0..heads {
                    attend_row(
                        &q[r * d + h * dh..r * d + (h + 1) * dh],
                        &cache.keys[i],
                        &cache.values[i],
                        d,
                        h * dh,
                        dh,
                        lo,
                        hi,
                        &mut probs,
                        &mut att[r * d + h * dh..r * d + (h + 1) * dh],
                    );
                }
            }
            let o = self.lin(&att, ids.o, bsz);
            let x1: Vec<T> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
            let (bn, _) = self.norm(&x1, ids.ln2);
            let cq = self.lin(&bn, ids.cq, bsz);
            let mut catt = vec![T::ZERO; bsz * d];
            for (r, cache) in caches.iter().enumerate() {
                let m = cache.mem_len;
                probs.resize(m, T::ZERO);
                for h in 0..heads {
                    attend_row(
                        &cq[r * d + h * dh..r * d + (h + 1) * dh],
                        &cache.mem_keys[i],
                        &cache.mem_values[i],
                        d,
                        h * dh,
                        dh,
                        0,
                        m,
                        &mut probs,
                        &mut catt[r * d + h * dh..r * d + (h + 1) * dh],
                    );
                }
            }
            let co = self.lin(&catt, ids.co, bsz);
            let x2: Vec<T> = x1.iter().zip(&co).map(|(&a, &b)| a + b).collect();
            let (cn, _) = self.norm(&x2, ids.ln3);
            let g: Vec<T> = self.lin(&cn, ids.ff1, bsz).into_iter().map(gelu).collect();
            let f2 = self.lin(&g, ids.ff2, bsz);
            x = x2.iter().zip(&f2).map(|(&a, &b)| a + b).collect();
        }
        for cache in caches.iter_mut() {
            cache.pos += 1;
            let rows = cache.pos - cache.base;
            if let Some(k) = cache.keep.filter(|&k| rows >= 4 * k) {
                let drop = rows - k;
                for buf in cache.keys.iter_mut().chain(cache.values.iter_mut()) {
                    buf.drain(..drop * d);
                }
                cache.base += drop;
            }
        }
        let (hf, _) = self.norm(&x, self.layout.ln_f);
        Ok(self.lin(&hf, self.layout.head, bsz))
    }
}
