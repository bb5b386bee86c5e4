use super::config::{BackboneConfig, Layout, LinearIds, Mode, NormIds, TIME_FEATURES};
use super::layers::{
    attention, attention_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    time_features, NormCache, Visibility,
};
use super::params::ParamSet;
use crate::cond::{condition_grid_backward, CondIds, N_STREAMS};
use crate::delay::TokenGrid;
use crate::error::{Error, Result};
use crate::num::{Real, SeededRng};

/// Model input for one sequence.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a, T> {
    /// `[n_books, len]` ids, codes or reserved.
    Tokens(&'a TokenGrid),
    /// `[len, input_dim]` frame-major latent.
    Latent(&'a [T]),
}

#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a, T> {
    pub input: Input<'a, T>,
    /// One row per position.
    pub cond: &'a CondIds,
    /// Empty means the null caption.
    pub caption: &'a [u32],
    /// Flow time, bidirectional mode only.
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub layout: Layout,
    pub params: ParamSet<T>,
}

pub(crate) struct BlockTape<T> {
    skip_in: Option<Vec<T>>,
    ln1: NormCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    ln2: NormCache<T>,
    b: Vec<T>,
    cq: Vec<T>,
    ck: Vec<T>,
    cv: Vec<T>,
    cprobs: Vec<T>,
    catt: Vec<T>,
    ln3: NormCache<T>,
    c: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
}

/// Activations kept by `forward` for `backward`.
pub struct Tape<T> {
    len: usize,
    tokens: Option<TokenGrid>,
    cond: CondIds,
    caption: Vec<u32>,
    u: Vec<T>,
    tfeat: Option<Vec<T>>,
    mem: Vec<T>,
    blocks: Vec<BlockTape<T>>,
    lnf: NormCache<T>,
    hf: Vec<T>,
}

impl<T> std::fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("len", &self.len).finish_non_exhaustive()
    }
}

impl<T> Tape<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn add<T: Real>(x: &[T], y: &[T]) -> Vec<T> {
    x.iter().zip(y).map(|(&a, &b)| a + b).collect()
}

fn acc<T: Real>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

impl<T: Real> Backbone<T> {
    pub fn new(config: BackboneConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = ParamSet::init(&layout, rng);
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: BackboneConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let ok = params.names.len() == layout.specs.len()
            && layout
                .specs
                .iter()
                .zip(params.names.iter().zip(&params.shapes))
                .all(|(s, (n, sh))| &s.name == n && &s.shape == sh);
        if !ok {
            return Err(Error::Shape("parameters do not match the backbone topology".into()));
        }
        Ok(Self { config, layout, params })
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    pub(crate) fn p(&self, i: usize) -> &[T] {
        &self.params.data[i]
    }

    pub(crate) fn visibility(&self) -> Visibility {
        Visibility {
            causal: self.config.causal(),
            window: self.config.attn_window,
        }
    }

    pub(crate) fn lin(&self, x: &[T], ids: LinearIds, m: usize) -> Vec<T> {
        let w = self.p(ids.w);
        let n = self.p(ids.b).len();
        linear(x, w, self.p(ids.b), m, w.len() / n, n)
    }

    pub(crate) fn norm(&self, x: &[T], ids: NormIds) -> (Vec<T>, NormCache<T>) {
        layer_norm(x, self.p(ids.g), self.p(ids.b), self.config.model_dim)
    }

    fn x_width(&self) -> usize {
        match self.config.mode {
            Mode::Causal => self.config.model_dim,
            Mode::Bidirectional => self.config.input_dim,
        }
    }

    pub(crate) fn input_width(&self) -> usize {
        self.x_width() + N_STREAMS * self.config.cond_dim
    }

    pub(crate) fn check_cond_row(&self, row: &[u32]) -> Result<()> {
        let sizes = self.config.cond_vocab.sizes();
        for (s, (&id, &n)) in row.iter().zip(&sizes).enumerate() {
            if id as usize > n {
                return Err(Error::Invalid(format!("condition id {id} out of range for stream {s}")));
            }
        }
        Ok(())
    }

    /// Writes `concat(token embedding sum | latent frame, condition rows)`.
    pub(crate) fn input_row(&self, tokens: Option<&[u32]>, latent: Option<&[T]>, cond: &[u32], out: &mut [T]) {
        let xw = self.x_width();
        let d = self.config.model_dim;
        out[..xw].fill(T::ZERO);
        if let Some(ids) = tokens {
            for (b, &id) in ids.iter().enumerate() {
                let table = self.p(self.layout.tok_emb[b]);
                acc(&mut out[..d], &table[id as usize * d..(id as usize + 1) * d]);
            }
        }
        if let Some(z) = latent {
            out[..xw].copy_from_slice(z);
        }
        let cd = self.config.cond_dim;
        for (s, &id) in cond.iter().enumerate() {
            let table = self.p(self.layout.cond_emb[s]);
            out[xw + s * cd..xw + (s + 1) * cd].copy_from_slice(&table[id as usize * cd..(id as usize + 1) * cd]);
        }
    }

    pub(crate) fn effective_caption(&self, caption: &[u32]) -> Result<Vec<u32>> {
        if let Some(&bad) = caption.iter().find(|&&t| t as usize >= self.config.caption_vocab) {
            return Err(Error::Invalid(format!("caption token {bad} out of range")));
        }
        Ok(if caption.is_empty() { vec![0] } else { caption.to_vec() })
    }

    /// Caption memory rows: the mean embedding followed by each token's.
    pub(crate) fn memory(&self, caption: &[u32]) -> Vec<T> {
        let d = self.config.model_dim;
        let table = self.p(self.layout.caption_emb);
        let mut mem = vec![T::ZERO; (caption.len() + 1) * d];
        for (t, &id) in caption.iter().enumerate() {
            let row = &table[id as usize * d..(id as usize + 1) * d];
            acc(&mut mem[..d], row);
            mem[(t + 1) * d..(t + 2) * d].copy_from_slice(row);
        }
        let inv = T::of(1.0 / caption.len() as f64);
        for x in &mut mem[..d] {
            *x *= inv;
        }
        mem
    }

    /// Full forward over one sequence. Returns `[len, output_dim]` and the
    /// activations needed by `backward`.
    pub fn forward(&self, x: &SeqInput<'_, T>) -> Result<(Vec<T>, Tape<T>)> {
        let c = &self.config;
        let d = c.model_dim;
        let len = match x.input {
            Input::Tokens(g) => {
                if c.mode != Mode::Causal {
                    return Err(Error::Invalid("token input needs a causal backbone".into()));
                }
                if g.n_books() != c.n_books {
                    return Err(Error::Shape(format!("{} token streams, model expects {}", g.n_books(), c.n_books)));
                }
                if let Some(&bad) = g.cells().iter().find(|&&id| id as usize >= c.token_vocab()) {
                    return Err(Error::Invalid(format!("token id {bad} out of range")));
                }
                g.len()
            }
            Input::Latent(z) => {
                if c.mode != Mode::Bidirectional {
                    return Err(Error::Invalid("latent input needs a bidirectional backbone".into()));
                }
                if z.len() % c.input_dim != 0 {
                    return Err(Error::Shape(format!("latent length {} not a multiple of {}", z.len(), c.input_dim)));
                }
                z.len() / c.input_dim
            }
        };
        if len == 0 {
            return Err(Error::Invalid("empty sequence".into()));
        }
        if len > c.max_len {
            return Err(Error::Overflow { len, max_len: c.max_len });
        }
        if x.cond.len != len {
            return Err(Error::Shape(format!("{} condition rows for {len} positions", x.cond.len)));
        }
        for p in 0..len {
            self.check_cond_row(x.cond.row(p))?;
        }
        let tfeat = match (c.mode, x.tau) {
            (Mode::Bidirectional, Some(t)) => Some(time_features::<T>(t, TIME_FEATURES)),
            (Mode::Bidirectional, None) => return Err(Error::Invalid("flow backbone needs a timestep".into())),
            (Mode::Causal, Some(_)) => return Err(Error::Invalid("causal backbone takes no timestep".into())),
            (Mode::Causal, None) => None,
        };
        let caption = self.effective_caption(x.caption)?;

        let width = self.input_width();
        let mut u = vec![T::ZERO; len * width];
        let mut col = vec![0u32; c.n_books];
        for p in 0..len {
            let row = &mut u[p * width..(p + 1) * width];
            match x.input {
                Input::Tokens(g) => {
                    for (b, id) in col.iter_mut().enumerate() {
                        *id = g.get(b, p);
                    }
                    self.input_row(Some(&col), None, x.cond.row(p), row);
                }
                Input::Latent(z) => {
                    self.input_row(None, Some(&z[p * c.input_dim..(p + 1) * c.input_dim]), x.cond.row(p), row)
                }
            }
        }
        let mut h = self.lin(&u, self.layout.input, len);
        let pos = self.p(self.layout.pos);
        for p in 0..len {
            acc(&mut h[p * d..(p + 1) * d], &pos[p * d..(p + 1) * d]);
        }
        if let (Some(tf), Some(ids)) = (&tfeat, self.layout.time) {
            let te = self.lin(tf, ids, 1);
            for row in h.chunks_exact_mut(d) {
                acc(row, &te);
            }
        }

        let mem = self.memory(&caption);
        let m = caption.len() + 1;
        let vis = self.visibility();
        let heads = c.n_heads;
        let mut outs: Vec<Vec<T>> = vec![h];
        let mut tapes = Vec::with_capacity(c.n_blocks);
        for (i, ids) in self.layout.blocks.iter().enumerate() {
            let prev = &outs[i];
            let (xin, skip_in) = match (c.skip_source(i + 1), ids.skip) {
                (Some(src), Some(sk)) => {
                    let mut cat = vec![T::ZERO; len * 2 * d];
                    for p in 0..len {
                        cat[p * 2 * d..p * 2 * d + d].copy_from_slice(&prev[p * d..(p + 1) * d]);
                        cat[p * 2 * d + d..(p + 1) * 2 * d].copy_from_slice(&outs[src][p * d..(p + 1) * d]);
                    }
                    (self.lin(&cat, sk, len), Some(cat))
                }
                _ => (prev.clone(), None),
            };
            let (a, ln1) = self.norm(&xin, ids.ln1);
            let q = self.lin(&a, ids.q, len);
            let k = self.lin(&a, ids.k, len);
            let v = self.lin(&a, ids.v, len);
            let (att, probs) = attention(&q, &k, &v, len, d, heads, |r| vis.range(r, len));
            let x1 = add(&xin, &self.lin(&att, ids.o, len));
            let (b, ln2) = self.norm(&x1, ids.ln2);
            let cq = self.lin(&b, ids.cq, len);
            let ck = self.lin(&mem, ids.ck, m);
            let cv = self.lin(&mem, ids.cv, m);
            let (catt, cprobs) = attention(&cq, &ck, &cv, len, d, heads, |_| (0, m));
            let x2 = add(&x1, &self.lin(&catt, ids.co, len));
            let (cn, ln3) = self.norm(&x2, ids.ln3);
            let f1 = self.lin(&cn, ids.ff1, len);
            let g: Vec<T> = f1.iter().map(|&v| gelu(v)).collect();
            let x3 = add(&x2, &self.lin(&g, ids.ff2, len));
            outs.push(x3);
            tapes.push(BlockTape {
                skip_in,
                ln1,
                a,
                q,
                k,
                v,
                probs,
                att,
                ln2,
                b,
                cq,
                ck,
                cv,
                cprobs,
                catt,
                ln3,
                c: cn,
                f1,
                g,
            });
        }
        let last = outs.pop().expect("at least one block");
        let (hf, lnf) = self.norm(&last, self.layout.ln_f);
        let out = self.lin(&hf, self.layout.head, len);
        let tape = Tape {
            len,
            tokens: match x.input {
                Input::Tokens(g) => Some(g.clone()),
                Input::Latent(_) => None,
            },
            cond: x.cond.clone(),
            caption,
            u,
            tfeat,
            mem,
            blocks: tapes,
            lnf,
            hf,
        };
        Ok((out, tape))
    }

    fn lin_back(&self, x: &[T], ids: LinearIds, dy: &[T], grads: &mut ParamSet<T>, m: usize) -> Vec<T> {
        let n = self.p(ids.b).len();
        let k = self.p(ids.w).len() / n;
        let (gw, gb) = two_mut(&mut grads.data, ids.w, ids.b);
        linear_backward(x, self.p(ids.w), dy, gw, gb, m, k, n)
    }

    fn norm_back(&self, cache: &NormCache<T>, ids: NormIds, dy: &[T], grads: &mut ParamSet<T>) -> Vec<T> {
        let (gg, gb) = two_mut(&mut grads.data, ids.g, ids.b);
        layer_norm_backward(cache, self.p(ids.g), dy, gg, gb, self.config.model_dim)
    }

    /// Accumulates parameter gradients of `Σ out ⊙ dout` into `grads`.
    /// Returns the gradient w.r.t. a latent input (bidirectional mode).
    pub fn backward(&self, tape: &Tape<T>, dout: &[T], grads: &mut ParamSet<T>) -> Option<Vec<T>> {
        let c = &self.config;
        let d = c.model_dim;
        let len = tape.len;
        assert_eq!(dout.len(), len * c.output_dim(), "output gradient shape");
        let heads = c.n_heads;
        let vis = self.visibility();
        let m = tape.caption.len() + 1;

        let dhf = self.lin_back(&tape.hf, self.layout.head, dout, grads, len);
        let mut d_outs: Vec<Option<Vec<T>>> = vec![None; c.n_blocks + 1];
        d_outs[c.n_blocks] = Some(self.norm_back(&tape.lnf, self.layout.ln_f, &dhf, grads));
        let mut dmem = vec![T::ZERO; m * d];
        for i in (0..c.n_blocks).rev() {
            let bt = &tape.blocks[i];
            let ids = &self.layout.blocks[i];
            let dx3 = d_outs[i + 1].take().expect("gradient reaches every block output");
            let dg = self.lin_back(&bt.g, ids.ff2, &dx3, grads, len);
            let df1: Vec<T> = dg.iter().zip(&bt.f1).map(|(&g, &f)| g * gelu_grad(f)).collect();
            let dcn = self.lin_back(&bt.c, ids.ff1, &df1, grads, len);
            let dx2 = add(&dx3, &self.norm_back(&bt.ln3, ids.ln3, &dcn, grads));

            let dcatt = self.lin_back(&bt.catt, ids.co, &dx2, grads, len);
            let (dcq, dck, dcv) =
                attention_backward(&bt.cq, &bt.ck, &bt.cv, &bt.cprobs, &dcatt, len, m, d, heads, |_| (0, m));
            acc(&mut dmem, &self.lin_back(&tape.mem, ids.ck, &dck, grads, m));
            acc(&mut dmem, &self.lin_back(&tape.mem, ids.cv, &dcv, grads, m));
            let db = self.lin_back(&bt.b, ids.cq, &dcq, grads, len);
            let dx1 = add(&dx2, &self.norm_back(&bt.ln2, ids.ln2, &db, grads));

            let datt = self.lin_back(&bt.att, ids.o, &dx1, grads, len);
            let (dq, dk, dv) =
                attention_backward(&bt.q, &bt.k, &bt.v, &bt.probs, &datt, len, len, d, heads, |r| vis.range(r, len));
            let mut da = self.lin_back(&bt.a, ids.q, &dq, grads, len);
            acc(&mut da, &self.lin_back(&bt.a, ids.k, &dk, grads, len));
            acc(&mut da, &self.lin_back(&bt.a, ids.v, &dv, grads, len));
            let dxin = add(&dx1, &self.norm_back(&bt.ln1, ids.ln1, &da, grads));

            let mut route = |j: usize, g: Vec<T>| match &mut d_outs[j] {
                Some(e) => acc(e, &g),
                slot => *slot = Some(g),
            };
            match (&bt.skip_in, ids.skip, c.skip_source(i + 1)) {
                (Some(cat), Some(sk), Some(src)) => {
                    let dcat = self.lin_back(cat, sk, &dxin, grads, len);
                    let mut dprev = vec![T::ZERO; len * d];
                    let mut dsrc = vec![T::ZERO; len * d];
                    for p in 0..len {
                        dprev[p * d..(p + 1) * d].copy_from_slice(&dcat[p * 2 * d..p * 2 * d + d]);
                        dsrc[p * d..(p + 1) * d].copy_from_slice(&dcat[p * 2 * d + d..(p + 1) * 2 * d]);
                    }
                    route(i, dprev);
                    route(src, dsrc);
                }
                _ => route(i, dxin),
            }
        }
        let dh0 = d_outs[0].take().expect("gradient reaches the input embedding");

        let gpos = &mut grads.data[self.layout.pos];
        for p in 0..len {
            acc(&mut gpos[p * d..(p + 1) * d], &dh0[p * d..(p + 1) * d]);
        }
        if let (Some(tf), Some(ids)) = (&tape.tfeat, self.layout.time) {
            let mut dte = vec![T::ZERO; d];
            for row in dh0.chunks_exact(d) {
                acc(&mut dte, row);
            }
            self.lin_back(tf, ids, &dte, grads, 1);
        }
        let width = self.input_width();
        let du = self.lin_back(&tape.u, self.layout.input, &dh0, grads, len);
        let xw = self.x_width();
        let cw = width - xw;
        let mut dcond = vec![T::ZERO; len * cw];
        for p in 0..len {
            dcond[p * cw..(p + 1) * cw].copy_from_slice(&du[p * width + xw..(p + 1) * width]);
        }
        let cids = self.layout.cond_emb;
        let mut taken: [Vec<T>; N_STREAMS] = std::array::from_fn(|s| std::mem::take(&mut grads.data[cids[s]]));
        {
            let [a, b, cc] = &mut taken;
            let mut tables = [a.as_mut_slice(), b.as_mut_slice(), cc.as_mut_slice()];
            condition_grid_backward(&tape.cond, &dcond, [c.cond_dim; N_STREAMS], &mut tables);
        }
        for (s, t) in taken.into_iter().enumerate() {
            grads.data[cids[s]] = t;
        }

        let gcap = &mut grads.data[self.layout.caption_emb];
        let inv = T::of(1.0 / tape.caption.len() as f64);
        for (t, &id) in tape.caption.iter().enumerate() {
            let row = &mut gcap[id as usize * d..(id as usize + 1) * d];
            for k in 0..d {
                row[k] += dmem[k] * inv + dmem[(t + 1) * d + k];
            }
        }

        match &tape.tokens {
            Some(g) => {
                for p in 0..len {
                    for b in 0..c.n_books {
                        let id = g.get(b, p) as usize;
                        let table = &mut grads.data[self.layout.tok_emb[b]];
                        acc(&mut table[id * d..(id + 1) * d], &du[p * width..p * width + d]);
                    }
                }
                None
            }
            None => {
                let mut dz = vec![T::ZERO; len * xw];
                for p in 0..len {
                    dz[p * xw..(p + 1) * xw].copy_from_slice(&du[p * width..p * width + xw]);
                }
                Some(dz)
            }
        }
    }
}

fn two_mut<T>(v: &mut [Vec<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}
