//! Token-domain generation: cross-entropy over the delayed grid, filtered
//! sampling with classifier-free guidance, and fill-in-the-middle inpainting.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Input, ParamSet, SeqInput};
use crate::cond::{cond_ids_for_frames, CondIds, CondVocab, ControlSet, DropMask};
use crate::delay::{apply_delay, apply_delay_with_specials, revert_delay, special, TokenGrid};
use crate::error::{Error, Result};
use crate::num::SeededRng;

/// Temperatures below this switch to argmax.
pub const GREEDY_BELOW: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArSamplerConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub cfg_coef: f64,
    /// Frames generated by `sample`.
    pub max_frames: usize,
}

impl Default for ArSamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            top_p: None,
            cfg_coef: 3.0,
            max_frames: 500,
        }
    }
}

impl ArSamplerConfig {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("ar sampler: {m}")));
        if self.top_k.is_some() && self.top_p.is_some() {
            return bad("set at most one of top_k and top_p".into());
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature must be finite and non-negative, got {}", self.temperature));
        }
        if self.top_k == Some(0) {
            return bad("top_k must be positive".into());
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("top_p must lie in (0, 1], got {p}"));
            }
        }
        if !(self.cfg_coef >= 0.0) || !self.cfg_coef.is_finite() {
            return bad(format!("cfg_coef must be finite and non-negative, got {}", self.cfg_coef));
        }
        if self.max_frames == 0 {
            return bad("max_frames must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeMode {
    /// Mean negative log-likelihood over non-PAD cells.
    Standard,
    /// Standard divided by the codebook size.
    PerClass,
}

/// Cross-entropy of `[len, n_books, |S|]` logits against a delayed grid with
/// `|S| = target.card()`. PAD cells are skipped.
pub fn ce_loss(logits: &[f32], target: &TokenGrid, mode: CeMode) -> Result<f64> {
    let s = target.card() as usize;
    let nb = target.n_books();
    if logits.len() != target.len() * nb * s {
        return Err(Error::Shape(format!(
            "{} logits for a {}x{} grid over {s} classes",
            logits.len(),
            nb,
            target.len()
        )));
    }
    let (nll, count) = nll_and_grad(logits, target, s, s, false, None);
    let standard = if count == 0 { 0.0 } else { nll / count as f64 };
    Ok(match mode {
        CeMode::Standard => standard,
        CeMode::PerClass => standard / s as f64,
    })
}

/// Class of a target cell, or `None` when the cell carries no loss.
fn target_class(id: u32, card: u32, allow_eos: bool) -> Option<usize> {
    if id < card {
        Some(id as usize)
    } else if allow_eos && id == card + special::EOS {
        Some(card as usize)
    } else {
        None
    }
}

/// Sum of `-log p(target)` and the cell count. Each book row holds
/// `stride` logits of which the first `classes` take part in the softmax
/// (EOS is the class after the codes). When `grad` is given, adds
/// `scale * (softmax - onehot)` into it.
fn nll_and_grad(
    logits: &[f32],
    target: &TokenGrid,
    stride: usize,
    classes: usize,
    allow_eos: bool,
    mut grad: Option<(&mut [f32], f32)>,
) -> (f64, usize) {
    let nb = target.n_books();
    let card = target.card();
    let mut nll = 0.0;
    let mut count = 0;
    let mut p = vec![0f64; classes];
    for pos in 0..target.len() {
        for b in 0..nb {
            let Some(cls) = target_class(target.get(b, pos), card, allow_eos) else {
                continue;
            };
            let off = (pos * nb + b) * stride;
            let row = &logits[off..off + classes];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &x| a.max(x)) as f64;
            let mut z = 0.0;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x as f64 - m).exp();
                z += *pi;
            }
            nll += z.ln() + m - row[cls] as f64;
            count += 1;
            if let Some((g, scale)) = grad.as_mut() {
                let g = &mut g[off..off + classes];
                for (k, (gk, &pk)) in g.iter_mut().zip(&p).enumerate() {
                    let d = pk / z - if k == cls { 1.0 } else { 0.0 };
                    *gk += *scale * d as f32;
                }
            }
        }
    }
    (nll, count)
}

/// `(1 - alpha) * uncond + alpha * cond`; exact at `alpha` 0 and 1.
pub fn guide(cond: &[f32], uncond: &[f32], alpha: f64) -> Vec<f32> {
    let a = alpha as f32;
    cond.iter().zip(uncond).map(|(&c, &u)| (1.0 - a) * u + a * c).collect()
}

/// Softmax of `logits / temperature` in double precision.
pub fn softmax(logits: &[f32], temperature: f64) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &x| a.max(x)) as f64;
    let mut p: Vec<f64> = logits.iter().map(|&x| ((x as f64 - m) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    for x in &mut p {
        *x /= z;
    }
    p
}

/// Indices by descending probability, lower index first on ties.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

fn keep_only(probs: &mut [f64], keep: &[usize]) {
    if keep.len() == probs.len() {
        return;
    }
    let mut mask = vec![false; probs.len()];
    for &i in keep {
        mask[i] = true;
    }
    let z: f64 = keep.iter().map(|&i| probs[i]).sum();
    for (p, m) in probs.iter_mut().zip(mask) {
        *p = if m { *p / z } else { 0.0 };
    }
}

/// Keeps the `k` most probable ids and renormalizes.
pub fn top_k_filter(probs: &mut [f64], k: usize) {
    let order = ranked(probs);
    keep_only(probs, &order[..k.min(order.len())]);
}

/// Keeps the shortest prefix of descending ids whose mass reaches `p` and
/// renormalizes.
pub fn top_p_filter(probs: &mut [f64], p: f64) {
    let order = ranked(probs);
    let mut mass = 0.0;
    let mut n = order.len();
    for (i, &id) in order.iter().enumerate() {
        mass += probs[id];
        if mass >= p {
            n = i + 1;
            break;
        }
    }
    keep_only(probs, &order[..n]);
}

fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Draws one id from guided logits.
pub fn pick(logits: &[f32], cfg: &ArSamplerConfig, rng: &mut SeededRng) -> usize {
    if cfg.temperature < GREEDY_BELOW {
        return argmax(logits);
    }
    let mut p = softmax(logits, cfg.temperature);
    if let Some(k) = cfg.top_k {
        top_k_filter(&mut p, k);
    }
    if let Some(tp) = cfg.top_p {
        top_p_filter(&mut p, tp);
    }
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Prepends the start column and drops the last column: input position `p`
/// sees delayed column `p - 1`.
fn shift_right(delayed: &TokenGrid) -> TokenGrid {
    let nb = delayed.n_books();
    let len = delayed.len();
    let card = delayed.card();
    let mut out = TokenGrid::filled(nb, len, card, card + special::START);
    for b in 0..nb {
        for p in 1..len {
            out.set(b, p, delayed.get(b, p - 1));
        }
    }
    out
}

/// Condition ids per model position given the source frame of each
/// undelayed column; positions past the last column repeat it.
fn positions_cond(
    controls: &ControlSet,
    vocab: &CondVocab,
    col_frames: &[Option<usize>],
    positions: usize,
    drop: DropMask,
) -> CondIds {
    let frames: Vec<Option<usize>> = (0..positions).map(|p| col_frames[p.min(col_frames.len() - 1)]).collect();
    cond_ids_for_frames(controls, vocab, &frames, drop)
}

/// Source frame of each column of a fill-in-the-middle sequence with a
/// trailing EOS column.
fn fim_frames(len: usize, s: usize, e: usize) -> Vec<Option<usize>> {
    let mut f = vec![None];
    f.extend((0..s).map(Some));
    f.push(None);
    f.extend((e..len).map(Some));
    f.push(None);
    f.extend((s..e).map(Some));
    f.push(None);
    f
}

fn check_span(len: usize, s: usize, e: usize) -> Result<()> {
    if !(0 < s && s < e && e < len) {
        return Err(Error::Invalid(format!("span [{s}, {e}) must satisfy 0 < s < e < {len}")));
    }
    Ok(())
}

/// Reorders frames as `[<a>, A, <c>, C, <b>, B]` with `A = [0, s)`,
/// `B = [s, e)`, `C = [e, L)`.
pub fn fim_prepare(tokens: &TokenGrid, s: usize, e: usize) -> Result<TokenGrid> {
    check_span(tokens.len(), s, e)?;
    let nb = tokens.n_books();
    let card = tokens.card();
    let marker = |id: u32| TokenGrid::filled(nb, 1, card, card + id);
    TokenGrid::concat(&[
        &marker(special::FIM_A),
        &tokens.slice_frames(0, s),
        &marker(special::FIM_C),
        &tokens.slice_frames(e, tokens.len()),
        &marker(special::FIM_B),
        &tokens.slice_frames(s, e),
    ])
}

fn check_marker(g: &TokenGrid, col: usize, id: u32, name: &str) -> Result<()> {
    let want = g.card() + id;
    for b in 0..g.n_books() {
        let got = g.get(b, col);
        if got != want {
            return Err(Error::Generation(format!(
                "expected {name} at column {col} of codebook {b}, found id {got}"
            )));
        }
    }
    Ok(())
}

/// Inverse of [`fim_prepare`] given the original span.
pub fn fim_restore(g: &TokenGrid, s: usize, e: usize) -> Result<TokenGrid> {
    if g.len() < 3 {
        return Err(Error::Generation(format!("sequence of {} columns is too short", g.len())));
    }
    let len = g.len() - 3;
    check_span(len, s, e)?;
    let c_at = s + 1;
    let b_at = c_at + 1 + (len - e);
    check_marker(g, 0, special::FIM_A, "<a>")?;
    check_marker(g, c_at, special::FIM_C, "<c>")?;
    check_marker(g, b_at, special::FIM_B, "<b>")?;
    let out = TokenGrid::concat(&[
        &g.slice_frames(1, c_at),
        &g.slice_frames(b_at + 1, g.len()),
        &g.slice_frames(c_at + 1, b_at),
    ])?;
    if let Some(i) = out.cells().iter().position(|&id| id >= out.card()) {
        let (b, f) = (i / out.len(), i % out.len());
        return Err(Error::Generation(format!(
            "reserved id {} inside the content at codebook {b}, frame {f}",
            out.cells()[i]
        )));
    }
    Ok(out)
}

/// Model inputs for one training sequence.
#[derive(Debug, Clone)]
pub struct ArExample {
    pub input: TokenGrid,
    pub target: TokenGrid,
    pub cond: CondIds,
    pub caption: Vec<u32>,
    pub allow_eos: bool,
}

impl ArExample {
    /// Plain continuation training. Controls must be at the token rate.
    pub fn plain(tokens: &TokenGrid, controls: &ControlSet, vocab: &CondVocab, caption: &[u32], drop: DropMask) -> Result<Self> {
        let target = apply_delay(tokens)?;
        let frames: Vec<Option<usize>> = (0..tokens.len()).map(Some).collect();
        Ok(Self {
            input: shift_right(&target),
            cond: positions_cond(controls, vocab, &frames, target.len(), drop),
            target,
            caption: caption.to_vec(),
            allow_eos: false,
        })
    }

    /// Fill-in-the-middle training over `[<a>, A, <c>, C, <b>, B, <eos>]`.
    pub fn fim(
        tokens: &TokenGrid,
        controls: &ControlSet,
        vocab: &CondVocab,
        caption: &[u32],
        drop: DropMask,
        s: usize,
        e: usize,
    ) -> Result<Self> {
        let eos = TokenGrid::filled(tokens.n_books(), 1, tokens.card(), tokens.card() + special::EOS);
        let seq = TokenGrid::concat(&[&fim_prepare(tokens, s, e)?, &eos])?;
        let target = apply_delay_with_specials(&seq)?;
        let frames = fim_frames(tokens.len(), s, e);
        Ok(Self {
            input: shift_right(&target),
            cond: positions_cond(controls, vocab, &frames, target.len(), drop),
            target,
            caption: caption.to_vec(),
            allow_eos: true,
        })
    }

    /// Target cells that carry loss.
    pub fn loss_cells(&self) -> usize {
        let card = self.target.card();
        self.target
            .cells()
            .iter()
            .filter(|&&id| target_class(id, card, self.allow_eos).is_some())
            .count()
    }

    fn classes(&self, model: &Backbone<f32>) -> usize {
        model.config.card + self.allow_eos as usize
    }

    /// Summed negative log-likelihood and cell count.
    pub fn nll(&self, model: &Backbone<f32>) -> Result<(f64, usize)> {
        let (out, _) = model.forward(&self.seq_input())?;
        let stride = model.config.book_logits();
        Ok(nll_and_grad(&out, &self.target, stride, self.classes(model), self.allow_eos, None))
    }

    /// Like [`ArExample::nll`], also accumulating `scale * d(nll)/d(params)`
    /// into `grads`.
    pub fn nll_backward(&self, model: &Backbone<f32>, scale: f32, grads: &mut ParamSet<f32>) -> Result<(f64, usize)> {
        let (out, tape) = model.forward(&self.seq_input())?;
        let stride = model.config.book_logits();
        let mut dout = vec![0f32; out.len()];
        let r = nll_and_grad(&out, &self.target, stride, self.classes(model), self.allow_eos, Some((&mut dout, scale)));
        model.backward(&tape, &dout, grads);
        Ok(r)
    }

    fn seq_input(&self) -> SeqInput<'_, f32> {
        SeqInput {
            input: Input::Tokens(&self.input),
            cond: &self.cond,
            caption: &self.caption,
            tau: None,
        }
    }
}

/// One decoding problem: `cols` undelayed columns of which the first
/// `prefix.len()` are given.
#[derive(Debug, Clone)]
pub struct DecodeJob {
    pub prefix: TokenGrid,
    pub cols: usize,
    pub cond: CondIds,
    pub caption: Vec<u32>,
}

impl DecodeJob {
    /// Unprompted generation of `len` frames with every control stream live
    /// when `controls` is given.
    pub fn fresh(model: &Backbone<f32>, len: usize, caption: &[u32], controls: Option<&ControlSet>) -> Self {
        let c = &model.config;
        let positions = len + c.n_books - 1;
        let cond = match controls {
            Some(ctl) => {
                let frames: Vec<Option<usize>> = (0..len).map(Some).collect();
                positions_cond(ctl, &c.cond_vocab, &frames, positions, DropMask::NONE)
            }
            None => CondIds::null(&c.cond_vocab, positions),
        };
        Self {
            prefix: TokenGrid::filled(c.n_books, 0, c.card as u32, 0),
            cols: len,
            cond,
            caption: caption.to_vec(),
        }
    }

    fn positions(&self) -> usize {
        self.cols + self.prefix.n_books() - 1
    }
}

/// How logits are obtained during decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoder {
    /// Incremental key/value caches, one position per call.
    Cached,
    /// Full forward over the whole prefix at every position.
    Recompute,
}

struct Streams {
    conds: Vec<CondIds>,
    captions: Vec<Vec<u32>>,
}

/// Decodes every job in lockstep. Jobs must share `cols` and prefix length.
/// Each job draws from its own rng. Returns undelayed `[n_books, cols]`
/// grids.
pub fn decode(
    model: &Backbone<f32>,
    jobs: &[DecodeJob],
    cfg: &ArSamplerConfig,
    rngs: &mut [SeededRng],
    decoder: Decoder,
) -> Result<Vec<TokenGrid>> {
    cfg.validate()?;
    let c = &model.config;
    let (nb, card) = (c.n_books, c.card as u32);
    let Some(first) = jobs.first() else {
        return Ok(Vec::new());
    };
    if rngs.len() != jobs.len() {
        return Err(Error::Shape(format!("{} rngs for {} jobs", rngs.len(), jobs.len())));
    }
    let (cols, known) = (first.cols, first.prefix.len());
    for j in jobs {
        if j.cols != cols || j.prefix.len() != known || j.prefix.n_books() != nb || known > cols {
            return Err(Error::Shape("decode jobs differ in shape".into()));
        }
        if j.cond.len != j.positions() {
            return Err(Error::Shape(format!("{} condition rows for {} positions", j.cond.len, j.positions())));
        }
    }
    let positions = first.positions();
    if positions > c.max_len {
        return Err(Error::Overflow {
            len: positions,
            max_len: c.max_len,
        });
    }
    let bsz = jobs.len();
    // Rows 0..B are conditional, rows B..2B the all-null stream.
    let streams = Streams {
        conds: jobs
            .iter()
            .map(|j| j.cond.clone())
            .chain(jobs.iter().map(|j| CondIds::null(&c.cond_vocab, j.positions())))
            .collect(),
        captions: jobs.iter().map(|j| j.caption.clone()).chain(jobs.iter().map(|_| Vec::new())).collect(),
    };
    let mut grids: Vec<TokenGrid> = (0..bsz).map(|_| TokenGrid::filled(nb, positions, card, card)).collect();
    let mut caches = match decoder {
        Decoder::Cached => streams
            .captions
            .iter()
            .map(|cap| model.new_cache(cap))
            .collect::<Result<Vec<_>>>()?,
        Decoder::Recompute => Vec::new(),
    };
    let width = c.book_logits();
    let row = nb * width;
    let mut tokens = vec![0u32; 2 * bsz * nb];
    let mut conds = vec![0u32; 2 * bsz * crate::cond::N_STREAMS];
    for p in 0..positions {
        for (r, t) in tokens.chunks_exact_mut(nb).enumerate() {
            let g = &grids[r % bsz];
            for (b, id) in t.iter_mut().enumerate() {
                *id = if p == 0 { card + special::START } else { g.get(b, p - 1) };
            }
        }
        for (r, s) in conds.chunks_exact_mut(crate::cond::N_STREAMS).enumerate() {
            s.copy_from_slice(streams.conds[r].row(p));
        }
        let out = match decoder {
            Decoder::Cached => {
                let mut refs: Vec<&mut _> = caches.iter_mut().collect();
                model.step(&mut refs, &tokens, &conds)?
            }
            Decoder::Recompute => recompute_last(model, &grids, &streams, p)?,
        };
        for (j, job) in jobs.iter().enumerate() {
            let cond_row = &out[j * row..(j + 1) * row];
            let null_row = &out[(bsz + j) * row..(bsz + j + 1) * row];
            for b in 0..nb {
                let id = match p.checked_sub(b) {
                    None => card + special::PAD,
                    Some(col) if col >= cols => card + special::PAD,
                    Some(col) if col < known => job.prefix.get(b, col),
                    Some(_) => {
                        let span = b * width..b * width + c.card;
                        let g = guide(&cond_row[span.clone()], &null_row[span], cfg.cfg_coef);
                        pick(&g, cfg, &mut rngs[j]) as u32
                    }
                };
                grids[j].set(b, p, id);
            }
        }
    }
    grids.iter().map(revert_delay).collect()
}

/// Last-position outputs of a full forward over every stream, laid out like
/// a cached step.
fn recompute_last(model: &Backbone<f32>, grids: &[TokenGrid], streams: &Streams, p: usize) -> Result<Vec<f32>> {
    let bsz = grids.len();
    let c = &model.config;
    let card = c.card as u32;
    let dim = c.output_dim();
    let mut out = Vec::with_capacity(2 * bsz * dim);
    for r in 0..2 * bsz {
        let g = &grids[r % bsz];
        let input = shift_right(&g.slice_frames(0, p + 1));
        debug_assert_eq!(input.card(), card);
        let cond = streams.conds[r].slice(0, p + 1);
        let (y, _) = model.forward(&SeqInput {
            input: Input::Tokens(&input),
            cond: &cond,
            caption: &streams.captions[r],
            tau: None,
        })?;
        out.extend_from_slice(&y[p * dim..]);
    }
    Ok(out)
}

/// Generates `cfg.max_frames` frames for each (caption, controls) request.
/// Element `i` draws from `rng.substream(i)`.
pub fn sample(
    model: &Backbone<f32>,
    requests: &[(&[u32], Option<&ControlSet>)],
    cfg: &ArSamplerConfig,
    rng: &SeededRng,
) -> Result<Vec<TokenGrid>> {
    let jobs: Vec<DecodeJob> = requests
        .iter()
        .map(|(cap, ctl)| DecodeJob::fresh(model, cfg.max_frames, cap, *ctl))
        .collect();
    let mut rngs: Vec<SeededRng> = (0..jobs.len()).map(|i| rng.substream(i as u64)).collect();
    decode(model, &jobs, cfg, &mut rngs, Decoder::Cached)
}

/// Regenerates frames `[s, e)` of `tokens` from the prompt
/// `[<a>, A, <c>, C, <b>]` and reassembles `A | B | C`. Exactly `e - s`
/// frames are generated and end-of-sequence is never sampled, since the span
/// length is known.
#[allow(clippy::too_many_arguments)]
pub fn fim_inpaint(
    model: &Backbone<f32>,
    tokens: &TokenGrid,
    controls: Option<&ControlSet>,
    caption: &[u32],
    s: usize,
    e: usize,
    cfg: &ArSamplerConfig,
    rng: &mut SeededRng,
) -> Result<TokenGrid> {
    let prepared = fim_prepare(tokens, s, e)?;
    let len = tokens.len();
    let c = &model.config;
    let cols = prepared.len();
    let prompt = prepared.slice_frames(0, cols - (e - s));
    let positions = cols + c.n_books - 1;
    let cond = match controls {
        Some(ctl) => {
            let mut frames = fim_frames(len, s, e);
            frames.pop();
            positions_cond(ctl, &c.cond_vocab, &frames, positions, DropMask::NONE)
        }
        None => CondIds::null(&c.cond_vocab, positions),
    };
    let job = DecodeJob {
        prefix: prompt,
        cols,
        cond,
        caption: caption.to_vec(),
    };
    let out = decode(model, &[job], cfg, std::slice::from_mut(rng), Decoder::Cached)?;
    let restored = fim_restore(&out[0], s, e)?;
    let mut result = tokens.clone();
    for b in 0..tokens.n_books() {
        for f in s..e {
            result.set(b, f, restored.get(b, f));
        }
    }
    Ok(result)
}
