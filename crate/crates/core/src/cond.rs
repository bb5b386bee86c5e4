//! Frame-aligned control streams, resampling to the latent frame rate,
//! condition dropout, and the per-position condition id grid consumed by the
//! backbone's input layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{Real, SeededRng};

/// Integer ids sampled at a fixed rate (frames per second).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlStream {
    pub ids: Vec<u32>,
    pub rate: f64,
}

impl ControlStream {
    pub fn new(ids: Vec<u32>, rate: f64) -> Self {
        Self { ids, rate }
    }

    pub fn duration(&self) -> f64 {
        self.ids.len() as f64 / self.rate
    }
}

/// Chord, melody and drum conditions plus the reference beat flags.
///
/// Melody ids use `melody_vocab` as the "no pitch" id. Drum ids are the first
/// codebook indices of the temporally blurred latent. `beats` holds 0/1 onset
/// flags; it is never fed to a model and serves as the beat reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    pub chords: ControlStream,
    pub melody: ControlStream,
    pub drums: ControlStream,
    pub beats: ControlStream,
}

/// Stream order inside condition grids.
pub const N_STREAMS: usize = 3;
pub const STREAM_NAMES: [&str; N_STREAMS] = ["chord", "melody", "drum"];

/// Vocabulary of each temporal condition stream, excluding the learned
/// dropout null row that the embedder appends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondVocab {
    pub chord: usize,
    /// Includes the "no pitch" id.
    pub melody: usize,
    pub drum: usize,
}

impl CondVocab {
    pub fn sizes(&self) -> [usize; N_STREAMS] {
        [self.chord, self.melody, self.drum]
    }

    /// Row of the learned null embedding for stream `s`.
    pub fn null_id(&self, s: usize) -> u32 {
        self.sizes()[s] as u32
    }
}

impl ControlSet {
    pub fn len(&self) -> usize {
        self.chords.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chords.ids.is_empty()
    }

    fn streams(&self) -> [&ControlStream; 4] {
        [&self.chords, &self.melody, &self.drums, &self.beats]
    }

    pub fn check_vocab(&self, vocab: &CondVocab) -> Result<()> {
        for (s, limit) in [
            (&self.chords, vocab.chord),
            (&self.melody, vocab.melody),
            (&self.drums, vocab.drum),
            (&self.beats, 2),
        ] {
            if let Some(&id) = s.ids.iter().find(|&&id| id as usize >= limit) {
                return Err(Error::Invalid(format!("control id {id} outside vocabulary {limit}")));
            }
        }
        Ok(())
    }

    /// Frames `[start, end)` of streams already at a common rate.
    pub fn slice(&self, start: usize, end: usize) -> ControlSet {
        let cut = |s: &ControlStream| ControlStream::new(s.ids[start..end].to_vec(), s.rate);
        ControlSet {
            chords: cut(&self.chords),
            melody: cut(&self.melody),
            drums: cut(&self.drums),
            beats: cut(&self.beats),
        }
    }
}

fn source_index(j: usize, src_rate: f64, dst_rate: f64, round: bool, n_src: usize) -> usize {
    let x = j as f64 * src_rate / dst_rate;
    let idx = if round {
        (x + 0.5 + 1e-9).floor()
    } else {
        (x + 1e-9).floor()
    };
    (idx as usize).min(n_src - 1)
}

/// Resamples every stream to `len` frames at `rate`.
///
/// Chords hold the most recent switch, melody and drums take the nearest
/// source frame, and beat onsets are moved to the nearest target frame so
/// that events are neither duplicated nor dropped.
pub fn resample_controls(c: &ControlSet, rate: f64, len: usize) -> Result<ControlSet> {
    if rate <= 0.0 {
        return Err(Error::Invalid(format!("frame rate must be positive, got {rate}")));
    }
    for (name, s) in ["chords", "melody", "drums", "beats"].iter().zip(c.streams()) {
        if s.ids.is_empty() {
            return Err(Error::Invalid(format!("{name} stream is empty")));
        }
        if s.rate <= 0.0 {
            return Err(Error::Invalid(format!("{name} stream has rate {}", s.rate)));
        }
    }
    let map = |s: &ControlStream, round: bool| {
        let ids = (0..len)
            .map(|j| s.ids[source_index(j, s.rate, rate, round, s.ids.len())])
            .collect();
        ControlStream::new(ids, rate)
    };
    let mut beats = vec![0u32; len];
    for (k, &flag) in c.beats.ids.iter().enumerate() {
        if flag != 0 {
            let j = (k as f64 * rate / c.beats.rate + 0.5 + 1e-9).floor() as usize;
            if j < len {
                beats[j] = 1;
            }
        }
    }
    Ok(ControlSet {
        chords: map(&c.chords, false),
        melody: map(&c.melody, true),
        drums: map(&c.drums, true),
        beats: ControlStream::new(beats, rate),
    })
}

/// Which condition streams are replaced by their null embedding. The caption
/// is nulled only when every stream is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropMask {
    pub streams: [bool; N_STREAMS],
}

impl DropMask {
    pub const NONE: DropMask = DropMask {
        streams: [false; N_STREAMS],
    };
    pub const ALL: DropMask = DropMask {
        streams: [true; N_STREAMS],
    };

    /// Keeps only stream `s`.
    pub fn only(s: usize) -> DropMask {
        let mut streams = [true; N_STREAMS];
        streams[s] = false;
        DropMask { streams }
    }

    pub fn all_dropped(&self) -> bool {
        self.streams.iter().all(|&d| d)
    }
}

/// With probability `p_all` drops everything; otherwise each stream is
/// dropped independently with probability `p_drop`.
pub fn drop_conditions(rng: &mut SeededRng, p_drop: f64, p_all: f64) -> Result<DropMask> {
    for p in [p_drop, p_all] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Invalid(format!("probability {p} outside [0, 1]")));
        }
    }
    if rng.bernoulli(p_all) {
        return Ok(DropMask::ALL);
    }
    let mut streams = [false; N_STREAMS];
    for s in streams.iter_mut() {
        *s = rng.bernoulli(p_drop);
    }
    Ok(DropMask { streams })
}

/// Per-position condition ids, `[len, N_STREAMS]` row-major. Dropped
/// streams already carry their null id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CondIds {
    pub len: usize,
    pub ids: Vec<u32>,
}

impl CondIds {
    pub fn row(&self, p: usize) -> &[u32] {
        &self.ids[p * N_STREAMS..(p + 1) * N_STREAMS]
    }

    /// Positions `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> CondIds {
        CondIds {
            len: end - start,
            ids: self.ids[start * N_STREAMS..end * N_STREAMS].to_vec(),
        }
    }

    /// All positions null.
    pub fn null(vocab: &CondVocab, len: usize) -> CondIds {
        let row: Vec<u32> = (0..N_STREAMS).map(|s| vocab.null_id(s)).collect();
        CondIds {
            len,
            ids: row.repeat(len),
        }
    }
}

/// How condition frames line up with model positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// Position `p` carries the conditions of frame `p`, the frame whose
    /// tokens it predicts. The start token therefore sits at frame 0's
    /// conditions, one step before frame 0's tokens enter the input.
    /// Positions past the last frame repeat it.
    AutoRegressive { positions: usize },
    /// Position `p` carries frame `p`, aligned with the noisy state.
    Flow,
}

/// Gathers condition ids for an explicit list of frames; `None` positions get
/// null ids on every stream.
pub fn cond_ids_for_frames(
    controls: &ControlSet,
    vocab: &CondVocab,
    frames: &[Option<usize>],
    drop: DropMask,
) -> CondIds {
    let streams = [&controls.chords.ids, &controls.melody.ids, &controls.drums.ids];
    let mut ids = Vec::with_capacity(frames.len() * N_STREAMS);
    for f in frames {
        for s in 0..N_STREAMS {
            let id = match f {
                Some(f) if !drop.streams[s] => streams[s][*f],
                _ => vocab.null_id(s),
            };
            ids.push(id);
        }
    }
    CondIds {
        len: frames.len(),
        ids,
    }
}

/// Condition ids for a control set already resampled to the latent rate.
pub fn cond_ids(controls: &ControlSet, vocab: &CondVocab, drop: DropMask, align: Alignment) -> CondIds {
    let n = controls.len();
    let frames: Vec<Option<usize>> = match align {
        Alignment::Flow => (0..n).map(Some).collect(),
        Alignment::AutoRegressive { positions } => {
            (0..positions).map(|p| Some(p.min(n - 1))).collect()
        }
    };
    cond_ids_for_frames(controls, vocab, &frames, drop)
}

/// Learned per-stream embedding tables, each `[vocab + 1, dim]` with the
/// final row the dropout null embedding.
#[derive(Debug, Clone, Copy)]
pub struct Embedders<'a, T> {
    pub tables: [&'a [T]; N_STREAMS],
    pub dims: [usize; N_STREAMS],
}

impl<T: Real> Embedders<'_, T> {
    pub fn channels(&self) -> usize {
        self.dims.iter().sum()
    }
}

/// Per-position concatenated stream embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionGrid<T> {
    pub len: usize,
    pub channels: usize,
    pub data: Vec<T>,
    pub null_streams: [bool; N_STREAMS],
}

/// Embeds each stream and stacks the results over the channel axis.
pub fn build_condition_grid<T: Real>(ids: &CondIds, emb: &Embedders<'_, T>, drop: DropMask) -> ConditionGrid<T> {
    let channels = emb.channels();
    let mut data = Vec::with_capacity(ids.len * channels);
    for p in 0..ids.len {
        for (s, &id) in ids.row(p).iter().enumerate() {
            let d = emb.dims[s];
            data.extend_from_slice(&emb.tables[s][id as usize * d..(id as usize + 1) * d]);
        }
    }
    ConditionGrid {
        len: ids.len,
        channels,
        data,
        null_streams: drop.streams,
    }
}

/// Scatters a gradient w.r.t. a condition grid back into table gradients.
pub fn condition_grid_backward<T: Real>(
    ids: &CondIds,
    grad: &[T],
    dims: [usize; N_STREAMS],
    table_grads: &mut [&mut [T]; N_STREAMS],
) {
    let channels: usize = dims.iter().sum();
    for p in 0..ids.len {
        let mut off = p * channels;
        for (s, &id) in ids.row(p).iter().enumerate() {
            let d = dims[s];
            let dst = &mut table_grads[s][id as usize * d..(id as usize + 1) * d];
            for (g, &v) in dst.iter_mut().zip(&grad[off..off + d]) {
                *g += v;
            }
            off += d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(chords: Vec<u32>, rate: f64) -> ControlSet {
        let n = chords.len();
        ControlSet {
            chords: ControlStream::new(chords, rate),
            melody: ControlStream::new(vec![16; n], rate),
            drums: ControlStream::new(vec![0; n], rate),
            beats: ControlStream::new(vec![0; n], rate),
        }
    }

    #[test]
    fn same_rate_is_identity() {
        let mut c = set((0..50).map(|i| (i % 7) as u32).collect(), 50.0);
        c.melody.ids = (0..50).map(|i| (i % 17) as u32).collect();
        c.beats.ids = (0..50).map(|i| (i % 10 == 0) as u32).collect();
        assert_eq!(resample_controls(&c, 50.0, 50).unwrap(), c);
    }

    #[test]
    fn chord_switch_at_four_seconds() {
        // 10 Hz source, switch at source frame 40 = 4.00 s.
        let chords: Vec<u32> = (0..100).map(|i| if i < 40 { 3 } else { 5 }).collect();
        let r = resample_controls(&set(chords, 10.0), 50.0, 500).unwrap();
        assert_eq!(r.chords.ids[199], 3);
        assert_eq!(r.chords.ids[200], 5);
        assert_eq!(r.chords.ids.iter().position(|&c| c == 5), Some(200));
    }

    #[test]
    fn null_melody_stays_null() {
        let r = resample_controls(&set(vec![0; 86], 86.13), 50.0, 50).unwrap();
        assert!(r.melody.ids.iter().all(|&m| m == 16));
    }

    #[test]
    fn beat_onsets_are_preserved() {
        let mut c = set(vec![0; 100], 100.0);
        c.beats.ids = (0..100).map(|i| (i % 20 == 0) as u32).collect();
        let r = resample_controls(&c, 50.0, 50).unwrap();
        let on: Vec<usize> = (0..50).filter(|&j| r.beats.ids[j] == 1).collect();
        assert_eq!(on, vec![0, 10, 20, 30, 40]);
    }

    #[test]
    fn empty_stream_is_an_error() {
        let mut c = set(vec![0; 10], 50.0);
        c.drums.ids.clear();
        assert!(resample_controls(&c, 50.0, 10).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = SeededRng::new(0);
        for _ in 0..100 {
            assert_eq!(drop_conditions(&mut rng, 0.3, 1.0).unwrap(), DropMask::ALL);
            assert_eq!(drop_conditions(&mut rng, 0.0, 0.0).unwrap(), DropMask::NONE);
        }
        assert!(drop_conditions(&mut rng, 1.5, 0.0).is_err());
    }

    #[test]
    fn dropout_rate_per_stream() {
        let mut rng = SeededRng::new(1);
        let n = 10_000;
        let mut counts = [0usize; N_STREAMS];
        for _ in 0..n {
            let m = drop_conditions(&mut rng, 0.5, 0.0).unwrap();
            for s in 0..N_STREAMS {
                counts[s] += m.streams[s] as usize;
            }
        }
        for c in counts {
            let rate = c as f64 / n as f64;
            assert!((rate - 0.5).abs() <= 0.02, "rate {rate}");
        }
    }

    fn tables() -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let t = |rows: usize, d: usize, s: f32| (0..rows * d).map(|i| i as f32 * s).collect::<Vec<_>>();
        (t(4, 2, 1.0), t(4, 3, 0.5), t(3, 1, -1.0))
    }

    #[test]
    fn grid_of_all_null_is_concatenated_nulls() {
        let vocab = CondVocab { chord: 3, melody: 3, drum: 2 };
        let (a, b, c) = tables();
        let emb = Embedders {
            tables: [&a[..], &b[..], &c[..]],
            dims: [2, 3, 1],
        };
        let ctrl = set(vec![0, 1, 2], 50.0);
        let ids = cond_ids(&ctrl, &vocab, DropMask::ALL, Alignment::Flow);
        let grid = build_condition_grid(&ids, &emb, DropMask::ALL);
        assert_eq!(grid.channels, 6);
        let null_row: Vec<f32> = [&a[6..8], &b[9..12], &c[2..3]].concat();
        for p in 0..3 {
            assert_eq!(&grid.data[p * 6..(p + 1) * 6], &null_row[..]);
        }
    }

    #[test]
    fn single_live_stream_keeps_others_null() {
        let vocab = CondVocab { chord: 3, melody: 3, drum: 2 };
        let (a, b, c) = tables();
        let emb = Embedders {
            tables: [&a[..], &b[..], &c[..]],
            dims: [2, 3, 1],
        };
        let mut ctrl = set(vec![2, 1, 0], 50.0);
        ctrl.melody.ids = vec![0, 1, 2];
        let mask = DropMask::only(0);
        let grid = build_condition_grid(&cond_ids(&ctrl, &vocab, mask, Alignment::Flow), &emb, mask);
        for (p, &ch) in [2usize, 1, 0].iter().enumerate() {
            let row = &grid.data[p * 6..(p + 1) * 6];
            assert_eq!(&row[..2], &a[ch * 2..ch * 2 + 2]);
            assert_eq!(&row[2..5], &b[9..12]);
            assert_eq!(&row[5..], &c[2..3]);
        }
    }

    #[test]
    fn ar_alignment_puts_frame_zero_at_start_position() {
        let vocab = CondVocab { chord: 8, melody: 3, drum: 2 };
        let ctrl = set(vec![4, 5, 6], 50.0);
        let ids = cond_ids(&ctrl, &vocab, DropMask::NONE, Alignment::AutoRegressive { positions: 5 });
        let chords: Vec<u32> = (0..5).map(|p| ids.row(p)[0]).collect();
        assert_eq!(chords, vec![4, 5, 6, 6, 6]);
    }

    #[test]
    fn backward_scatters_into_rows() {
        let ids = CondIds { len: 2, ids: vec![1, 0, 0, 1, 2, 0] };
        let grad: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let (mut ga, mut gb, mut gc) = (vec![0.0; 8], vec![0.0; 12], vec![0.0; 3]);
        {
            let mut g: [&mut [f64]; 3] = [&mut ga, &mut gb, &mut gc];
            condition_grid_backward(&ids, &grad, [2, 3, 1], &mut g);
        }
        assert_eq!(&ga[2..4], &[6.0, 8.0]);
        assert_eq!(&gb[0..3], &[2.0, 3.0, 4.0]);
        assert_eq!(&gb[6..9], &[8.0, 9.0, 10.0]);
        assert_eq!(gc, vec![16.0, 0.0, 0.0]);
    }
}
