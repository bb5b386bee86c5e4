//! Temporal adherence: chord agreement, beat F-measure and chroma similarity.

use std::io::Write;
use std::path::Path;

use crate::cond::ControlSet;
use crate::error::{Error, Result};
use crate::world::{LatentSeq, World};

/// Contiguous labelled segments covering `[0, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSegments {
    segs: Vec<(u32, f64, f64)>,
}

impl LabelSegments {
    pub fn new(segs: Vec<(u32, f64, f64)>) -> Result<Self> {
        let mut prev = 0.0;
        for &(_, s, e) in &segs {
            if s != prev || e < s {
                return Err(Error::Invalid(format!("segment [{s}, {e}) does not continue from {prev}")));
            }
            prev = e;
        }
        Ok(Self { segs })
    }

    /// Run-length segments of per-frame labels.
    pub fn from_frames(ids: &[u32], rate: f64) -> Self {
        let mut segs: Vec<(u32, f64, f64)> = Vec::new();
        let mut start = 0;
        for j in 1..=ids.len() {
            if j == ids.len() || ids[j] != ids[start] {
                segs.push((ids[start], start as f64 / rate, j as f64 / rate));
                start = j;
            }
        }
        Self { segs }
    }

    pub fn segments(&self) -> &[(u32, f64, f64)] {
        &self.segs
    }

    pub fn duration(&self) -> f64 {
        self.segs.last().map_or(0.0, |s| s.2)
    }
}

/// Fraction of the timeline on which both segmentations carry the same label.
pub fn chord_iou(reference: &LabelSegments, generated: &LabelSegments) -> Result<f64> {
    let t = reference.duration();
    if (t - generated.duration()).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "durations differ: {t} s versus {} s",
            generated.duration()
        )));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let (a, b) = (&reference.segs, &generated.segs);
    let (mut i, mut j) = (0, 0);
    let mut agree = 0.0;
    while i < a.len() && j < b.len() {
        let lo = a[i].1.max(b[j].1);
        let hi = a[i].2.min(b[j].2);
        if a[i].0 == b[j].0 && hi > lo {
            agree += hi - lo;
        }
        if a[i].2 <= b[j].2 {
            i += 1;
        } else {
            j += 1;
        }
    }
    Ok(agree / t)
}

pub const BEAT_TOLERANCE: f64 = 0.05;

/// Event times of the set flags.
pub fn beat_times(flags: &[u32], rate: f64) -> Vec<f64> {
    flags
        .iter()
        .enumerate()
        .filter(|(_, &f)| f != 0)
        .map(|(j, _)| j as f64 / rate)
        .collect()
}

/// F-measure of one-to-one matches within `tol` seconds (inclusive). Each
/// generated beat, in time order, takes the nearest unmatched reference.
pub fn beat_f1(reference: &[f64], generated: &[f64], tol: f64) -> f64 {
    if reference.is_empty() && generated.is_empty() {
        return 1.0;
    }
    if reference.is_empty() || generated.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; reference.len()];
    let mut hits = 0usize;
    for &g in generated {
        let mut best: Option<(usize, f64)> = None;
        for (i, &r) in reference.iter().enumerate() {
            let d = (r - g).abs();
            if !used[i] && d <= tol + 1e-12 && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            used[i] = true;
            hits += 1;
        }
    }
    if hits == 0 {
        return 0.0;
    }
    let p = hits as f64 / generated.len() as f64;
    let r = hits as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Cosine similarity of octave-folded one-hot chromagrams. `null` frames
/// have no chroma; an all-zero side gives 0.
pub fn melody_similarity(reference: &[u32], generated: &[u32], null: u32) -> Result<f64> {
    if reference.len() != generated.len() {
        return Err(Error::Shape(format!(
            "melodies have {} and {} frames",
            reference.len(),
            generated.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&a, &b) in reference.iter().zip(generated) {
        let (ha, hb) = (a != null, b != null);
        na += ha as usize;
        nb += hb as usize;
        dot += (ha && hb && a % 12 == b % 12) as usize;
    }
    if na == 0 || nb == 0 {
        return Ok(0.0);
    }
    Ok(dot as f64 / (na as f64 * nb as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub chord_iou: f64,
    pub beat_f1: f64,
    pub melody_sim: f64,
}

/// Decodes controls from a generated latent and scores them against the
/// conditioning controls (at the latent rate).
pub fn eval_generation(world: &World, latent: &LatentSeq, controls: &ControlSet) -> Result<MetricRecord> {
    let got = world.decode_controls(latent)?;
    if got.len() != controls.len() {
        return Err(Error::Shape(format!(
            "generation has {} frames, controls {}",
            got.len(),
            controls.len()
        )));
    }
    let rate = world.spec().frame_rate;
    Ok(MetricRecord {
        chord_iou: chord_iou(
            &LabelSegments::from_frames(&controls.chords.ids, rate),
            &LabelSegments::from_frames(&got.chords.ids, rate),
        )?,
        beat_f1: beat_f1(
            &beat_times(&controls.beats.ids, rate),
            &beat_times(&got.beats.ids, rate),
            BEAT_TOLERANCE,
        ),
        melody_sim: melody_similarity(&controls.melody.ids, &got.melody.ids, world.spec().melody_null())?,
    })
}

pub const METRICS_HEADER: &str = "sample_id,chord_iou,beat_f1,melody_sim";

pub fn write_metrics(path: impl AsRef<Path>, rows: &[(String, MetricRecord)]) -> Result<()> {
    let path = path.as_ref();
    let mut s = format!("{METRICS_HEADER}\n");
    for (id, m) in rows {
        s.push_str(&format!("{id},{:.6},{:.6},{:.6}\n", m.chord_iou, m.beat_f1, m.melody_sim));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(s.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Column means.
pub fn mean_record(rows: &[MetricRecord]) -> MetricRecord {
    let n = rows.len().max(1) as f64;
    MetricRecord {
        chord_iou: rows.iter().map(|r| r.chord_iou).sum::<f64>() / n,
        beat_f1: rows.iter().map(|r| r.beat_f1).sum::<f64>() / n,
        melody_sim: rows.iter().map(|r| r.melody_sim).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_ninety_percent() {
        let r = LabelSegments::new(vec![(0, 0.0, 4.0), (7, 4.0, 10.0)]).unwrap();
        let g = LabelSegments::new(vec![(0, 0.0, 5.0), (7, 5.0, 10.0)]).unwrap();
        assert!((chord_iou(&r, &g).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(chord_iou(&r, &r).unwrap(), 1.0);
        let d = LabelSegments::new(vec![(1, 0.0, 10.0)]).unwrap();
        assert_eq!(chord_iou(&r, &d).unwrap(), 0.0);
        let short = LabelSegments::new(vec![(0, 0.0, 9.0)]).unwrap();
        assert!(chord_iou(&r, &short).is_err());
    }

    #[test]
    fn segments_must_be_contiguous() {
        assert!(LabelSegments::new(vec![(0, 0.0, 1.0), (1, 1.5, 2.0)]).is_err());
        assert!(LabelSegments::new(vec![(0, 0.5, 1.0)]).is_err());
    }

    #[test]
    fn beat_f1_two_thirds() {
        let f = beat_f1(&[1.0, 2.0, 3.0], &[1.02, 2.06, 3.01], 0.05);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(beat_f1(&[1.0, 2.0], &[1.0, 2.0], 0.05), 1.0);
        assert_eq!(beat_f1(&[1.0], &[], 0.05), 0.0);
        assert_eq!(beat_f1(&[], &[], 0.05), 1.0);
    }

    #[test]
    fn beat_tolerance_inclusive() {
        assert_eq!(beat_f1(&[1.0], &[1.05], 0.05), 1.0);
    }

    #[test]
    fn melody_cases() {
        let a = [0, 1, 2, 3];
        assert_eq!(melody_similarity(&a, &a, 16).unwrap(), 1.0);
        assert_eq!(melody_similarity(&a, &[4, 5, 6, 7], 16).unwrap(), 0.0);
        assert!((melody_similarity(&a, &[0, 1, 6, 7], 16).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(melody_similarity(&[16, 16], &[16, 16], 16).unwrap(), 0.0);
        assert_eq!(melody_similarity(&[0, 16], &[12, 16], 16).unwrap(), 1.0);
        assert!(melody_similarity(&a, &a[..3], 16).is_err());
    }
}
