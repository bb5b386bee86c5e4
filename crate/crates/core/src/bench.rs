//! Throughput and latency measurement against batch size and step count.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchPlan {
    pub batch_sizes: Vec<usize>,
    pub fm_step_counts: Vec<usize>,
    pub warmup_iters: usize,
    pub measured_iters: usize,
    /// Length of each generated sample.
    pub seconds: f64,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1, 2, 4, 8, 16, 32],
            fm_step_counts: vec![10, 25, 50, 200],
            warmup_iters: 3,
            measured_iters: 10,
            seconds: 10.0,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("bench: {m}")));
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return bad("batch sizes must be non-empty and positive");
        }
        if self.batch_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("batch sizes must be strictly ascending");
        }
        if self.fm_step_counts.contains(&0) {
            return bad("step counts must be positive");
        }
        if self.measured_iters == 0 {
            return bad("measured_iters must be positive");
        }
        if !(self.seconds > 0.0) {
            return bad("seconds must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub paradigm: String,
    pub batch: usize,
    /// Solver steps, flow models only.
    pub steps: Option<usize>,
    /// Median wall time of one batch.
    pub wall_s: f64,
    pub samples_per_s: f64,
    pub s_per_sample: f64,
    /// Backbone evaluations per sample.
    pub model_evals: usize,
}

impl BenchRow {
    fn new(paradigm: &str, batch: usize, steps: Option<usize>, wall_s: f64, model_evals: usize) -> Self {
        Self {
            paradigm: paradigm.to_string(),
            batch,
            steps,
            wall_s,
            samples_per_s: batch as f64 / wall_s,
            s_per_sample: wall_s / batch as f64,
            model_evals,
        }
    }

    pub fn failed(&self) -> bool {
        self.wall_s.is_nan()
    }
}

/// Median; the upper middle for even counts.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Runs `f` for warmup plus measured iterations; returns the median
/// measured wall time, or NaN if any call failed or panicked.
pub fn time_median(warmup: usize, iters: usize, f: &mut dyn FnMut() -> Result<()>) -> f64 {
    let mut run = || matches!(catch_unwind(AssertUnwindSafe(&mut *f)), Ok(Ok(())));
    for _ in 0..warmup {
        if !run() {
            return f64::NAN;
        }
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        if !run() {
            return f64::NAN;
        }
        times.push(t.elapsed().as_secs_f64());
    }
    median(&times)
}

/// Evaluations per sample of cached token decoding under guidance.
pub fn ar_evals(frames: usize, n_books: usize) -> usize {
    2 * (frames + n_books - 1)
}

/// Evaluations per sample of guided fixed-step flow sampling.
pub fn fm_evals(steps: usize) -> usize {
    2 * steps
}

/// Generators under test: `ar(batch)` and `fm(batch, steps)` each produce
/// one batch.
pub struct Generators<'a> {
    pub ar: Option<(&'a mut dyn FnMut(usize) -> Result<()>, usize)>,
    pub fm: Option<&'a mut dyn FnMut(usize, usize) -> Result<()>>,
}

/// Measures every configuration of the plan. A failing configuration yields
/// a row with NaN timings and the sweep continues. The `usize` beside the
/// token generator is its evaluation count per sample.
pub fn run_bench(plan: &BenchPlan, gens: Generators<'_>) -> Result<Vec<BenchRow>> {
    plan.validate()?;
    let mut rows = Vec::new();
    if let Some((ar, evals)) = gens.ar {
        for &b in &plan.batch_sizes {
            let wall = time_median(plan.warmup_iters, plan.measured_iters, &mut || ar(b));
            rows.push(BenchRow::new("ar", b, None, wall, evals));
        }
    }
    if let Some(fm) = gens.fm {
        for &steps in &plan.fm_step_counts {
            for &b in &plan.batch_sizes {
                let wall = time_median(plan.warmup_iters, plan.measured_iters, &mut || fm(b, steps));
                rows.push(BenchRow::new("fm", b, Some(steps), wall, fm_evals(steps)));
            }
        }
    }
    Ok(rows)
}

pub const BENCH_HEADER: &str = "paradigm,batch,steps,wall_s,samples_per_s,s_per_sample,model_evals";

fn fmt_f(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:e}")
    }
}

pub fn report(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Invalid("no benchmark rows to report".into()));
    }
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.paradigm,
            r.batch,
            r.steps.map(|v| v.to_string()).unwrap_or_default(),
            fmt_f(r.wall_s),
            fmt_f(r.samples_per_s),
            fmt_f(r.s_per_sample),
            r.model_evals
        ));
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<BenchRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, m: String| Error::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {m}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some(BENCH_HEADER) {
        return Err(bad(1, "unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(i + 2, format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 2, format!("{s:?}: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(i + 2, format!("{s:?}: {e}")));
        rows.push(BenchRow {
            paradigm: f[0].to_string(),
            batch: int(f[1])?,
            steps: if f[2].is_empty() { None } else { Some(int(f[2])?) },
            wall_s: num(f[3])?,
            samples_per_s: num(f[4])?,
            s_per_sample: num(f[5])?,
            model_evals: int(f[6])?,
        });
    }
    Ok(rows)
}

/// Gnuplot data: one indexed block per (paradigm, steps) curve with columns
/// batch, samples/s, s/sample.
pub fn write_gnuplot(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    let mut keys: Vec<(String, Option<usize>)> = Vec::new();
    for r in rows {
        let k = (r.paradigm.clone(), r.steps);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut s = String::new();
    for (p, steps) in keys {
        let label = match steps {
            Some(n) => format!("{p} {n} steps"),
            None => p.clone(),
        };
        s.push_str(&format!("# {label}\n# batch samples_per_s s_per_sample\n"));
        for r in rows.iter().filter(|r| r.paradigm == p && r.steps == steps) {
            s.push_str(&format!("{} {} {}\n", r.batch, fmt_f(r.samples_per_s), fmt_f(r.s_per_sample)));
        }
        s.push_str("\n\n");
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
