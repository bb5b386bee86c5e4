mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use arfm::ar::{self, ArSamplerConfig};
use arfm::backbone::{load_checkpoint, save_checkpoint, Backbone};
use arfm::bench::{self, ar_evals, BenchPlan, Generators};
use arfm::fm::{write_trace, Solver};
use arfm::gen::{fm_generate, fm_sup_inpaint, fm_zs_inpaint, Request};
use arfm::metrics::{eval_generation, mean_record, write_metrics, MetricRecord};
use arfm::num::{save_tensor, SeededRng};
use arfm::train::{Paradigm, TrainConfig, Trainer};
use arfm::world::{norm_stats_of, read_dataset, write_dataset, ManifestEntry, NormStats, World, WorldSample, WorldSpec};

use config::{InpaintMethod, RunConfig};

/// Random stream ids under the run seed.
mod stream {
    pub const DATA: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const INPAINT: u64 = 4;
    pub const INIT: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const GENERATE: u64 = 7;
}

#[derive(Parser)]
#[command(name = "arfm", version, about = "Token and flow generation on a synthetic latent world")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set fm.n_steps=25`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the effective configuration as TOML.
    PrintConfig,
    /// Write a dataset of world samples.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Train a model on a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        paradigm: Paradigm,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Start from this checkpoint's weights.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Fraction of examples in inpainting format.
        #[arg(long)]
        inpaint_prob: Option<f64>,
    },
    /// Generate samples conditioned on held-out world controls.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Must match the checkpoint when given.
        #[arg(long)]
        paradigm: Option<Paradigm>,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        seconds: Option<f64>,
        /// Ignore controls and caption.
        #[arg(long)]
        unconditional: bool,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Regenerate a masked span of held-out samples.
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<InpaintMethod>,
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Score conditioned generations against their controls.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Metrics CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Measure throughput and latency against batch size.
    Bench {
        #[arg(long)]
        ar_ckpt: Option<PathBuf>,
        #[arg(long)]
        fm_ckpt: Option<PathBuf>,
        /// Results CSV.
        #[arg(long)]
        out: PathBuf,
        /// Optional gnuplot data file.
        #[arg(long)]
        dat: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        fm_steps: Option<Vec<usize>>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Evaluate over a grid of values for one config key.
    Sweep {
        /// Dotted config key, e.g. `ar.cfg_coef` or `train.batch_size`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Aggregated CSV.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint for sampler keys.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Dataset for `train.*` and `model.*` keys.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        paradigm: Option<Paradigm>,
    },
}

#[derive(Args, Default, Clone)]
struct SamplerArgs {
    #[arg(long, value_parser = parse_solver)]
    solver: Option<Solver>,
    /// Euler steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
}

impl SamplerArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.solver {
            cfg.fm.solver = s;
        }
        if let Some(n) = self.steps {
            cfg.fm.n_steps = n;
        }
        if let Some(a) = self.cfg {
            cfg.fm.cfg_coef = a;
            cfg.ar.cfg_coef = a;
        }
        if let Some(t) = self.temperature {
            cfg.ar.temperature = t;
        }
        if self.top_k.is_some() {
            cfg.ar.top_k = self.top_k;
        }
        if self.top_p.is_some() {
            cfg.ar.top_p = self.top_p;
        }
        cfg.validate()
    }
}

impl std::str::FromStr for InpaintMethod {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zs" => Ok(InpaintMethod::Zs),
            "sup" => Ok(InpaintMethod::Sup),
            "fim" => Ok(InpaintMethod::Fim),
            _ => bail!("unknown inpainting method {s:?}, expected zs, sup or fim"),
        }
    }
}

fn parse_solver(s: &str) -> Result<Solver> {
    match s {
        "euler" => Ok(Solver::Euler),
        "dopri5" => Ok(Solver::Dopri5),
        _ => bail!("unknown solver {s:?}, expected euler or dopri5"),
    }
}

/// Stored beside the weights of every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    paradigm: Paradigm,
    world: WorldSpec,
    norm: NormStats,
    train: TrainConfig,
    seed: u64,
    steps: usize,
    final_loss: f64,
}

struct Loaded {
    model: Backbone<f32>,
    meta: Meta,
    world: World,
}

fn load(dir: &Path) -> Result<Loaded> {
    let (model, meta) = load_checkpoint(dir)?;
    let meta: Meta = serde_json::from_value(meta).with_context(|| format!("{}: checkpoint metadata", dir.display()))?;
    let world = World::new(meta.world.clone())?;
    Ok(Loaded { model, meta, world })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let c = cause.to_string();
        if !msg.contains(&c) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&c);
        }
    }
    msg.replace('\n', " ")
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.cmd {
        Cmd::PrintConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Cmd::GenData { out, n, seconds } => {
            if let Some(n) = n {
                cfg.data.n_samples = n;
            }
            if let Some(s) = seconds {
                cfg.data.seconds = s;
            }
            cfg.validate()?;
            gen_data(&cfg, &out)
        }
        Cmd::Train {
            paradigm,
            data,
            out,
            steps,
            init,
            inpaint_prob,
        } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(p) = inpaint_prob {
                cfg.train.inpaint_prob = p;
            }
            cfg.validate()?;
            let (meta, _) = train(&cfg, paradigm, &data, &out, init.as_deref())?;
            println!(
                "trained {} for {} steps, final loss {:.4}",
                paradigm.name(),
                meta.steps,
                meta.final_loss
            );
            Ok(())
        }
        Cmd::Sample {
            ckpt,
            out,
            paradigm,
            n,
            seconds,
            unconditional,
            sampler,
        } => {
            sampler.apply(&mut cfg)?;
            let l = load(&ckpt)?;
            if let Some(p) = paradigm {
                if p != l.meta.paradigm {
                    bail!("{} holds a {} model, not {}", ckpt.display(), l.meta.paradigm.name(), p.name());
                }
            }
            sample(&cfg, &l, &out, n, seconds.unwrap_or(cfg.eval.seconds), unconditional)
        }
        Cmd::Inpaint {
            ckpt,
            out,
            method,
            n,
            sampler,
        } => {
            sampler.apply(&mut cfg)?;
            if let Some(m) = method {
                cfg.inpaint.method = m;
            }
            if let Some(n) = n {
                cfg.inpaint.n_samples = n;
            }
            cfg.validate()?;
            inpaint(&cfg, &load(&ckpt)?, &out)
        }
        Cmd::Eval { ckpt, out, n, sampler } => {
            sampler.apply(&mut cfg)?;
            if let Some(n) = n {
                cfg.eval.n_samples = n;
            }
            cfg.validate()?;
            let l = load(&ckpt)?;
            let recs = evaluate(&cfg, &l)?;
            let rows: Vec<(String, MetricRecord)> = recs.iter().enumerate().map(|(i, r)| (i.to_string(), *r)).collect();
            write_metrics(&out, &rows)?;
            let m = mean_record(&recs);
            println!(
                "{} samples: chord_iou {:.4} beat_f1 {:.4} melody_sim {:.4}",
                recs.len(),
                m.chord_iou,
                m.beat_f1,
                m.melody_sim
            );
            Ok(())
        }
        Cmd::Bench {
            ar_ckpt,
            fm_ckpt,
            out,
            dat,
            batch_sizes,
            fm_steps,
            warmup,
            iters,
            seconds,
        } => {
            let p = &mut cfg.bench;
            if let Some(v) = batch_sizes {
                p.batch_sizes = v;
            }
            if let Some(v) = fm_steps {
                p.fm_step_counts = v;
            }
            if let Some(v) = warmup {
                p.warmup_iters = v;
            }
            if let Some(v) = iters {
                p.measured_iters = v;
            }
            if let Some(v) = seconds {
                p.seconds = v;
            }
            cfg.validate()?;
            if ar_ckpt.is_none() && fm_ckpt.is_none() {
                bail!("bench needs --ar-ckpt, --fm-ckpt or both");
            }
            let ar = ar_ckpt.as_deref().map(load).transpose()?;
            let fm = fm_ckpt.as_deref().map(load).transpose()?;
            let rows = run_bench(&cfg, ar.as_ref(), fm.as_ref())?;
            bench::report(&rows, &out)?;
            if let Some(d) = dat {
                bench::write_gnuplot(&rows, d)?;
            }
            println!("{} rows written to {}", rows.len(), out.display());
            Ok(())
        }
        Cmd::Sweep {
            param,
            values,
            out,
            ckpt,
            data,
            paradigm,
        } => sweep(&cfg, &param, &values, &out, ckpt.as_deref(), data.as_deref(), paradigm),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let world = World::new(cfg.world.clone())?;
    let root = SeededRng::with_stream(cfg.seed, stream::DATA);
    let entries: Vec<ManifestEntry> = (0..cfg.data.n_samples)
        .map(|i| {
            Ok(ManifestEntry {
                id: format!("{i:05}"),
                sample: world.gen_sample(&mut root.substream(i as u64), cfg.data.seconds)?,
            })
        })
        .collect::<Result<_>>()?;
    write_dataset(out, &cfg.world, &entries)?;
    println!("{} samples written to {}", entries.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, paradigm: Paradigm, data: &Path, out: &Path, init: Option<&Path>) -> Result<(Meta, Vec<String>)> {
    let (spec, entries) = read_dataset(data)?;
    if entries.is_empty() {
        bail!("{}: dataset is empty", data.display());
    }
    let samples: Vec<WorldSample> = entries.into_iter().map(|e| e.sample).collect();
    let latents: Vec<_> = samples.iter().map(|s| s.latent.clone()).collect();
    let norm = norm_stats_of(&latents)?;
    let world_cfg = RunConfig {
        world: spec.clone(),
        ..cfg.clone()
    };
    let model = match init {
        Some(dir) => {
            let l = load(dir)?;
            if l.meta.paradigm != paradigm {
                bail!("{} holds a {} model", dir.display(), l.meta.paradigm.name());
            }
            if l.meta.world != spec {
                bail!("{} was trained on a different world", dir.display());
            }
            l.model
        }
        None => Backbone::new(
            world_cfg.backbone(paradigm),
            &mut SeededRng::with_stream(cfg.seed, stream::INIT),
        )?,
    };
    let mut trainer = Trainer::new(
        paradigm,
        model,
        cfg.train.clone(),
        norm,
        spec.frame_rate,
        SeededRng::with_stream(cfg.seed, stream::TRAIN),
    )?;
    let mut log = vec!["step,loss,lr,grad_norm".to_string()];
    let mut last = f64::NAN;
    for step in 0..cfg.train.steps {
        let idx = trainer.draw_batch(samples.len());
        let batch: Vec<&WorldSample> = idx.iter().map(|&i| &samples[i]).collect();
        let st = trainer.train_step(&batch)?;
        last = st.loss;
        log.push(format!("{step},{:.6},{:.6e},{:.6}", st.loss, st.lr, st.grad_norm));
    }
    let meta = Meta {
        paradigm,
        world: spec,
        norm,
        train: cfg.train.clone(),
        seed: cfg.seed,
        steps: cfg.train.steps,
        final_loss: last,
    };
    save_checkpoint(out, &trainer.model, &serde_json::to_value(&meta)?)?;
    let log_path = out.join("loss.csv");
    std::fs::write(&log_path, log.join("\n") + "\n").with_context(|| log_path.display().to_string())?;
    Ok((meta, log))
}

/// Held-out world samples for conditioning; sample `i` is a pure function of
/// (seed, stream, i).
fn prompts(world: &World, seed: u64, stream_id: u64, n: usize, seconds: f64) -> Result<Vec<WorldSample>> {
    let root = SeededRng::with_stream(seed, stream_id);
    (0..n)
        .map(|i| Ok(world.gen_sample(&mut root.substream(i as u64), seconds)?))
        .collect()
}

fn ar_config(cfg: &RunConfig, world: &World, seconds: f64) -> ArSamplerConfig {
    ArSamplerConfig {
        max_frames: world.spec().frames(seconds),
        ..cfg.ar.clone()
    }
}

/// Conditioned generations for `samples`, as latents.
fn generate(cfg: &RunConfig, l: &Loaded, samples: &[WorldSample], unconditional: bool, seconds: f64) -> Result<GenOut> {
    let reqs: Vec<Request> = samples
        .iter()
        .map(|s| {
            if unconditional {
                Request {
                    caption: &[],
                    controls: None,
                }
            } else {
                Request {
                    caption: &s.caption,
                    controls: Some(&s.controls),
                }
            }
        })
        .collect();
    let rng = SeededRng::with_stream(cfg.seed, stream::GENERATE);
    let len = l.world.spec().frames(seconds);
    match l.meta.paradigm {
        Paradigm::Ar => {
            let ac = ar_config(cfg, &l.world, seconds);
            let rq: Vec<(&[u32], Option<&arfm::cond::ControlSet>)> = reqs.iter().map(|r| (r.caption, r.controls)).collect();
            let tokens = ar::sample(&l.model, &rq, &ac, &rng)?;
            let latents = tokens
                .iter()
                .map(|g| Ok(l.world.codec().detokenize(g)?))
                .collect::<Result<_>>()?;
            Ok(GenOut {
                latents,
                tokens,
                traces: Vec::new(),
            })
        }
        Paradigm::Fm => {
            let o = fm_generate(&l.model, &l.meta.norm, &reqs, len, &cfg.fm, &rng)?;
            Ok(GenOut {
                latents: o.latents,
                tokens: Vec::new(),
                traces: o.traces,
            })
        }
    }
}

struct GenOut {
    latents: Vec<arfm::world::LatentSeq>,
    tokens: Vec<arfm::delay::TokenGrid>,
    traces: Vec<Vec<arfm::fm::TraceRow>>,
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| p.display().to_string())
}

fn sample(cfg: &RunConfig, l: &Loaded, out: &Path, n: usize, seconds: f64, unconditional: bool) -> Result<()> {
    if n == 0 {
        bail!("--n must be positive");
    }
    create_dir(out)?;
    let samples = prompts(&l.world, cfg.seed, stream::SAMPLE, n, seconds)?;
    let g = generate(cfg, l, &samples, unconditional, seconds)?;
    for (i, z) in g.latents.iter().enumerate() {
        save_tensor(&z.to_tensor(), out.join(format!("sample_{i}.latent.pft")))?;
    }
    for (i, t) in g.tokens.iter().enumerate() {
        save_tensor(&t.to_tensor(), out.join(format!("sample_{i}.tokens.pft")))?;
    }
    for (i, t) in g.traces.iter().enumerate() {
        write_trace(out.join(format!("trace_{i}.csv")), t)?;
    }
    println!("{n} {} samples written to {}", l.meta.paradigm.name(), out.display());
    Ok(())
}

fn inpaint(cfg: &RunConfig, l: &Loaded, out: &Path) -> Result<()> {
    let ic = &cfg.inpaint;
    let want = match ic.method {
        InpaintMethod::Fim => Paradigm::Ar,
        InpaintMethod::Zs | InpaintMethod::Sup => Paradigm::Fm,
    };
    if l.meta.paradigm != want {
        bail!("{} inpainting needs a {} checkpoint", ic.method.name(), want.name());
    }
    create_dir(out)?;
    let samples = prompts(&l.world, cfg.seed, stream::INPAINT, ic.n_samples, ic.seconds)?;
    let root = SeededRng::with_stream(cfg.seed, stream::GENERATE);
    let rate = l.world.spec().frame_rate;
    let mut spans = vec!["id,start,end".to_string()];
    for (i, s) in samples.iter().enumerate() {
        let mut rng = root.substream(i as u64);
        let (a, b) = ic.mask.draw(s.latent.len(), rate, &mut rng)?;
        let req = Request {
            caption: &s.caption,
            controls: Some(&s.controls),
        };
        let z = match ic.method {
            InpaintMethod::Zs => fm_zs_inpaint(&l.model, &l.meta.norm, &s.latent, req, a, b, &cfg.fm, &mut rng)?,
            InpaintMethod::Sup => fm_sup_inpaint(&l.model, &l.meta.norm, &s.latent, req, a, b, &cfg.fm, &mut rng)?,
            InpaintMethod::Fim => {
                let ac = ar_config(cfg, &l.world, ic.seconds);
                let t = ar::fim_inpaint(&l.model, &s.tokens, Some(&s.controls), &s.caption, a, b, &ac, &mut rng)?;
                save_tensor(&t.to_tensor(), out.join(format!("inpaint_{i}.tokens.pft")))?;
                l.world.codec().detokenize(&t)?
            }
        };
        save_tensor(&z.to_tensor(), out.join(format!("inpaint_{i}.latent.pft")))?;
        save_tensor(&s.latent.to_tensor(), out.join(format!("source_{i}.latent.pft")))?;
        spans.push(format!("{i},{a},{b}"));
    }
    let p = out.join("spans.csv");
    std::fs::write(&p, spans.join("\n") + "\n").with_context(|| p.display().to_string())?;
    println!("{} inpaintings written to {}", samples.len(), out.display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, l: &Loaded) -> Result<Vec<MetricRecord>> {
    let e = &cfg.eval;
    let samples = prompts(&l.world, cfg.seed, stream::EVAL, e.n_samples, e.seconds)?;
    let g = generate(cfg, l, &samples, false, e.seconds)?;
    g.latents
        .iter()
        .zip(&samples)
        .map(|(z, s)| Ok(eval_generation(&l.world, z, &s.controls)?))
        .collect()
}

fn run_bench(cfg: &RunConfig, ar: Option<&Loaded>, fm: Option<&Loaded>) -> Result<Vec<bench::BenchRow>> {
    let plan: &BenchPlan = &cfg.bench;
    let max_b = *plan.batch_sizes.last().expect("validated");
    let rng = SeededRng::with_stream(cfg.seed, stream::GENERATE);
    let mut ar_fn;
    let mut fm_fn;
    let mut gens = Generators { ar: None, fm: None };
    let ar_data;
    if let Some(l) = ar {
        ar_data = prompts(&l.world, cfg.seed, stream::EVAL, max_b, plan.seconds)?;
        let ac = ar_config(cfg, &l.world, plan.seconds);
        let evals = ar_evals(ac.max_frames, l.model.config.n_books);
        let data = &ar_data;
        let rng = &rng;
        ar_fn = move |b: usize| -> arfm::Result<()> {
            let reqs: Vec<(&[u32], Option<&arfm::cond::ControlSet>)> =
                data[..b].iter().map(|s| (&s.caption[..], Some(&s.controls))).collect();
            ar::sample(&l.model, &reqs, &ac, rng).map(|_| ())
        };
        gens.ar = Some((&mut ar_fn, evals));
    }
    let fm_data;
    if let Some(l) = fm {
        fm_data = prompts(&l.world, cfg.seed, stream::EVAL, max_b, plan.seconds)?;
        let len = l.world.spec().frames(plan.seconds);
        let data = &fm_data;
        let rng = &rng;
        let base = cfg.fm.clone();
        fm_fn = move |b: usize, steps: usize| -> arfm::Result<()> {
            let reqs: Vec<Request> = data[..b]
                .iter()
                .map(|s| Request {
                    caption: &s.caption,
                    controls: Some(&s.controls),
                })
                .collect();
            let fc = arfm::fm::FmSamplerConfig {
                solver: Solver::Euler,
                n_steps: steps,
                ..base.clone()
            };
            fm_generate(&l.model, &l.meta.norm, &reqs, len, &fc, rng).map(|_| ())
        };
        gens.fm = Some(&mut fm_fn);
    }
    Ok(bench::run_bench(plan, gens)?)
}

fn sweep(
    cfg: &RunConfig,
    param: &str,
    values: &[String],
    out: &Path,
    ckpt: Option<&Path>,
    data: Option<&Path>,
    paradigm: Option<Paradigm>,
) -> Result<()> {
    let trains = param.starts_with("train.") || param.starts_with("model.");
    let base = match (trains, ckpt) {
        (false, Some(dir)) => Some(load(dir)?),
        (false, None) => bail!("sweeping {param} needs --ckpt"),
        (true, _) => None,
    };
    let mut rows = vec!["param,value,n,chord_iou,beat_f1,melody_sim".to_string()];
    for (i, v) in values.iter().enumerate() {
        let c = cfg.with_override(param, v)?;
        let recs = if trains {
            let data = data.ok_or_else(|| anyhow!("sweeping {param} needs --data"))?;
            let paradigm = paradigm.ok_or_else(|| anyhow!("sweeping {param} needs --paradigm"))?;
            let dir = PathBuf::from(format!("{}.runs", out.display())).join(format!("{i:02}"));
            train(&c, paradigm, data, &dir, None)?;
            evaluate(&c, &load(&dir)?)?
        } else {
            evaluate(&c, base.as_ref().expect("loaded"))?
        };
        let m = mean_record(&recs);
        rows.push(format!(
            "{param},{v},{},{:.6},{:.6},{:.6}",
            recs.len(),
            m.chord_iou,
            m.beat_f1,
            m.melody_sim
        ));
    }
    std::fs::write(out, rows.join("\n") + "\n").with_context(|| out.display().to_string())?;
    println!("{} sweep rows written to {}", values.len(), out.display());
    Ok(())
}
