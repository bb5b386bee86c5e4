//! On-disk dataset: one latent and one token tensor per sample plus a
//! tab-separated index and the world parameters as JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{LatentSeq, WorldSample, WorldSpec};
use crate::cond::{ControlSet, ControlStream};
use crate::delay::TokenGrid;
use crate::error::{Error, Result};
use crate::num::{load_tensor, save_tensor};

pub const INDEX_FILE: &str = "index.tsv";
pub const WORLD_FILE: &str = "world.json";
const HEADER: &str = "#id\tlatent\ttokens\tcaption\tchords\tmelody\tdrums\tbeats";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub sample: WorldSample,
}

fn ints(v: &[u32]) -> String {
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x}").unwrap();
    }
    s
}

fn parse_ints(field: &str, path: &Path, line: usize) -> Result<Vec<u32>> {
    field
        .split_ascii_whitespace()
        .map(|t| {
            t.parse::<u32>().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {line}: bad integer {t:?}"),
            })
        })
        .collect()
}

pub fn write_dataset(dir: impl AsRef<Path>, spec: &WorldSpec, entries: &[ManifestEntry]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let world_path = dir.join(WORLD_FILE);
    let json = serde_json::to_string_pretty(spec).expect("world spec serializes");
    fs::write(&world_path, json).map_err(|e| Error::io(&world_path, e))?;
    let mut index = String::from(HEADER);
    index.push('\n');
    for e in entries {
        if e.id.is_empty() || e.id.contains(['\t', '\n', '/']) {
            return Err(Error::Invalid(format!("bad sample id {:?}", e.id)));
        }
        let latent = format!("{}.latent.pft", e.id);
        let tokens = format!("{}.tokens.pft", e.id);
        save_tensor(&e.sample.latent.to_tensor(), dir.join(&latent))?;
        save_tensor(&e.sample.tokens.to_tensor(), dir.join(&tokens))?;
        let c = &e.sample.controls;
        writeln!(
            index,
            "{}\t{latent}\t{tokens}\t{}\t{}\t{}\t{}\t{}",
            e.id,
            ints(&e.sample.caption),
            ints(&c.chords.ids),
            ints(&c.melody.ids),
            ints(&c.drums.ids),
            ints(&c.beats.ids)
        )
        .unwrap();
    }
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(WorldSpec, Vec<ManifestEntry>)> {
    let dir = dir.as_ref();
    let world_path = dir.join(WORLD_FILE);
    let text = fs::read_to_string(&world_path).map_err(|e| Error::io(&world_path, e))?;
    let spec: WorldSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: world_path.clone(),
        reason: e.to_string(),
    })?;
    spec.validate()?;
    let index_path = dir.join(INDEX_FILE);
    let index = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let card = spec.codebook_size as u32;
    let rate = spec.frame_rate;
    let mut out = Vec::new();
    for (n, line) in index.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(Error::Format {
                path: index_path,
                reason: format!("line {}: expected 8 fields, got {}", n + 1, fields.len()),
            });
        }
        let latent = LatentSeq::from_tensor(&load_tensor(dir.join(fields[1]))?)?;
        let tokens = TokenGrid::from_tensor(&load_tensor(dir.join(fields[2]))?, card)?;
        let col = |i: usize| parse_ints(fields[i], &index_path, n + 1);
        let controls = ControlSet {
            chords: ControlStream::new(col(4)?, rate),
            melody: ControlStream::new(col(5)?, rate),
            drums: ControlStream::new(col(6)?, rate),
            beats: ControlStream::new(col(7)?, rate),
        };
        if latent.len() != tokens.len() || controls.len() != latent.len() {
            return Err(Error::Format {
                path: index_path,
                reason: format!("line {}: latent, tokens and controls disagree on length", n + 1),
            });
        }
        controls.check_vocab(&spec.cond_vocab())?;
        let duration = latent.len() as f64 / rate;
        out.push(ManifestEntry {
            id: fields[0].to_string(),
            sample: WorldSample {
                caption: col(3)?,
                controls,
                latent,
                tokens,
                duration,
            },
        });
    }
    Ok((spec, out))
}
