use serde::{Deserialize, Serialize};

use crate::cond::{CondVocab, N_STREAMS};
use crate::delay::special;
use crate::error::{Error, Result};

/// Width of the sinusoidal timestep features.
pub const TIME_FEATURES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Token input, lower-triangular attention, per-codebook logits.
    Causal,
    /// Latent input plus timestep, full attention, U-Net skips, latent output.
    Bidirectional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub mode: Mode,
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    /// Token streams (causal mode).
    pub n_books: usize,
    /// Codebook size excluding reserved ids (causal mode).
    pub card: usize,
    /// Latent channels (bidirectional mode).
    pub input_dim: usize,
    pub cond_vocab: CondVocab,
    /// Embedding width of each condition stream.
    pub cond_dim: usize,
    pub caption_vocab: usize,
    pub max_len: usize,
    /// Restricts self-attention to keys within this many positions.
    #[serde(default)]
    pub attn_window: Option<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Causal,
            n_blocks: 4,
            model_dim: 128,
            n_heads: 4,
            ff_dim: 512,
            n_books: 4,
            card: 32,
            input_dim: 8,
            cond_vocab: CondVocab {
                chord: 12,
                melody: 17,
                drum: 32,
            },
            cond_dim: 16,
            caption_vocab: 64,
            max_len: 1024,
            attn_window: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("backbone: {m}")));
        if self.n_blocks == 0 || self.n_blocks % 2 != 0 {
            return bad("n_blocks must be even and positive");
        }
        if self.model_dim == 0 || self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return bad("model_dim must be a positive multiple of n_heads");
        }
        if self.ff_dim == 0 || self.cond_dim == 0 || self.caption_vocab == 0 || self.max_len == 0 {
            return bad("ff_dim, cond_dim, caption_vocab and max_len must be positive");
        }
        match self.mode {
            Mode::Causal if self.n_books == 0 || self.card == 0 => bad("causal mode needs n_books and card"),
            Mode::Bidirectional if self.input_dim == 0 => bad("bidirectional mode needs input_dim"),
            _ => Ok(()),
        }
    }

    pub fn causal(&self) -> bool {
        self.mode == Mode::Causal
    }

    /// Ids per codebook in the input embedding: codes plus reserved ids.
    pub fn token_vocab(&self) -> usize {
        self.card + special::COUNT as usize
    }

    /// Logits per codebook: codes plus end-of-sequence.
    pub fn book_logits(&self) -> usize {
        self.card + 1
    }

    pub fn output_dim(&self) -> usize {
        match self.mode {
            Mode::Causal => self.n_books * self.book_logits(),
            Mode::Bidirectional => self.input_dim,
        }
    }

    fn input_width(&self) -> usize {
        let x = match self.mode {
            Mode::Causal => self.model_dim,
            Mode::Bidirectional => self.input_dim,
        };
        x + N_STREAMS * self.cond_dim
    }

    /// Block (1-based) whose input gets concatenated with an earlier output,
    /// and the index of that output (0 is the input embedding).
    pub fn skip_source(&self, block: usize) -> Option<usize> {
        let n = self.n_blocks / 2;
        (self.mode == Mode::Bidirectional && block > n).then(|| self.n_blocks - block)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `scale * sqrt(2 / (fan_in + fan_out))`.
    Weight { fan_in: usize, fan_out: usize, scale: f64 },
    Embedding { std: f64 },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub decay: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIds {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIds {
    pub skip: Option<LinearIds>,
    pub ln1: NormIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub ln2: NormIds,
    pub cq: LinearIds,
    pub ck: LinearIds,
    pub cv: LinearIds,
    pub co: LinearIds,
    pub ln3: NormIds,
    pub ff1: LinearIds,
    pub ff2: LinearIds,
}

/// Parameter indices; the order of `specs` is the storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub tok_emb: Vec<usize>,
    pub cond_emb: [usize; N_STREAMS],
    pub caption_emb: usize,
    pub input: LinearIds,
    pub pos: usize,
    pub time: Option<LinearIds>,
    pub blocks: Vec<BlockIds>,
    pub ln_f: NormIds,
    pub head: LinearIds,
}

struct Builder {
    specs: Vec<ParamSpec>,
    residual_scale: f64,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init, decay: bool) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            init,
            decay,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, scale: f64) -> LinearIds {
        LinearIds {
            w: self.push(
                format!("{name}.w"),
                vec![fan_in, fan_out],
                Init::Weight { fan_in, fan_out, scale },
                true,
            ),
            b: self.push(format!("{name}.b"), vec![fan_out], Init::Zeros, false),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds {
            g: self.push(format!("{name}.g"), vec![d], Init::Ones, false),
            b: self.push(format!("{name}.b"), vec![d], Init::Zeros, false),
        }
    }
}

impl Layout {
    pub fn new(c: &BackboneConfig) -> Self {
        let d = c.model_dim;
        let mut b = Builder {
            specs: Vec::new(),
            residual_scale: 1.0 / (2.0 * c.n_blocks as f64).sqrt(),
        };
        let tok_emb = match c.mode {
            Mode::Causal => (0..c.n_books)
                .map(|k| {
                    b.push(
                        format!("tok{k}.emb"),
                        vec![c.token_vocab(), d],
                        Init::Embedding { std: 1.0 },
                        false,
                    )
                })
                .collect(),
            Mode::Bidirectional => Vec::new(),
        };
        let sizes = c.cond_vocab.sizes();
        let names = crate::cond::STREAM_NAMES;
        let cond_emb = std::array::from_fn(|s| {
            b.push(
                format!("cond.{}.emb", names[s]),
                vec![sizes[s] + 1, c.cond_dim],
                Init::Embedding { std: 1.0 },
                false,
            )
        });
        let caption_emb = b.push(
            "caption.emb".into(),
            vec![c.caption_vocab, d],
            Init::Embedding { std: 1.0 },
            false,
        );
        let input = b.linear("input", c.input_width(), d, 1.0);
        let pos = b.push("pos.emb".into(), vec![c.max_len, d], Init::Embedding { std: 0.1 }, false);
        let time = (c.mode == Mode::Bidirectional).then(|| b.linear("time", TIME_FEATURES, d, 1.0));
        let rs = b.residual_scale;
        let blocks = (1..=c.n_blocks)
            .map(|i| {
                let p = format!("blk{i}");
                BlockIds {
                    skip: c.skip_source(i).map(|_| b.linear(&format!("{p}.skip"), 2 * d, d, 1.0)),
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    q: b.linear(&format!("{p}.attn.q"), d, d, 1.0),
                    k: b.linear(&format!("{p}.attn.k"), d, d, 1.0),
                    v: b.linear(&format!("{p}.attn.v"), d, d, 1.0),
                    o: b.linear(&format!("{p}.attn.o"), d, d, rs),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    cq: b.linear(&format!("{p}.cross.q"), d, d, 1.0),
                    ck: b.linear(&format!("{p}.cross.k"), d, d, 1.0),
                    cv: b.linear(&format!("{p}.cross.v"), d, d, 1.0),
                    co: b.linear(&format!("{p}.cross.o"), d, d, rs),
                    ln3: b.norm(&format!("{p}.ln3"), d),
                    ff1: b.linear(&format!("{p}.ff.1"), d, c.ff_dim, 1.0),
                    ff2: b.linear(&format!("{p}.ff.2"), c.ff_dim, d, rs),
                }
            })
            .collect();
        let ln_f = b.norm("ln_f", d);
        let head = b.linear("head", d, c.output_dim(), 0.1);
        Layout {
            specs: b.specs,
            tok_emb,
            cond_emb,
            caption_emb,
            input,
            pos,
            time,
            blocks,
            ln_f,
            head,
        }
    }

    pub fn n_params(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skip_pairing() {
        let c = BackboneConfig {
            mode: Mode::Bidirectional,
            n_blocks: 6,
            ..Default::default()
        };
        let got: Vec<_> = (1..=6).map(|i| c.skip_source(i)).collect();
        assert_eq!(got, vec![None, None, None, Some(2), Some(1), Some(0)]);
        let c = BackboneConfig::default();
        assert!((1..=4).all(|i| c.skip_source(i).is_none()));
    }

    #[test]
    fn validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let odd = BackboneConfig {
            n_blocks: 3,
            ..Default::default()
        };
        assert!(odd.validate().is_err());
        let heads = BackboneConfig {
            n_heads: 3,
            ..Default::default()
        };
        assert!(heads.validate().is_err());
    }

    #[test]
    fn topology_is_stable() {
        let c = BackboneConfig::default();
        let a = Layout::new(&c);
        assert_eq!(a, Layout::new(&c));
        let names: std::collections::HashSet<_> = a.specs.iter().map(|s| &s.name).collect();
        assert_eq!(names.len(), a.specs.len());
        assert!(names.contains(&"blk1.attn.q.w".to_string()));
        let d = 128;
        let per_block = 8 * (d * d + d) + 3 * 2 * d + (d * 512 + 512) + (512 * d + d);
        let emb = 4 * 38 * d + 13 * 16 + 18 * 16 + 33 * 16 + 64 * d;
        let rest = (d + 48) * d + d + 1024 * d + 2 * d + d * 132 + 132;
        assert_eq!(a.n_params(), 4 * per_block + emb + rest);
    }
}
