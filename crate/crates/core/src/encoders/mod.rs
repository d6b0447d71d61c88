//! State encoders `z = G(s)` over fixed windows of item ids.

mod attention;
mod gru;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Binding, ParamId, ParamSet, Tape, Var};
use crate::data::{StateWindow, WINDOW};
use crate::error::{Error, Result};

pub use attention::AttentionParams;
pub use gru::GruParams;

/// Half-width of the uniform initialization range.
pub const INIT_RANGE: f64 = 0.05;

pub const DEFAULT_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Gru,
    Attention,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Gru => "gru",
            EncoderKind::Attention => "attention",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(EncoderKind::Gru),
            "attention" | "sasrec" => Ok(EncoderKind::Attention),
            other => Err(Error::Config(format!("unknown encoder kind {other:?}"))),
        }
    }
}

/// Uniform `[-INIT_RANGE, INIT_RANGE]` array.
pub fn uniform_array(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect();
    Array::new(shape, data).expect("length matches shape")
}

/// Registers a `[rows, cols]` weight drawn uniformly.
pub(crate) fn add_weight(params: &mut ParamSet, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
    params.add(name, uniform_array(&[rows, cols], rng))
}

pub(crate) fn add_zeros(params: &mut ParamSet, name: String, len: usize) -> ParamId {
    params.add(name, Array::zeros(&[len]))
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Gru(GruParams),
    Attention(AttentionParams),
}

/// Item embedding table plus a sequence body, registered inside a
/// caller-owned [`ParamSet`] under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    kind: EncoderKind,
    dim: usize,
    item_count: u32,
    embedding: ParamId,
    body: Body,
}

impl Encoder {
    pub fn init(
        kind: EncoderKind,
        item_count: u32,
        dim: usize,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if item_count == 0 {
            return Err(Error::Config("encoder needs at least one item".into()));
        }
        if dim == 0 {
            return Err(Error::Config("encoder dimension must be positive".into()));
        }
        let mut table = uniform_array(&[item_count as usize + 1, dim], rng);
        table.data_mut()[..dim].fill(0.0);
        let embedding = params.add(format!("{prefix}.item_embedding"), table);
        let body = match kind {
            EncoderKind::Gru => Body::Gru(GruParams::init(dim, params, prefix, rng)),
            EncoderKind::Attention => Body::Attention(AttentionParams::init(dim, params, prefix, rng)),
        };
        Ok(Encoder {
            kind,
            dim,
            item_count,
            embedding,
            body,
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn item_count(&self) -> u32 {
        self.item_count
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    /// Encodes a batch of windows to `[B, dim]`.
    pub fn encode(&self, tape: &mut Tape, binding: &Binding, windows: &[StateWindow]) -> Result<Var> {
        if windows.is_empty() {
            return Err(Error::shape("encode: empty batch"));
        }
        if let Some(&bad) = windows.iter().flatten().find(|&&i| i > self.item_count) {
            return Err(Error::Lookup {
                index: bad as usize,
                max: self.item_count as usize,
            });
        }
        let table = binding.var(self.embedding);
        match &self.body {
            Body::Gru(g) => g.encode(tape, binding, table, windows),
            Body::Attention(a) => a.encode(tape, binding, table, windows),
        }
    }
}

/// Ids at time step `t` of every window.
fn column(windows: &[StateWindow], t: usize) -> Vec<u32> {
    debug_assert!(t < WINDOW);
    windows.iter().map(|w| w[t]).collect()
}
