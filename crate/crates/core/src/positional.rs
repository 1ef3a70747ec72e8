//! Position layouts for chunked context plus prompt, and RoPE-similarity
//! statistics between prompt and context positions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fnv64;
use crate::model::TokenId;
use crate::rope::frequencies;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkId(pub u64);

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One context chunk. Its tokens are prefilled at local positions
/// `0..local_length()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub chunk_id: ChunkId,
    pub token_ids: Vec<TokenId>,
    /// Place of the chunk in the given global ordering.
    pub declared_order_index: usize,
}

impl ChunkSpec {
    pub fn new(chunk_id: u64, token_ids: Vec<TokenId>, declared_order_index: usize) -> Self {
        Self {
            chunk_id: ChunkId(chunk_id),
            token_ids,
            declared_order_index,
        }
    }

    pub fn local_length(&self) -> usize {
        self.token_ids.len()
    }

    /// Hash of the token content, independent of id and order.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        for t in &self.token_ids {
            h.update(&t.to_le_bytes());
        }
        h.finish()
    }
}

/// Positional layout of chunked context and prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeometryMode {
    /// Context and prompt at their absolute indices in the concatenation.
    #[serde(rename = "GLOBAL")]
    Global,
    /// Chunks at local positions; prompt right after the longest chunk.
    #[serde(rename = "HL-HP")]
    HlHp,
    /// Chunks at local positions; prompt at its global index.
    #[serde(rename = "HL-TP")]
    HlTp,
    /// Prompt at its global index; all chunks packed right before it.
    #[serde(rename = "TL-TP")]
    TlTp,
}

impl GeometryMode {
    pub const ALL: [GeometryMode; 4] = [
        GeometryMode::Global,
        GeometryMode::HlHp,
        GeometryMode::HlTp,
        GeometryMode::TlTp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeometryMode::Global => "GLOBAL",
            GeometryMode::HlHp => "HL-HP",
            GeometryMode::HlTp => "HL-TP",
            GeometryMode::TlTp => "TL-TP",
        }
    }
}

impl fmt::Display for GeometryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeometryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        match norm.as_str() {
            "GLOBAL" => Ok(GeometryMode::Global),
            "HLHP" => Ok(GeometryMode::HlHp),
            "HLTP" => Ok(GeometryMode::HlTp),
            "TLTP" => Ok(GeometryMode::TlTp),
            _ => Err(Error::config(format!(
                "unknown geometry '{s}' (expected GLOBAL, HL-HP, HL-TP or TL-TP)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub mode: GeometryMode,
    pub prompt_length: usize,
    pub chunk_lengths: Vec<usize>,
    /// Global index of the first prompt token, used by the tail-prompt
    /// layouts. Defaults to the total context length.
    #[serde(default)]
    pub prompt_offset: Option<usize>,
}

impl GeometryConfig {
    pub fn new(mode: GeometryMode, prompt_length: usize, chunk_lengths: Vec<usize>) -> Self {
        Self {
            mode,
            prompt_length,
            chunk_lengths,
            prompt_offset: None,
        }
    }

    pub fn for_chunks(mode: GeometryMode, prompt_length: usize, chunks: &[ChunkSpec]) -> Self {
        Self::new(
            mode,
            prompt_length,
            chunks.iter().map(ChunkSpec::local_length).collect(),
        )
    }

    pub fn with_prompt_offset(mut self, offset: usize) -> Self {
        self.prompt_offset = Some(offset);
        self
    }

    pub fn context_length(&self) -> usize {
        self.chunk_lengths.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionAssignment {
    pub context: Vec<Vec<usize>>,
    pub prompt: Vec<usize>,
}

impl PositionAssignment {
    /// Context positions in concatenation order.
    pub fn flat_context(&self) -> Vec<usize> {
        self.context.iter().flatten().copied().collect()
    }

    pub fn chunk_starts(&self) -> Vec<Option<usize>> {
        self.context.iter().map(|c| c.first().copied()).collect()
    }

    fn max_position(&self) -> Option<usize> {
        self.context
            .iter()
            .flatten()
            .chain(&self.prompt)
            .copied()
            .max()
    }
}

/// Global positions under `config` for `chunks` taken in slice order.
pub fn assign_positions(
    config: &GeometryConfig,
    chunks: &[ChunkSpec],
    max_position: usize,
) -> Result<PositionAssignment> {
    let lengths: Vec<usize> = chunks.iter().map(ChunkSpec::local_length).collect();
    if lengths != config.chunk_lengths {
        return Err(Error::config(format!(
            "chunk lengths {lengths:?} do not match the geometry's {:?}",
            config.chunk_lengths
        )));
    }
    layout(config, max_position)
}

/// Same as [`assign_positions`] but driven by the lengths alone.
pub fn layout(config: &GeometryConfig, max_position: usize) -> Result<PositionAssignment> {
    let lengths = &config.chunk_lengths;
    let total: usize = lengths.iter().sum();
    let global_prompt = config.prompt_offset.unwrap_or(total);
    let ranges = |starts: Vec<usize>| -> Vec<Vec<usize>> {
        starts
            .into_iter()
            .zip(lengths)
            .map(|(s, &len)| (s..s + len).collect())
            .collect()
    };
    let cumulative: Vec<usize> = lengths
        .iter()
        .scan(0, |acc, &len| {
            let s = *acc;
            *acc += len;
            Some(s)
        })
        .collect();
    let (starts, prompt_start) = match config.mode {
        GeometryMode::Global => (cumulative, total),
        GeometryMode::HlHp => {
            let longest = lengths.iter().copied().max().unwrap_or(0);
            (vec![0; lengths.len()], longest)
        }
        GeometryMode::HlTp => (vec![0; lengths.len()], global_prompt),
        GeometryMode::TlTp => {
            if global_prompt < total {
                return Err(Error::config(format!(
                    "prompt offset {global_prompt} leaves no room for {total} context tokens"
                )));
            }
            let base = global_prompt - total;
            (cumulative.iter().map(|s| base + s).collect(), global_prompt)
        }
    };
    let assignment = PositionAssignment {
        context: ranges(starts),
        prompt: (prompt_start..prompt_start + config.prompt_length).collect(),
    };
    if let Some(p) = assignment.max_position() {
        if p >= max_position {
            return Err(Error::PositionOutOfRange {
                position: p,
                max: max_position,
            });
        }
    }
    Ok(assignment)
}

/// `[cos(θ_0 p), sin(θ_0 p), …]`: the RoPE rotation at `position` applied to
/// the reference direction with a unit x-component in every pair.
pub fn rope_position_vector(position: usize, d: usize, base: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(d);
    for theta in frequencies(d, base) {
        let (s, c) = (theta * position as f64).sin_cos();
        out.push(c);
        out.push(s);
    }
    out
}

/// Cosine similarity of two positions' RoPE vectors, computed in closed
/// form as the mean of `cos(θ_i (m - n))`.
pub fn rope_cosine(m: usize, n: usize, d: usize, base: f64) -> f64 {
    let delta = m as f64 - n as f64;
    let freqs = frequencies(d, base);
    freqs.iter().map(|t| (t * delta).cos()).sum::<f64>() / freqs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    /// Mean over prompt positions of the best match among selected positions.
    pub mom: f64,
    /// Best match over all pairs.
    pub max: f64,
}

pub fn rope_similarity_stats(
    prompt_positions: &[usize],
    selected_positions: &[usize],
    d: usize,
    base: f64,
) -> Result<SimilarityStats> {
    if selected_positions.is_empty() || prompt_positions.is_empty() {
        return Err(Error::config("similarity needs nonempty position sets"));
    }
    if d == 0 || d % 2 != 0 {
        return Err(Error::config("similarity dimension must be even"));
    }
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for &p in prompt_positions {
        let best = selected_positions
            .iter()
            .map(|&s| rope_cosine(p, s, d, base))
            .fold(f64::NEG_INFINITY, f64::max);
        sum += best;
        max = max.max(best);
    }
    Ok(SimilarityStats {
        mom: sum / prompt_positions.len() as f64,
        max,
    })
}
