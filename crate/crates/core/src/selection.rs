//! Choosing which context tokens to recompute.
//!
//! The main selector scores each context token by the attention mass it
//! receives from the prompt, `s_j = Σ_i A_ij`, where `A` is the head-averaged
//! prompt-to-context attention captured at one layer while the prompt runs
//! over the reused cache. Baselines: hidden-state deviation in early layers
//! (CacheBlend-style), chunk-initial tokens (EPIC-style), and uniform random.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_store::AssembledCache;
use crate::model::{contiguous, ForwardRequest, TokenId, Weights};
use crate::positional::{layout, ChunkSpec, GeometryConfig, GeometryMode, PositionAssignment};
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    AttentionNorm,
    Cacheblend,
    Epic,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::AttentionNorm,
        Strategy::Cacheblend,
        Strategy::Epic,
        Strategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::AttentionNorm => "attention-norm",
            Strategy::Cacheblend => "cacheblend",
            Strategy::Epic => "epic",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown strategy '{s}' (expected attention-norm, cacheblend, epic or random)"
                ))
            })
    }
}

/// Number of tokens to recompute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Count(usize),
    /// Fraction of the context length, rounded up.
    Ratio(f64),
}

fn ceil_fraction(ratio: f64, n: usize) -> usize {
    // the epsilon absorbs products like 0.15 * 20 = 3.0000000000000004
    (((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

impl Budget {
    pub fn resolve(self, n: usize) -> Result<usize> {
        match self {
            Budget::Count(k) if k <= n => Ok(k),
            Budget::Count(k) => Err(Error::config(format!(
                "budget {k} exceeds context length {n}"
            ))),
            Budget::Ratio(r) if (0.0..=1.0).contains(&r) => Ok(ceil_fraction(r, n)),
            Budget::Ratio(r) => Err(Error::config(format!("ratio {r} outside [0, 1]"))),
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Count(k) => write!(f, "top{k}"),
            Budget::Ratio(r) => write!(f, "ratio{r}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    #[default]
    MeanOverHeads,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub budget: Budget,
    /// Capture layer; `None` means the model's default.
    pub norm_layer: Option<usize>,
    pub geometry: GeometryMode,
    /// Prompt's global index for tail-prompt layouts.
    pub prompt_offset: Option<usize>,
    pub seed: u64,
    pub cacheblend_layers: usize,
    pub head_aggregation: HeadAggregation,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self::new(Strategy::AttentionNorm, Budget::Ratio(0.15))
    }
}

impl SelectionConfig {
    pub fn new(strategy: Strategy, budget: Budget) -> Self {
        Self {
            strategy,
            budget,
            norm_layer: None,
            geometry: GeometryMode::Global,
            prompt_offset: None,
            seed: 0,
            cacheblend_layers: 1,
            head_aggregation: HeadAggregation::MeanOverHeads,
        }
    }

    pub fn with_geometry(mut self, geometry: GeometryMode) -> Self {
        self.geometry = geometry;
        self
    }

    pub fn with_norm_layer(mut self, layer: usize) -> Self {
        self.norm_layer = Some(layer);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// One score per context token; empty for content-independent selectors.
    pub scores: Vec<f64>,
    /// Selected context indices, ascending.
    pub selected: Vec<usize>,
    pub strategy: Strategy,
    pub geometry: GeometryMode,
    pub norm_layer: Option<usize>,
}

/// Head-averaged attention from each prompt token to each context token at
/// `layer`, with the cached context keys re-encoded to `positions`.
///
/// Rows are not renormalised over the context columns: the mass a prompt
/// token spends on itself and earlier prompt tokens is dropped.
pub fn prompt_attention<T: Real>(
    weights: &Weights<T>,
    cache: &AssembledCache<T>,
    prompt: &[TokenId],
    positions: &PositionAssignment,
    layer: usize,
) -> Result<Matrix<f64>> {
    let cfg = weights.config();
    if layer >= cfg.n_layers {
        return Err(Error::IndexOutOfRange {
            index: layer,
            len: cfg.n_layers,
        });
    }
    if prompt.is_empty() {
        return Err(Error::config("prompt is empty"));
    }
    if positions.prompt.len() != prompt.len() {
        return Err(Error::shape(format!(
            "{} prompt positions for {} prompt tokens",
            positions.prompt.len(),
            prompt.len()
        )));
    }
    let n = cache.context_len();
    let context = cache.context_kv_at(&positions.flat_context(), cfg.d_head, cfg.rope_base)?;
    let capture = [layer];
    let req = ForwardRequest::causal(prompt, &positions.prompt)
        .with_prefix(&context)
        .with_capture(&capture)
        .with_max_layers(layer + 1);
    let out = weights.forward(&req)?;
    let heads = &out.attention[&layer];
    let mut a = Matrix::zeros(prompt.len(), n);
    let inv = 1.0 / heads.len() as f64;
    for h in heads {
        for i in 0..prompt.len() {
            for (dst, &w) in a.row_mut(i).iter_mut().zip(&h.row(i)[..n]) {
                *dst += w.as_f64() * inv;
            }
        }
    }
    Ok(a)
}

/// Attention mass received by each column: `s_j = Σ_i A_ij`.
pub fn column_sums(attention: &Matrix<f64>) -> Vec<f64> {
    let mut s = vec![0.0; attention.cols()];
    for i in 0..attention.rows() {
        for (acc, &w) in s.iter_mut().zip(attention.row(i)) {
            *acc += w;
        }
    }
    s
}

/// Prompt-conditioned importance of every context token.
pub fn score_attention_norm<T: Real>(
    weights: &Weights<T>,
    cache: &AssembledCache<T>,
    prompt: &[TokenId],
    positions: &PositionAssignment,
    norm_layer: usize,
) -> Result<Vec<f64>> {
    prompt_attention(weights, cache, prompt, positions, norm_layer).map(|a| column_sums(&a))
}

/// Indices of the `k` largest scores, ascending. Ties go to the lower index;
/// NaN ranks below every number.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::config(format!(
            "cannot select {k} of {} tokens",
            scores.len()
        )));
    }
    let key = |x: f64| if x.is_nan() { f64::NEG_INFINITY } else { x };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        key(scores[b])
            .total_cmp(&key(scores[a]))
            .then(a.cmp(&b))
    };
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, by_rank);
    }
    let mut out = order[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Per-token hidden-state deviation between chunk-local and full-context
/// runs, summed over the first `early_layers` layers.
pub fn score_cacheblend<T: Real>(
    weights: &Weights<T>,
    chunks: &[ChunkSpec],
    early_layers: usize,
) -> Result<Vec<f64>> {
    let cfg = weights.config();
    if early_layers == 0 || early_layers > cfg.n_layers {
        return Err(Error::config(format!(
            "cacheblend layers must be in 1..={}, got {early_layers}",
            cfg.n_layers
        )));
    }
    let full_tokens: Vec<TokenId> = chunks.iter().flat_map(|c| c.token_ids.iter().copied()).collect();
    if full_tokens.is_empty() {
        return Ok(Vec::new());
    }
    let full_pos = contiguous(full_tokens.len());
    let mut req = ForwardRequest::causal(&full_tokens, &full_pos);
    req.max_layers = Some(early_layers);
    let full = weights.forward(&req)?;
    let mut scores = Vec::with_capacity(full_tokens.len());
    let mut offset = 0;
    for chunk in chunks {
        let pos = contiguous(chunk.local_length());
        let mut req = ForwardRequest::causal(&chunk.token_ids, &pos);
        req.max_layers = Some(early_layers);
        let local = weights.forward(&req)?;
        for i in 0..chunk.local_length() {
            let mut s = 0.0;
            for (lh, fh) in local.hidden.iter().zip(&full.hidden) {
                s += lh
                    .row(i)
                    .iter()
                    .zip(fh.row(offset + i))
                    .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
            scores.push(s);
        }
        offset += chunk.local_length();
    }
    Ok(scores)
}

/// The first `⌈ratio·|C_i|⌉` tokens of every chunk.
pub fn select_epic(chunk_lengths: &[usize], ratio: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("ratio {ratio} outside [0, 1]")));
    }
    let mut out = Vec::new();
    let mut offset = 0;
    for &len in chunk_lengths {
        out.extend(offset..offset + ceil_fraction(ratio, len));
        offset += len;
    }
    Ok(out)
}

/// `k` distinct indices below `n`, uniform and seeded, ascending.
pub fn select_random(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::config(format!("cannot select {k} of {n} tokens")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = rand::seq::index::sample(&mut rng, n, k).into_vec();
    out.sort_unstable();
    Ok(out)
}

/// Runs the configured selector over an assembled cache.
///
/// `chunks` must be in the cache's order. The attention-norm selector lays
/// out positions with `config.geometry`; the others ignore it.
pub fn select<T: Real>(
    weights: &Weights<T>,
    cache: &AssembledCache<T>,
    chunks: &[ChunkSpec],
    prompt: &[TokenId],
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    let ids: Vec<_> = chunks.iter().map(|c| c.chunk_id).collect();
    if ids != cache.chunk_ids {
        return Err(Error::config("chunk order differs from the cache's order"));
    }
    let n = cache.context_len();
    let k = config.budget.resolve(n)?;
    let mut norm_layer = None;
    let (scores, selected) = match config.strategy {
        Strategy::AttentionNorm => {
            let layer = config
                .norm_layer
                .unwrap_or_else(|| weights.config().default_norm_layer());
            norm_layer = Some(layer);
            let mut geometry = GeometryConfig::new(config.geometry, prompt.len(), cache.chunk_lengths.clone());
            geometry.prompt_offset = config.prompt_offset;
            let positions = layout(&geometry, weights.config().max_position)?;
            let scores = score_attention_norm(weights, cache, prompt, &positions, layer)?;
            let selected = select_topk(&scores, k)?;
            (scores, selected)
        }
        Strategy::Cacheblend => {
            let scores = score_cacheblend(weights, chunks, config.cacheblend_layers)?;
            let selected = select_topk(&scores, k)?;
            (scores, selected)
        }
        Strategy::Epic => {
            let selected = match config.budget {
                Budget::Ratio(r) => select_epic(&cache.chunk_lengths, r)?,
                Budget::Count(_) => {
                    // spread a fixed count over chunks as a ratio of the context
                    let r = if n == 0 { 0.0 } else { k as f64 / n as f64 };
                    select_epic(&cache.chunk_lengths, r)?
                }
            };
            (Vec::new(), selected)
        }
        Strategy::Random => (Vec::new(), select_random(n, k, config.seed)?),
    };
    Ok(SelectionResult {
        scores,
        selected,
        strategy: config.strategy,
        geometry: config.geometry,
        norm_layer,
    })
}
