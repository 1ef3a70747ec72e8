//! Chunk reordering: score every chunk on its own, move the most informative
//! chunks next to the prompt, then select again on the new layout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_store::{assemble, AssembledCache, ChunkKv};
use crate::model::{TokenId, Weights};
use crate::positional::{layout, ChunkId, ChunkSpec, GeometryConfig, GeometryMode};
use crate::selection::{score_attention_norm, select, select_topk, SelectionConfig, SelectionResult, Strategy};
use crate::tensor::Real;

/// How a chunk's first-pass top scores collapse to one number.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkScore {
    #[default]
    Sum,
    Mean,
    Max,
}

impl ChunkScore {
    pub fn name(self) -> &'static str {
        match self {
            ChunkScore::Sum => "sum",
            ChunkScore::Mean => "mean",
            ChunkScore::Max => "max",
        }
    }

    pub fn aggregate(self, xs: &[f64]) -> f64 {
        match self {
            ChunkScore::Sum => xs.iter().sum(),
            ChunkScore::Mean if xs.is_empty() => 0.0,
            ChunkScore::Mean => xs.iter().sum::<f64>() / xs.len() as f64,
            ChunkScore::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

impl fmt::Display for ChunkScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChunkScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(ChunkScore::Sum),
            "mean" => Ok(ChunkScore::Mean),
            "max" => Ok(ChunkScore::Max),
            _ => Err(Error::config(format!("unknown chunk score '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkScores {
    pub importance: Vec<f64>,
    pub first_pass: Vec<SelectionResult>,
}

/// Scores every chunk alone with local positions and the prompt at the end
/// of the full context, keeping the top `⌈budget/K⌉` tokens of each.
pub fn score_chunks<T: Real>(
    weights: &Weights<T>,
    caches: &[ChunkKv<T>],
    prompt: &[TokenId],
    selection: &SelectionConfig,
    aggregator: ChunkScore,
) -> Result<ChunkScores> {
    if caches.is_empty() {
        return Err(Error::config("no chunks to score"));
    }
    if let Some(c) = caches.iter().find(|c| c.is_empty()) {
        return Err(Error::config(format!("chunk {} is empty", c.chunk_id)));
    }
    let n: usize = caches.iter().map(ChunkKv::len).sum();
    let per_chunk = selection.budget.resolve(n)?.div_ceil(caches.len());
    let layer = selection
        .norm_layer
        .unwrap_or_else(|| weights.config().default_norm_layer());
    let mut importance = Vec::with_capacity(caches.len());
    let mut first_pass = Vec::with_capacity(caches.len());
    for c in caches {
        let cache = assemble(std::slice::from_ref(c), None)?;
        let geometry = GeometryConfig::new(GeometryMode::HlTp, prompt.len(), vec![c.len()])
            .with_prompt_offset(n);
        let positions = layout(&geometry, weights.config().max_position)?;
        let scores = score_attention_norm(weights, &cache, prompt, &positions, layer)?;
        let selected = select_topk(&scores, per_chunk.min(c.len()))?;
        let top: Vec<f64> = selected.iter().map(|&i| scores[i]).collect();
        importance.push(aggregator.aggregate(&top));
        first_pass.push(SelectionResult {
            scores,
            selected,
            strategy: Strategy::AttentionNorm,
            geometry: GeometryMode::HlTp,
            norm_layer: Some(layer),
        });
    }
    Ok(ChunkScores {
        importance,
        first_pass,
    })
}

/// Input indices ordered by ascending importance, so the most important
/// chunk comes last. Equal importances keep their input order.
pub fn order_by_importance(importance: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[a].total_cmp(&importance[b]));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReorderPlan {
    pub original_order: Vec<ChunkId>,
    /// `permutation[i]` is the input index of the chunk placed at slot `i`.
    pub permutation: Vec<usize>,
    /// Per input chunk.
    pub chunk_importance: Vec<f64>,
    pub first_pass: Vec<SelectionResult>,
    pub second_pass: SelectionResult,
}

impl ReorderPlan {
    pub fn new_order(&self) -> Vec<ChunkId> {
        self.permutation.iter().map(|&i| self.original_order[i]).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReorderConfig {
    pub aggregator: ChunkScore,
    /// The caller's statement that the chunks have an intrinsic order.
    pub sequential_input: bool,
}

impl Default for ReorderConfig {
    fn default() -> Self {
        Self {
            aggregator: ChunkScore::Sum,
            sequential_input: false,
        }
    }
}

/// Two-stage selection. The second stage runs `selection` with the global
/// layout over the permuted chunks; returned indices refer to that layout.
pub fn reorder_and_reselect<T: Real>(
    weights: &Weights<T>,
    chunks: &[ChunkSpec],
    caches: &[ChunkKv<T>],
    prompt: &[TokenId],
    selection: &SelectionConfig,
    config: &ReorderConfig,
) -> Result<(ReorderPlan, AssembledCache<T>, SelectionResult)> {
    if config.sequential_input {
        return Err(Error::config("chunks are marked as sequential and cannot be reordered"));
    }
    if chunks.len() != caches.len()
        || chunks.iter().zip(caches).any(|(s, c)| s.chunk_id != c.chunk_id)
    {
        return Err(Error::config("chunk specs and caches do not line up"));
    }
    let scored = score_chunks(weights, caches, prompt, selection, config.aggregator)?;
    let permutation = order_by_importance(&scored.importance);
    let new_chunks: Vec<ChunkSpec> = permutation.iter().map(|&i| chunks[i].clone()).collect();
    let new_caches: Vec<ChunkKv<T>> = permutation.iter().map(|&i| caches[i].clone()).collect();
    let cache = assemble(&new_caches, None)?;
    let mut second = selection.clone();
    second.geometry = GeometryMode::Global;
    second.prompt_offset = None;
    let result = select(weights, &cache, &new_chunks, prompt, &second)?;
    let plan = ReorderPlan {
        original_order: chunks.iter().map(|c| c.chunk_id).collect(),
        permutation,
        chunk_importance: scored.importance,
        first_pass: scored.first_pass,
        second_pass: result.clone(),
    };
    Ok((plan, cache, result))
}
