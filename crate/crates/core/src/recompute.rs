//! Selective recomputation of context rows at their global positions.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_store::AssembledCache;
use crate::model::{attend, contiguous, ForwardRequest, KeySpan, LayerKv, TokenId, Weights};
use crate::positional::{ChunkId, ChunkSpec};
use crate::seqpar::{recompute_flops, ModelDims};
use crate::tensor::Real;

/// Which context rows to rebuild and where every context row sits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecomputePlan {
    pub chunk_ids: Vec<ChunkId>,
    /// Context indices, strictly ascending; this is the processing order.
    pub selected: Vec<usize>,
    /// Token id of each selected row.
    pub tokens: Vec<TokenId>,
    /// Target position of every context row.
    pub positions: Vec<usize>,
}

impl RecomputePlan {
    /// `chunks` in cache order; `positions` covers the whole context.
    pub fn new(chunks: &[ChunkSpec], mut selected: Vec<usize>, positions: Vec<usize>) -> Result<Self> {
        let flat: Vec<TokenId> = chunks.iter().flat_map(|c| c.token_ids.iter().copied()).collect();
        if positions.len() != flat.len() {
            return Err(Error::shape(format!(
                "{} positions for {} context tokens",
                positions.len(),
                flat.len()
            )));
        }
        selected.sort_unstable();
        for w in selected.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateIndex(w[0]));
            }
        }
        if let Some(&i) = selected.last().filter(|&&i| i >= flat.len()) {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: flat.len(),
            });
        }
        Ok(Self {
            chunk_ids: chunks.iter().map(|c| c.chunk_id).collect(),
            tokens: selected.iter().map(|&i| flat[i]).collect(),
            selected,
            positions,
        })
    }

    /// Positions `0..N` in chunk order.
    pub fn global(chunks: &[ChunkSpec], selected: Vec<usize>) -> Result<Self> {
        let n = chunks.iter().map(ChunkSpec::local_length).sum();
        Self::new(chunks, selected, contiguous(n))
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Context rows the `i`-th selected token may attend to: every row up to
    /// and including itself in global order.
    pub fn allowed_keys(&self, i: usize) -> std::ops::RangeInclusive<usize> {
        0..=self.selected[i]
    }

    fn selected_positions(&self) -> Vec<usize> {
        self.selected.iter().map(|&i| self.positions[i]).collect()
    }
}

/// Rebuilds the selected rows of `cache` through every layer.
///
/// Each selected token restarts from its embedding at its global position.
/// At every layer its fresh key/value row is written into a working copy of
/// the context before attention, so later selected tokens see the updated
/// rows of earlier ones while unselected rows keep their cached values.
pub fn recompute_selected<T: Real>(
    weights: &Weights<T>,
    cache: &AssembledCache<T>,
    plan: &RecomputePlan,
) -> Result<AssembledCache<T>> {
    if plan.chunk_ids != cache.chunk_ids {
        return Err(Error::config("plan chunk order differs from the cache's order"));
    }
    let n = cache.context_len();
    if plan.positions.len() != n {
        return Err(Error::shape(format!(
            "plan covers {} rows, cache has {n}",
            plan.positions.len()
        )));
    }
    let mut out = cache.clone();
    if plan.is_empty() {
        return Ok(out);
    }
    let cfg = weights.config();
    weights.check_tokens(&plan.tokens)?;
    let sel_pos = plan.selected_positions();
    weights.check_positions(&sel_pos)?;
    let mut work = cache.context_kv_at(&plan.positions, cfg.d_head, cfg.rope_base)?;
    let mut h = weights.embed(&plan.tokens);
    let mut fresh = Vec::with_capacity(cfg.n_layers);
    for (layer, kv) in weights.layers.iter().zip(work.iter_mut()) {
        let (q, k, v) = layer.project(&h, &sel_pos, cfg);
        for (r, &i) in plan.selected.iter().enumerate() {
            kv.keys.row_mut(i).copy_from_slice(k.row(r));
            kv.values.row_mut(i).copy_from_slice(v.row(r));
        }
        let (attn, _) = attend(
            &q,
            &kv.keys,
            &kv.values,
            cfg,
            |r| KeySpan::Prefix(plan.selected[r] + 1),
            false,
        );
        layer.finish(&mut h, &attn);
        fresh.push(LayerKv { keys: k, values: v });
    }
    out.replace_entries(&plan.selected, &fresh, &sel_pos)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub selected: usize,
    pub context_len: usize,
    /// Dense-equivalent FLOPs of `k` rows attending to `N` keys.
    pub ideal_flops: f64,
    pub measured_time: Duration,
    /// Dense forward of the same rows over a prefix of the context, used to
    /// turn FLOPs into seconds on this host.
    pub dense_time: Duration,
    pub predicted_time: Duration,
    /// `measured / predicted`; absent when nothing is selected.
    pub overhead_factor: Option<f64>,
    pub degenerate: bool,
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

/// Times `recompute_selected` against a dense pass of equal shape.
pub fn measure_overhead<T: Real>(
    weights: &Weights<T>,
    cache: &AssembledCache<T>,
    plan: &RecomputePlan,
    repetitions: usize,
) -> Result<OverheadReport> {
    if repetitions < 3 {
        return Err(Error::config("at least 3 repetitions are required"));
    }
    let cfg = weights.config();
    let dims = ModelDims::from(cfg);
    let (k, n) = (plan.len(), cache.context_len());
    let ideal_flops = recompute_flops(&dims, k, n);
    let mut measured = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        std::hint::black_box(recompute_selected(weights, cache, plan)?);
        measured.push(t.elapsed());
    }
    let measured_time = median(measured);
    if k == 0 {
        return Ok(OverheadReport {
            selected: 0,
            context_len: n,
            ideal_flops,
            measured_time,
            dense_time: Duration::ZERO,
            predicted_time: Duration::ZERO,
            overhead_factor: None,
            degenerate: true,
        });
    }
    let prefix = cache.context_kv_at(&plan.positions, cfg.d_head, cfg.rope_base)?;
    let positions: Vec<usize> = (0..k).map(|i| n + i).collect();
    let req = ForwardRequest::causal(&plan.tokens, &positions).with_prefix(&prefix);
    let mut dense = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        std::hint::black_box(weights.forward(&req)?);
        dense.push(t.elapsed());
    }
    let dense_time = median(dense);
    // each dense row i sees n + i + 1 keys
    let dense_flops = recompute_flops(&dims, k, n)
        + dims.n_layers as f64 * dims.attention_flops_per_pair() * (k * (k + 1) / 2) as f64;
    let seconds_per_flop = dense_time.as_secs_f64() / dense_flops;
    let predicted_time = Duration::from_secs_f64(ideal_flops * seconds_per_flop);
    let factor = measured_time.as_secs_f64() / predicted_time.as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(OverheadReport {
        selected: k,
        context_len: n,
        ideal_flops,
        measured_time,
        dense_time,
        predicted_time,
        overhead_factor: (factor.is_finite() && factor > 0.0).then_some(factor),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_store::{assemble, cache_distance, cache_max_abs_diff, prefill_chunk, prefill_full};
    use crate::model::{init_weights, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_ff: 32,
            vocab_size: 64,
            rope_base: 10000.0,
            max_position: 512,
        }
    }

    fn chunks(seed: u64, lens: &[usize]) -> Vec<ChunkSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        lens.iter()
            .enumerate()
            .map(|(i, &n)| ChunkSpec::new(i as u64, (0..n).map(|_| rng.random_range(0..64)).collect(), i))
            .collect()
    }

    fn setup(seed: u64, lens: &[usize]) -> (Weights<f64>, Vec<ChunkSpec>, AssembledCache<f64>) {
        let w = init_weights::<f64>(&cfg(), seed).unwrap();
        let cs = chunks(seed, lens);
        let kvs: Vec<_> = cs.iter().map(|c| prefill_chunk(&w, c).unwrap()).collect();
        let cache = assemble(&kvs, None).unwrap();
        (w, cs, cache)
    }

    fn full_reference(w: &Weights<f64>, cs: &[ChunkSpec]) -> Vec<LayerKv<f64>> {
        let tokens: Vec<_> = cs.iter().flat_map(|c| c.token_ids.clone()).collect();
        prefill_full(w, &tokens).unwrap().layers
    }

    fn aligned(w: &Weights<f64>, c: &AssembledCache<f64>) -> Vec<LayerKv<f64>> {
        let cfg = w.config();
        c.context_kv_at(&contiguous(c.context_len()), cfg.d_head, cfg.rope_base)
            .unwrap()
    }

    #[test]
    fn full_selection_reproduces_full_prefill() {
        for seed in 0..3 {
            let (w, cs, cache) = setup(seed, &[7, 5, 9]);
            let plan = RecomputePlan::global(&cs, (0..21).collect()).unwrap();
            let out = recompute_selected(&w, &cache, &plan).unwrap();
            let d = cache_max_abs_diff(&out.context_kv(), &full_reference(&w, &cs));
            assert!(d < 1e-10, "{d}");
            assert!(out.row_positions.iter().copied().eq(0..21));
        }
    }

    #[test]
    fn empty_selection_is_identity() {
        let (w, cs, cache) = setup(1, &[4, 4]);
        let plan = RecomputePlan::global(&cs, vec![]).unwrap();
        assert_eq!(recompute_selected(&w, &cache, &plan).unwrap(), cache);
    }

    #[test]
    fn single_chunk_is_a_fixed_point() {
        let (w, cs, cache) = setup(2, &[12]);
        let plan = RecomputePlan::global(&cs, vec![0, 3, 4, 11]).unwrap();
        let out = recompute_selected(&w, &cache, &plan).unwrap();
        assert!(cache_max_abs_diff(&out.layers, &cache.layers) < 1e-10);
    }

    #[test]
    fn idempotent() {
        let (w, cs, cache) = setup(3, &[6, 6, 6]);
        let plan = RecomputePlan::global(&cs, vec![2, 7, 8, 15]).unwrap();
        let once = recompute_selected(&w, &cache, &plan).unwrap();
        let twice = recompute_selected(&w, &once, &plan).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn unselected_rows_untouched() {
        let (w, cs, cache) = setup(4, &[5, 5]);
        let plan = RecomputePlan::global(&cs, vec![6, 9]).unwrap();
        let out = recompute_selected(&w, &cache, &plan).unwrap();
        for (a, b) in out.layers.iter().zip(&cache.layers) {
            for r in (0..10).filter(|r| ![6, 9].contains(r)) {
                assert_eq!(a.keys.row(r), b.keys.row(r));
                assert_eq!(a.values.row(r), b.values.row(r));
            }
        }
        assert_eq!(out.index_map, cache.index_map);
        assert_eq!(out.chunk_ids, cache.chunk_ids);
    }

    #[test]
    fn a_selected_prefix_is_exact() {
        // rows 0..m of the full run depend only on rows 0..m
        let (w, cs, cache) = setup(5, &[4, 4, 4]);
        let plan = RecomputePlan::global(&cs, (0..8).collect()).unwrap();
        let out = recompute_selected(&w, &cache, &plan).unwrap();
        let full = full_reference(&w, &cs);
        for (a, b) in out.layers.iter().zip(&full) {
            assert!(a.keys.slice_rows(0, 8).max_abs_diff(&b.keys.slice_rows(0, 8)) < 1e-10);
        }
    }

    #[test]
    fn fidelity_improves_on_average_with_nested_selections() {
        let mut means = [0.0; 4];
        for seed in 0..20 {
            let (w, cs, cache) = setup(seed, &[6, 6, 6, 6]);
            let full = full_reference(&w, &cs);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let mut order: Vec<usize> = (0..24).collect();
            for i in (1..24).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for (slot, k) in [0, 6, 12, 24].into_iter().enumerate() {
                let plan = RecomputePlan::global(&cs, order[..k].to_vec()).unwrap();
                let out = recompute_selected(&w, &cache, &plan).unwrap();
                means[slot] += cache_distance(&aligned(&w, &out), &full) / 20.0;
            }
        }
        assert!(means.windows(2).all(|p| p[1] <= p[0]), "{means:?}");
        assert!(means[3] < 1e-9);
    }

    #[test]
    fn plan_validation() {
        let (w, cs, cache) = setup(6, &[3, 3]);
        assert!(RecomputePlan::global(&cs, vec![6]).is_err());
        assert!(RecomputePlan::global(&cs, vec![1, 1]).is_err());
        assert!(RecomputePlan::new(&cs, vec![0], vec![0; 5]).is_err());
        let plan = RecomputePlan::global(&cs, vec![4, 1]).unwrap();
        assert_eq!(plan.selected, vec![1, 4]);
        assert_eq!(plan.allowed_keys(1), 0..=4);
        let mut swapped = cs.clone();
        swapped.reverse();
        let wrong = RecomputePlan::global(&swapped, vec![0]).unwrap();
        assert!(recompute_selected(&w, &cache, &wrong).is_err());
    }

    #[test]
    fn overhead_accounting() {
        let (w, cs, cache) = setup(7, &[8, 8]);
        let none = RecomputePlan::global(&cs, vec![]).unwrap();
        let r = measure_overhead(&w, &cache, &none, 3).unwrap();
        assert_eq!(r.ideal_flops, 0.0);
        assert!(r.degenerate && r.overhead_factor.is_none());
        assert!(measure_overhead(&w, &cache, &none, 2).is_err());
        let some = RecomputePlan::global(&cs, vec![1, 5, 9, 12]).unwrap();
        let r = measure_overhead(&w, &cache, &some, 3).unwrap();
        assert!(r.overhead_factor.unwrap() > 0.0);
        let dims = ModelDims::from(w.config());
        assert_eq!(recompute_flops(&dims, 8, 16), 2.0 * r.ideal_flops);
    }
}
