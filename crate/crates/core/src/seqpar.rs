//! Analytic time-to-first-token model for three prefill regimes on `D`
//! devices, plus an in-process multi-worker chunk prefill executor.
//!
//! * single prefill: one device runs the full causal prefill.
//! * ring attention: compute is split evenly and every device receives the
//!   other devices' K/V blocks over `D - 1` ring steps per layer.
//! * chunk prefill + selective recompute: each device prefills its own
//!   chunk, a prompt pass scores the context, `⌈r·N⌉` rows are recomputed
//!   (split across devices), and only non-local selected rows travel.
//!
//! Communication is not overlapped with compute. The absolute numbers are a
//! fit, not a measurement; only the scaling structure is meaningful.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_store::{prefill_chunk, ChunkKv};
use crate::model::{ModelConfig, Weights};
use crate::positional::ChunkSpec;
use crate::tensor::Real;

/// Transformer dimensions that drive the FLOP and byte counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl ModelDims {
    /// An 8B-class decoder: 32 layers, width 4096, MLP width 14336.
    pub const EIGHT_B: ModelDims = ModelDims {
        n_layers: 32,
        d_model: 4096,
        d_ff: 14336,
    };

    /// Q, K, V and output projections for one token in one layer.
    pub fn projection_flops_per_token(&self) -> f64 {
        8.0 * (self.d_model * self.d_model) as f64
    }

    /// Gated MLP for one token in one layer.
    pub fn mlp_flops_per_token(&self) -> f64 {
        6.0 * (self.d_model * self.d_ff) as f64
    }

    /// Scores plus weighted values for one query/key pair in one layer.
    pub fn attention_flops_per_pair(&self) -> f64 {
        4.0 * self.d_model as f64
    }

    /// Bytes of one token's K and V in one layer.
    pub fn kv_bytes_per_token_layer(&self, bytes_per_element: f64) -> f64 {
        2.0 * self.d_model as f64 * bytes_per_element
    }
}

impl From<&ModelConfig> for ModelDims {
    fn from(c: &ModelConfig) -> Self {
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            d_ff: c.d_ff,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub projection: f64,
    pub attention: f64,
    pub mlp: f64,
    pub recompute: f64,
}

impl FlopBreakdown {
    pub fn total(&self) -> f64 {
        self.projection + self.attention + self.mlp + self.recompute
    }
}

/// Causal prefill of `n` tokens.
pub fn prefill_flops(dims: &ModelDims, n: usize) -> FlopBreakdown {
    let (l, n) = (dims.n_layers as f64, n as f64);
    FlopBreakdown {
        projection: l * n * dims.projection_flops_per_token(),
        mlp: l * n * dims.mlp_flops_per_token(),
        attention: l * dims.attention_flops_per_pair() * n * (n + 1.0) / 2.0,
        recompute: 0.0,
    }
}

/// Dense-equivalent cost of recomputing `k` rows that each attend to `n`
/// keys, across all layers. Linear in `k`.
pub fn recompute_flops(dims: &ModelDims, k: usize, n: usize) -> f64 {
    let l = dims.n_layers as f64;
    let k = k as f64;
    l * k * (dims.projection_flops_per_token()
        + dims.mlp_flops_per_token()
        + dims.attention_flops_per_pair() * n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpStrategy {
    SinglePrefill,
    RingAttention,
    Ours,
}

impl SpStrategy {
    pub const ALL: [SpStrategy; 3] = [
        SpStrategy::SinglePrefill,
        SpStrategy::RingAttention,
        SpStrategy::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpStrategy::SinglePrefill => "single_prefill",
            SpStrategy::RingAttention => "ring_attention",
            SpStrategy::Ours => "ours",
        }
    }
}

impl fmt::Display for SpStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        SpStrategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModelParams {
    pub seconds_per_flop: f64,
    pub seconds_per_byte: f64,
    pub hop_latency: f64,
    pub devices: usize,
    pub dims: ModelDims,
    pub recompute_ratio: f64,
    pub kv_bytes_per_element: f64,
    /// Prompt tokens scored against the context during selection.
    pub prompt_len: usize,
    /// Fraction of selected tokens whose recomputation stays on the device
    /// holding them.
    pub locality: f64,
}

impl Default for CostModelParams {
    /// Per-FLOP time is fit so an 8K single-device prefill of the 8B-class
    /// model takes about 0.57 s; per-byte time is an effective 25 GB/s link.
    fn default() -> Self {
        Self {
            seconds_per_flop: 3.9e-15,
            seconds_per_byte: 4.0e-11,
            hop_latency: 20e-6,
            devices: 4,
            dims: ModelDims::EIGHT_B,
            recompute_ratio: 0.15,
            kv_bytes_per_element: 2.0,
            prompt_len: 64,
            locality: 0.5,
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seconds_per_flop", self.seconds_per_flop),
            ("seconds_per_byte", self.seconds_per_byte),
            ("kv_bytes_per_element", self.kv_bytes_per_element),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.hop_latency >= 0.0) {
            return Err(Error::config("hop_latency must be nonnegative"));
        }
        if self.devices == 0 {
            return Err(Error::config("devices must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.recompute_ratio) || !(0.0..=1.0).contains(&self.locality) {
            return Err(Error::config("recompute_ratio and locality must lie in [0, 1]"));
        }
        if self.dims.n_layers == 0 || self.dims.d_model == 0 {
            return Err(Error::config("model dims must be positive"));
        }
        Ok(())
    }

    /// Reads a TOML parameter file; missing keys keep their defaults.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let p: CostModelParams =
            toml::from_str(s).map_err(|e| Error::config(format!("bad parameter file: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn selected(&self, n: usize) -> usize {
        (((self.recompute_ratio * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
    }

    /// Ring schedule over `D - 1` steps per layer, each carrying
    /// `block_tokens` tokens' K/V.
    fn ring_time(&self, block_tokens: f64) -> f64 {
        let steps = (self.devices - 1) as f64;
        let bytes = block_tokens * self.dims.kv_bytes_per_token_layer(self.kv_bytes_per_element);
        self.dims.n_layers as f64 * steps * (self.hop_latency + bytes * self.seconds_per_byte)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyEstimate {
    pub strategy: SpStrategy,
    pub ttft_s: f64,
    pub speedup: f64,
    pub comm_bytes: f64,
    pub flops: FlopBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seq_len: usize,
    pub devices: usize,
    pub recompute_ratio: f64,
    pub estimates: Vec<StrategyEstimate>,
}

impl SimReport {
    pub fn get(&self, strategy: SpStrategy) -> &StrategyEstimate {
        self.estimates
            .iter()
            .find(|e| e.strategy == strategy)
            .expect("every strategy is estimated")
    }

    pub fn speedup(&self, strategy: SpStrategy) -> f64 {
        self.get(strategy).speedup
    }
}

impl fmt::Display for SimReport {
    /// One line per strategy: `name ttft_s speedup comm_bytes`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.estimates {
            writeln!(
                f,
                "{} ttft_s={:.6} speedup={:.3} comm_bytes={:.0}",
                e.strategy, e.ttft_s, e.speedup, e.comm_bytes
            )?;
        }
        Ok(())
    }
}

fn estimate(params: &CostModelParams, n: usize, strategy: SpStrategy) -> StrategyEstimate {
    let dims = &params.dims;
    let d = params.devices as f64;
    let per_token_kv = dims.n_layers as f64 * dims.kv_bytes_per_token_layer(params.kv_bytes_per_element);
    let (seconds, comm_bytes, flops) = match strategy {
        SpStrategy::SinglePrefill => {
            let f = prefill_flops(dims, n);
            (f.total() * params.seconds_per_flop, 0.0, f)
        }
        SpStrategy::RingAttention => {
            let f = prefill_flops(dims, n);
            let block = n as f64 / d;
            let comm = (d - 1.0) * n as f64 * per_token_kv;
            (
                f.total() / d * params.seconds_per_flop + params.ring_time(block),
                comm,
                f,
            )
        }
        SpStrategy::Ours => {
            let local = n.div_ceil(params.devices);
            let chunk = prefill_flops(dims, local);
            let m = params.prompt_len as f64;
            let l = dims.n_layers as f64;
            let k = params.selected(n);
            let selection = FlopBreakdown {
                projection: l * m * dims.projection_flops_per_token(),
                mlp: l * m * dims.mlp_flops_per_token(),
                attention: l * dims.attention_flops_per_pair() * m * (n as f64 + m),
                recompute: 0.0,
            };
            let recompute = recompute_flops(dims, k, n);
            let travelling = k as f64 * (1.0 - params.locality);
            let comm = (d - 1.0) * travelling * per_token_kv;
            let time = (chunk.total() + selection.total() + recompute / d) * params.seconds_per_flop
                + params.ring_time(travelling / d);
            let flops = FlopBreakdown {
                projection: chunk.projection * d + selection.projection,
                attention: chunk.attention * d + selection.attention,
                mlp: chunk.mlp * d + selection.mlp,
                recompute,
            };
            (time, comm, flops)
        }
    };
    StrategyEstimate {
        strategy,
        ttft_s: seconds,
        speedup: 0.0,
        comm_bytes,
        flops,
    }
}

/// Estimated time to first token of `strategy` on `n` context tokens.
pub fn estimate_ttft(params: &CostModelParams, n: usize, strategy: SpStrategy) -> Result<f64> {
    params.validate()?;
    if n < params.devices {
        return Err(Error::config(format!(
            "sequence length {n} is shorter than the device count {}",
            params.devices
        )));
    }
    Ok(estimate(params, n, strategy).ttft_s)
}

/// Estimates for all strategies, with speedups relative to single prefill.
pub fn simulate(params: &CostModelParams, n: usize) -> Result<SimReport> {
    estimate_ttft(params, n, SpStrategy::SinglePrefill)?;
    let mut estimates: Vec<StrategyEstimate> = SpStrategy::ALL
        .into_iter()
        .map(|s| estimate(params, n, s))
        .collect();
    let base = estimates[0].ttft_s;
    for e in estimates.iter_mut() {
        e.speedup = if e.strategy == SpStrategy::SinglePrefill {
            1.0
        } else {
            base / e.ttft_s
        };
    }
    Ok(SimReport {
        seq_len: n,
        devices: params.devices,
        recompute_ratio: params.recompute_ratio,
        estimates,
    })
}

/// Chunk caches in input order plus the wall time of the whole batch.
#[derive(Debug)]
pub struct ParallelPrefill<T> {
    pub caches: Vec<ChunkKv<T>>,
    pub wall_time: Duration,
}

/// Prefills `chunks` on `workers` threads pulling from a shared queue.
/// Output order and contents do not depend on scheduling.
pub fn run_parallel_prefill<T: Real>(
    weights: &Weights<T>,
    chunks: &[ChunkSpec],
    workers: usize,
) -> Result<ParallelPrefill<T>> {
    let workers = workers.max(1).min(chunks.len().max(1));
    let start = Instant::now();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ChunkKv<T>>>>> =
        Mutex::new((0..chunks.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= chunks.len() {
                    break;
                }
                let r = prefill_chunk(weights, &chunks[i]);
                slots.lock().expect("slot lock poisoned")[i] = Some(r);
            });
        }
    });
    let wall_time = start.elapsed();
    let caches = slots
        .into_inner()
        .expect("slot lock poisoned")
        .into_iter()
        .map(|r| r.expect("every chunk is processed"))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParallelPrefill { caches, wall_time })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    #[test]
    fn one_device_ring_is_single_prefill() {
        let p = CostModelParams {
            devices: 1,
            ..CostModelParams::default()
        };
        for n in [1024, 8192] {
            let a = estimate_ttft(&p, n, SpStrategy::SinglePrefill).unwrap();
            let b = estimate_ttft(&p, n, SpStrategy::RingAttention).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_ratio_free_links_divides_quadratic_work() {
        let p = CostModelParams {
            recompute_ratio: 0.0,
            seconds_per_byte: 1e-300,
            hop_latency: 0.0,
            prompt_len: 16,
            ..CostModelParams::default()
        };
        let n = 8192;
        let dims = &p.dims;
        // per-device chunk prefill of n/D tokens plus the prompt pass
        let chunk = prefill_flops(dims, n / 4).total() * p.seconds_per_flop;
        let l = dims.n_layers as f64;
        let m = 16.0;
        let selection = (l * m * (dims.projection_flops_per_token() + dims.mlp_flops_per_token())
            + l * dims.attention_flops_per_pair() * m * (n as f64 + m))
            * p.seconds_per_flop;
        let got = estimate_ttft(&p, n, SpStrategy::Ours).unwrap();
        assert!((got - (chunk + selection)).abs() / got < 1e-12);
        // the chunk term is the single-device cost split D ways on the linear
        // part and D² ways on the quadratic part
        let single = prefill_flops(dims, n);
        let split = prefill_flops(dims, n / 4);
        assert!((split.mlp * 4.0 - single.mlp).abs() < 1.0);
        assert!((split.attention * 16.0 / single.attention - 1.0).abs() < 1e-3);
    }

    #[test]
    fn recompute_cost_is_linear_in_k() {
        let dims = ModelDims::EIGHT_B;
        assert_eq!(recompute_flops(&dims, 0, 4096), 0.0);
        assert_eq!(
            recompute_flops(&dims, 200, 4096) * 2.0,
            recompute_flops(&dims, 400, 4096)
        );
    }

    #[test]
    fn speedup_table_shape() {
        let p = CostModelParams::default();
        let r: Vec<SimReport> = [8192, 16384, 32768]
            .iter()
            .map(|&n| simulate(&p, n).unwrap())
            .collect();
        for rep in &r {
            assert_eq!(rep.speedup(SpStrategy::SinglePrefill), 1.0);
            assert!(rep.get(SpStrategy::Ours).comm_bytes <= rep.get(SpStrategy::RingAttention).comm_bytes);
        }
        let single_8k = r[0].get(SpStrategy::SinglePrefill).ttft_s;
        assert!(single_8k > 0.4 && single_8k < 0.8, "{single_8k}");
        let gap: Vec<f64> = r
            .iter()
            .map(|x| x.speedup(SpStrategy::Ours) - x.speedup(SpStrategy::RingAttention))
            .collect();
        assert!(gap.windows(2).all(|w| w[1] >= w[0]), "{gap:?}");
        assert!(r[1].speedup(SpStrategy::Ours) > r[0].speedup(SpStrategy::Ours));
        assert!(r[2].speedup(SpStrategy::Ours) > r[1].speedup(SpStrategy::Ours));
    }

    #[test]
    fn strictly_increasing_in_length() {
        let p = CostModelParams::default();
        for s in SpStrategy::ALL {
            let mut prev = 0.0;
            for n in (4..20_000).step_by(997) {
                let t = estimate_ttft(&p, n, s).unwrap();
                assert!(t > prev, "{s} at {n}");
                prev = t;
            }
        }
    }

    #[test]
    fn invalid_inputs() {
        let p = CostModelParams::default();
        assert!(estimate_ttft(&p, 3, SpStrategy::Ours).is_err());
        let bad = CostModelParams {
            seconds_per_flop: 0.0,
            ..p.clone()
        };
        assert!(simulate(&bad, 100).is_err());
        assert!("warp".parse::<SpStrategy>().is_err());
        assert_eq!("ring-attention".parse::<SpStrategy>().unwrap(), SpStrategy::RingAttention);
    }

    #[test]
    fn params_file() {
        let p = CostModelParams::from_toml_str("devices = 8\nrecompute_ratio = 0.3\n").unwrap();
        assert_eq!(p.devices, 8);
        assert_eq!(p.seconds_per_flop, CostModelParams::default().seconds_per_flop);
        assert!(CostModelParams::from_toml_str("devices = 0").is_err());
        assert!(CostModelParams::from_toml_str("devices = [").is_err());
    }

    #[test]
    fn report_lines() {
        let text = simulate(&CostModelParams::default(), 8192).unwrap().to_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("single_prefill ttft_s="));
        assert!(lines[0].contains("speedup=1.000"));
    }

    #[test]
    fn parallel_prefill_is_schedule_independent() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_ff: 16,
            vocab_size: 32,
            rope_base: 10000.0,
            max_position: 64,
        };
        let w = init_weights::<f64>(&cfg, 1).unwrap();
        let chunks: Vec<ChunkSpec> = (0..5)
            .map(|i| ChunkSpec::new(i, (0..7).map(|t| (t * 3 + i as u32) % 32).collect(), i as usize))
            .collect();
        let one = run_parallel_prefill(&w, &chunks, 1).unwrap();
        let four = run_parallel_prefill(&w, &chunks, 4).unwrap();
        assert_eq!(one.caches, four.caches);
        assert!(run_parallel_prefill(&w, &[], 3).unwrap().caches.is_empty());
        let bad = vec![ChunkSpec::new(0, vec![], 0)];
        assert!(run_parallel_prefill(&w, &bad, 2).is_err());
    }

    #[test]
    fn four_workers_beat_one() {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        if cores < 4 {
            eprintln!("skipping: {cores} core(s) available");
            return;
        }
        let cfg = ModelConfig::default();
        let w = init_weights::<f64>(&cfg, 2).unwrap();
        let chunks: Vec<ChunkSpec> = (0..4)
            .map(|i| ChunkSpec::new(i, (0..512).map(|t| (t * 7 + i as u32) % 512).collect(), i as usize))
            .collect();
        let best = |workers| {
            (0..3)
                .map(|_| run_parallel_prefill(&w, &chunks, workers).unwrap().wall_time)
                .min()
                .unwrap()
        };
        let (serial, parallel) = (best(1), best(4));
        assert!(parallel < serial, "4 workers {parallel:?} vs 1 worker {serial:?}");
    }
}
