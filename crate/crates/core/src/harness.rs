//! Experiment harness: synthetic needle tasks, the end-to-end pipeline,
//! run records and sweeps.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fnv64;
use crate::kv_store::{assemble, cache_distance, digest_caches, prefill_chunk, prefill_full, ChunkKv};
use crate::model::{contiguous, init_weights, ForwardRequest, ModelConfig, TokenId, Weights};
use crate::positional::{rope_similarity_stats, ChunkSpec, GeometryMode};
use crate::recompute::{recompute_selected, RecomputePlan};
use crate::reorder::{reorder_and_reselect, ChunkScore, ReorderConfig};
use crate::selection::{select, Budget, SelectionConfig, Strategy};
use crate::tensor::{Matrix, Precision, Real};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Token id planted once in the context.
pub const NEEDLE_TOKEN: TokenId = 1;

/// Token id that ends the prompt and asks for the needle.
pub const QUERY_TOKEN: TokenId = 2;

/// Weight edits that make the needle the dominant attention target of the
/// query token at the capture layer.
///
/// Embeddings are rebuilt so that every head splits into fast and slow RoPE
/// pairs, with the pairs in between left empty. The fast pairs hold one
/// component shared by all tokens; RoPE turns it into a preference for
/// nearby keys. The slow pairs barely rotate over a context and hold token
/// content (random signs of unit size for ordinary tokens, so every ordinary token
/// has the same norm, and a fixed ±`needle_strength` pattern for the needle):
/// head 0 for ordinary tokens, head 1 for the needle, head 2 for the query
/// token. At the capture layer the key map is a scaled identity and the
/// query map keeps the fast pairs and moves head 2's slow pairs into head 1,
/// so the query token's content matches the needle and nothing else, and
/// every other prompt token attends by position alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeedleProbe {
    pub gain: f64,
    /// Size of each shared coordinate.
    pub shared: f64,
    /// Size of each needle content coordinate.
    pub needle_strength: f64,
    /// Multiplier on every embedding.
    pub embed_scale: f64,
    /// Multiplier on the attention output and MLP down projections of the
    /// layers before the capture layer, so hidden states reach it close to
    /// their embeddings.
    pub pre_capture_scale: f64,
    /// Leading RoPE pairs of each head that carry the shared component;
    /// defaults to half of them.
    pub fast_pairs: Option<usize>,
    /// Trailing RoPE pairs of each head that carry content; defaults to a
    /// quarter of them.
    pub slow_pairs: Option<usize>,
    /// Defaults to the model's attention-norm layer.
    pub capture_layer: Option<usize>,
}

impl Default for NeedleProbe {
    fn default() -> Self {
        Self {
            gain: 3.0,
            shared: 0.5,
            needle_strength: 2.0,
            embed_scale: 10.0,
            pre_capture_scale: 0.1,
            fast_pairs: None,
            slow_pairs: None,
            capture_layer: None,
        }
    }
}

const ORDINARY_HEAD: usize = 0;
const NEEDLE_HEAD: usize = 1;
const QUERY_HEAD: usize = 2;

pub fn needle_probe_weights<T: Real>(config: &ModelConfig, seed: u64, probe: &NeedleProbe) -> Result<Weights<T>> {
    let (heads, dh) = (config.n_heads, config.d_head);
    if heads * dh != config.d_model || heads < 3 {
        return Err(Error::config(
            "the needle probe needs at least 3 heads and n_heads * d_head == d_model",
        ));
    }
    if config.vocab_size < 8 {
        return Err(Error::config("the needle probe needs a vocabulary of at least 8"));
    }
    let pairs = dh / 2;
    let fast = probe.fast_pairs.unwrap_or(pairs / 2);
    let slow = probe.slow_pairs.unwrap_or((pairs / 4).max(1));
    if slow == 0 || fast + slow > pairs {
        return Err(Error::config(format!(
            "{fast} fast and {slow} slow pairs do not fit in {pairs} pairs"
        )));
    }
    let content_from = 2 * (pairs - slow);
    let layer = probe.capture_layer.unwrap_or_else(|| config.default_norm_layer());
    if layer >= config.n_layers {
        return Err(Error::IndexOutOfRange {
            index: layer,
            len: config.n_layers,
        });
    }
    let mut w = init_weights::<T>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_6564_6c65);
    let common: Vec<f64> = (0..2 * fast)
        .map(|_| if rng.random_bool(0.5) { probe.shared } else { -probe.shared })
        .collect();
    let content = w.embedding.clone();
    let needle: Vec<f64> = (0..dh)
        .map(|_| if rng.random_bool(0.5) { probe.needle_strength } else { -probe.needle_strength })
        .collect();
    for t in 0..config.vocab_size {
        let home = match t as TokenId {
            NEEDLE_TOKEN => NEEDLE_HEAD,
            QUERY_TOKEN => QUERY_HEAD,
            _ => ORDINARY_HEAD,
        };
        let row = w.embedding.row_mut(t);
        for h in 0..heads {
            for j in 0..dh {
                let v = if j < 2 * fast {
                    common[j]
                } else if j < content_from || h != home {
                    0.0
                } else if home == ORDINARY_HEAD {
                    content.get(t, j).as_f64().signum()
                } else {
                    needle[j]
                };
                row[h * dh + j] = T::of(v * probe.embed_scale);
            }
        }
    }
    let d = config.d_model;
    let mut wk = Matrix::zeros(d, d);
    let mut wq = Matrix::zeros(d, d);
    for h in 0..heads {
        for j in 0..dh {
            let i = h * dh + j;
            wk.set(i, i, T::of(probe.gain));
            if j < 2 * fast {
                wq.set(i, i, T::of(probe.gain));
            }
        }
    }
    for j in content_from..dh {
        // y = x·W: query head 1 reads the input's head 2
        wq.set(QUERY_HEAD * dh + j, NEEDLE_HEAD * dh + j, T::of(probe.gain));
    }
    w.layers[layer].wq = wq;
    w.layers[layer].wk = wk;
    let damp = T::of(probe.pre_capture_scale);
    for l in &mut w.layers[..layer] {
        l.wo.data_mut().iter_mut().for_each(|x| *x = *x * damp);
        l.w_down.data_mut().iter_mut().for_each(|x| *x = *x * damp);
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArgs {
    pub config: ModelConfig,
    pub seed: u64,
    /// Apply the needle probe on top of the seeded weights.
    pub probe: Option<NeedleProbe>,
    pub precision: Precision,
    /// Load weights from this file instead of building them.
    pub weights_path: Option<PathBuf>,
}

impl ModelArgs {
    pub fn seeded(config: ModelConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            probe: None,
            precision: Precision::F64,
            weights_path: None,
        }
    }

    pub fn probed(config: ModelConfig, seed: u64) -> Self {
        Self {
            probe: Some(NeedleProbe::default()),
            ..Self::seeded(config, seed)
        }
    }

    pub fn build<T: Real>(&self) -> Result<Weights<T>> {
        if let Some(p) = &self.weights_path {
            let w = Weights::<T>::load(p)?;
            if w.config() != &self.config {
                return Err(Error::config("weights file does not match the model config"));
            }
            return Ok(w);
        }
        match &self.probe {
            Some(p) => needle_probe_weights(&self.config, self.seed, p),
            None => init_weights(&self.config, self.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Needle,
    UniformNoise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chunking {
    FixedSize(usize),
    /// Start indices of every chunk after the first.
    PassageSplit(Vec<usize>),
}

impl Chunking {
    pub fn lengths(&self, total: usize) -> Result<Vec<usize>> {
        match self {
            Chunking::FixedSize(0) => Err(Error::config("chunk size must be positive")),
            Chunking::FixedSize(s) => Ok((0..total).step_by(*s).map(|i| (*s).min(total - i)).collect()),
            Chunking::PassageSplit(cuts) => {
                let mut prev = 0;
                let mut out = Vec::with_capacity(cuts.len() + 1);
                for &c in cuts.iter().chain(std::iter::once(&total)) {
                    if c <= prev || c > total {
                        return Err(Error::config(format!(
                            "passage boundaries {cuts:?} must increase strictly inside 1..{total}"
                        )));
                    }
                    out.push(c - prev);
                    prev = c;
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub total_len: usize,
    /// Needle position as a fraction of the context; drawn from the task
    /// seed when absent.
    pub depth: Option<f64>,
    pub chunking: Chunking,
    pub prompt_len: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self::needle(256, 64)
    }
}

impl SyntheticTask {
    pub fn needle(total_len: usize, chunk_size: usize) -> Self {
        Self {
            kind: TaskKind::Needle,
            total_len,
            depth: None,
            chunking: Chunking::FixedSize(chunk_size),
            prompt_len: 8,
        }
    }

    pub fn with_depth(mut self, depth: f64) -> Self {
        self.depth = Some(depth);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTask {
    pub chunks: Vec<ChunkSpec>,
    pub prompt: Vec<TokenId>,
    /// Global context index of the needle.
    pub needle: Option<usize>,
}

impl GeneratedTask {
    pub fn context(&self) -> Vec<TokenId> {
        self.chunks.iter().flat_map(|c| c.token_ids.iter().copied()).collect()
    }
}

/// Context noise comes from the upper half of the vocabulary and prompt
/// filler from the lower half (above the reserved ids). Needle tasks end the
/// prompt with the query token.
pub fn generate_task(spec: &SyntheticTask, seed: u64, vocab_size: usize) -> Result<GeneratedTask> {
    if vocab_size < 6 {
        return Err(Error::config("vocabulary too small for synthetic tasks"));
    }
    if spec.total_len == 0 || spec.prompt_len == 0 {
        return Err(Error::config("context and prompt must be nonempty"));
    }
    let lengths = spec.chunking.lengths(spec.total_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = (vocab_size / 2) as TokenId;
    let mut context: Vec<TokenId> = (0..spec.total_len)
        .map(|_| rng.random_range(half..vocab_size as TokenId))
        .collect();
    let mut prompt: Vec<TokenId> = (0..spec.prompt_len).map(|_| rng.random_range(3..half)).collect();
    let needle = match spec.kind {
        TaskKind::UniformNoise => None,
        TaskKind::Needle => {
            let depth = match spec.depth {
                Some(d) => d,
                None => rng.random_range(0.0..1.0),
            };
            if !(0.0..=1.0).contains(&depth) {
                return Err(Error::config(format!("needle depth {depth} outside [0, 1]")));
            }
            let idx = (depth * (spec.total_len - 1) as f64).round() as usize;
            if idx >= spec.total_len {
                return Err(Error::config("needle beyond the context"));
            }
            context[idx] = NEEDLE_TOKEN;
            *prompt.last_mut().unwrap() = QUERY_TOKEN;
            Some(idx)
        }
    };
    let mut chunks = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for (i, len) in lengths.into_iter().enumerate() {
        chunks.push(ChunkSpec::new(i as u64, context[start..start + len].to_vec(), i));
        start += len;
    }
    Ok(GeneratedTask { chunks, prompt, needle })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub selection: SelectionConfig,
    pub reorder: bool,
    pub chunk_score: ChunkScore,
}

impl RunConfig {
    pub fn new(selection: SelectionConfig) -> Self {
        Self {
            selection,
            reorder: false,
            chunk_score: ChunkScore::Sum,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prefill_s: f64,
    pub select_s: f64,
    pub recompute_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Frobenius distance of the context KV (at global positions) to a full
    /// prefill of the same context order.
    pub cache_fidelity: f64,
    /// Largest logit difference at the first generated position.
    pub logit_fidelity: f64,
    pub mom: Option<f64>,
    pub max: Option<f64>,
    pub needle_hit: Option<bool>,
    pub ttft: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHashes {
    pub model_fingerprint: u64,
    pub task: u64,
    pub chunk_caches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    /// Free-form name used to group records in reports.
    pub label: String,
    pub model: ModelArgs,
    pub task: SyntheticTask,
    pub task_seed: u64,
    pub run: RunConfig,
    /// Chunk ids in the order the final cache was assembled.
    pub chunk_order: Vec<u64>,
    pub selected: Vec<usize>,
    pub needle_index: Option<usize>,
    pub metrics: Metrics,
    pub unix_time: u64,
    pub hashes: ArtifactHashes,
}

impl RunRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let r: RunRecord =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("bad run record: {e}")))?;
        if r.schema_version != RECORD_SCHEMA_VERSION {
            return Err(Error::Version {
                found: r.schema_version,
                expected: RECORD_SCHEMA_VERSION,
            });
        }
        Ok(r)
    }

    /// Runs the recorded configuration again.
    pub fn replay(&self) -> Result<RunRecord> {
        let mut r = run_pipeline(&self.model, &self.task, self.task_seed, &self.run)?;
        r.label = self.label.clone();
        Ok(r)
    }

    /// Everything except wall-clock fields.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let strip = |r: &RunRecord| {
            let mut r = r.clone();
            r.metrics.ttft = Timings::default();
            r.unix_time = 0;
            r
        };
        strip(self) == strip(other)
    }
}

fn hash_task(task: &GeneratedTask) -> u64 {
    let mut h = Fnv64::new();
    for c in &task.chunks {
        h.update(&c.chunk_id.0.to_le_bytes());
        for t in &c.token_ids {
            h.update(&t.to_le_bytes());
        }
    }
    for t in &task.prompt {
        h.update(&t.to_le_bytes());
    }
    h.finish()
}

/// Prefill → assemble → (reorder) → select → recompute → one decode step,
/// compared against a full prefill of the same context order.
pub fn run_pipeline(
    model: &ModelArgs,
    task: &SyntheticTask,
    task_seed: u64,
    run: &RunConfig,
) -> Result<RunRecord> {
    match model.precision {
        Precision::F32 => run_typed::<f32>(model, task, task_seed, run),
        Precision::F64 => run_typed::<f64>(model, task, task_seed, run),
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn run_typed<T: Real>(
    model: &ModelArgs,
    task: &SyntheticTask,
    task_seed: u64,
    run: &RunConfig,
) -> Result<RunRecord> {
    let weights = model.build::<T>()?;
    let cfg = *weights.config();
    let generated = generate_task(task, task_seed, cfg.vocab_size)?;
    let start = Instant::now();
    let caches: Vec<ChunkKv<T>> = generated
        .chunks
        .iter()
        .map(|c| prefill_chunk(&weights, c))
        .collect::<Result<_>>()?;
    let prefill_s = secs(start);

    let t = Instant::now();
    let (chunks, cache, selection) = if run.reorder {
        let rc = ReorderConfig {
            aggregator: run.chunk_score,
            sequential_input: false,
        };
        let (plan, cache, sel) =
            reorder_and_reselect(&weights, &generated.chunks, &caches, &generated.prompt, &run.selection, &rc)?;
        let chunks: Vec<ChunkSpec> = plan.permutation.iter().map(|&i| generated.chunks[i].clone()).collect();
        (chunks, cache, sel)
    } else {
        let cache = assemble(&caches, None)?;
        let sel = select(&weights, &cache, &generated.chunks, &generated.prompt, &run.selection)?;
        (generated.chunks.clone(), cache, sel)
    };
    let select_s = secs(t);

    let needle_index = generated.needle.map(|g| {
        let (mut chunk, mut off) = (0, g);
        while off >= generated.chunks[chunk].local_length() {
            off -= generated.chunks[chunk].local_length();
            chunk += 1;
        }
        let id = generated.chunks[chunk].chunk_id;
        cache.global_index(id, off).expect("needle chunk is assembled")
    });

    let t = Instant::now();
    let plan = RecomputePlan::global(&chunks, selection.selected.clone())?;
    let recomputed = recompute_selected(&weights, &cache, &plan)?;
    let recompute_s = secs(t);

    let n = recomputed.context_len();
    let t = Instant::now();
    let context_kv = recomputed.context_kv_at(&contiguous(n), cfg.d_head, cfg.rope_base)?;
    let prompt_pos: Vec<usize> = (n..n + generated.prompt.len()).collect();
    let decoded = weights.forward(&ForwardRequest::causal(&generated.prompt, &prompt_pos).with_prefix(&context_kv))?;
    let decode_s = secs(t);
    let total_s = secs(start);

    let context: Vec<TokenId> = chunks.iter().flat_map(|c| c.token_ids.iter().copied()).collect();
    let reference = prefill_full(&weights, &context)?;
    let full_tokens: Vec<TokenId> = context.iter().chain(&generated.prompt).copied().collect();
    let full_pos = contiguous(full_tokens.len());
    let full_logits = weights.forward(&ForwardRequest::causal(&full_tokens, &full_pos))?.logits;
    let logit_fidelity = decoded
        .logits
        .iter()
        .zip(&full_logits)
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .fold(0.0, f64::max);

    let sim = if selection.selected.is_empty() {
        None
    } else {
        let d = cfg.d_head;
        Some(rope_similarity_stats(&prompt_pos, &selection.selected, d, cfg.rope_base)?)
    };
    let metrics = Metrics {
        cache_fidelity: cache_distance(&context_kv, &reference.layers),
        logit_fidelity,
        mom: sim.map(|s| s.mom),
        max: sim.map(|s| s.max),
        needle_hit: needle_index.map(|i| selection.selected.binary_search(&i).is_ok()),
        ttft: Timings {
            prefill_s,
            select_s,
            recompute_s,
            decode_s,
            total_s,
        },
    };
    Ok(RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        label: run.selection.strategy.name().to_string(),
        model: model.clone(),
        task: task.clone(),
        task_seed,
        run: run.clone(),
        chunk_order: chunks.iter().map(|c| c.chunk_id.0).collect(),
        selected: selection.selected,
        needle_index,
        metrics,
        unix_time: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        hashes: ArtifactHashes {
            model_fingerprint: weights.fingerprint(),
            task: hash_task(&generated),
            chunk_caches: digest_caches(&caches),
        },
    })
}

/// Appends records as JSON lines through one lock.
pub struct RecordWriter {
    out: Mutex<BufWriter<File>>,
    path: PathBuf,
}

impl RecordWriter {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(file)),
            path,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&self, record: &RunRecord) -> Result<()> {
        let mut out = self.out.lock().expect("record writer poisoned");
        writeln!(out, "{}", record.to_json_line())?;
        out.flush()?;
        Ok(())
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(RunRecord::from_json_line)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub label: String,
    pub task_seed: u64,
    pub run: RunConfig,
}

/// Runs `jobs` on `workers` threads; results keep the job order.
pub fn run_jobs(
    model: &ModelArgs,
    task: &SyntheticTask,
    jobs: &[Job],
    workers: usize,
    writer: Option<&RecordWriter>,
) -> Result<Vec<RunRecord>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = run_pipeline(model, task, job.task_seed, &job.run).and_then(|mut r| {
                    r.label = job.label.clone();
                    if let Some(w) = writer {
                        w.write(&r)?;
                    }
                    Ok(r)
                });
                slots.lock().expect("job slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("job slots poisoned")
        .into_iter()
        .map(|r| r.expect("every job runs"))
        .collect()
}

/// Every seed under every geometry, attention-norm selection at `budget`.
pub fn geometry_jobs(seeds: &[u64], budget: Budget, base: &SelectionConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &seed in seeds {
        for g in GeometryMode::ALL {
            let mut selection = base.clone();
            selection.strategy = Strategy::AttentionNorm;
            selection.budget = budget;
            selection.geometry = g;
            jobs.push(Job {
                label: g.name().to_string(),
                task_seed: seed,
                run: RunConfig::new(selection),
            });
        }
    }
    jobs
}

/// Every seed at every ratio.
pub fn budget_jobs(seeds: &[u64], ratios: &[f64], base: &SelectionConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &seed in seeds {
        for &r in ratios {
            let mut selection = base.clone();
            selection.budget = Budget::Ratio(r);
            jobs.push(Job {
                label: format!("{r}"),
                task_seed: seed,
                run: RunConfig::new(selection),
            });
        }
    }
    jobs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: String,
    pub runs: usize,
    pub hit_rate: Option<f64>,
    pub mean_cache_fidelity: f64,
    pub mean_logit_fidelity: f64,
}

/// Per-label means, in first-appearance order.
pub fn summarize(records: &[RunRecord]) -> Vec<GroupSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        if !groups.contains_key(&r.label) {
            order.push(r.label.clone());
        }
        groups.entry(r.label.clone()).or_default().push(r);
    }
    order
        .into_iter()
        .map(|label| {
            let rs = &groups[&label];
            let n = rs.len() as f64;
            let hits: Vec<bool> = rs.iter().filter_map(|r| r.metrics.needle_hit).collect();
            GroupSummary {
                runs: rs.len(),
                hit_rate: (!hits.is_empty())
                    .then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64),
                mean_cache_fidelity: rs.iter().map(|r| r.metrics.cache_fidelity).sum::<f64>() / n,
                mean_logit_fidelity: rs.iter().map(|r| r.metrics.logit_fidelity).sum::<f64>() / n,
                label,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub label: String,
    pub runs: usize,
    pub mom: f64,
    pub max: f64,
}

/// Mean MoM and Max similarity per label.
pub fn report_similarity(records: &[RunRecord]) -> Result<Vec<SimilarityRow>> {
    let first = records.first().ok_or_else(|| Error::config("no records to report"))?;
    if records.iter().any(|r| r.model.config != first.model.config) {
        return Err(Error::config("records come from different model configs"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for r in records {
        let (Some(mom), Some(max)) = (r.metrics.mom, r.metrics.max) else {
            continue;
        };
        let e = acc.entry(r.label.clone()).or_insert_with(|| {
            order.push(r.label.clone());
            (0, 0.0, 0.0)
        });
        e.0 += 1;
        e.1 += mom;
        e.2 += max;
    }
    if order.is_empty() {
        return Err(Error::config("no record selected any tokens"));
    }
    Ok(order
        .into_iter()
        .map(|label| {
            let (n, mom, max) = acc[&label];
            SimilarityRow {
                label,
                runs: n,
                mom: mom / n as f64,
                max: max / n as f64,
            }
        })
        .collect())
}

/// The default toy model for needle experiments.
pub fn toy_config() -> ModelConfig {
    ModelConfig::default()
}
