mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use infoflow_kv::harness::{
    budget_jobs, generate_task, geometry_jobs, read_records, report_similarity, run_jobs,
    run_pipeline, summarize, Chunking, Job, ModelArgs, NeedleProbe, RecordWriter, RunConfig,
    RunRecord, SyntheticTask, TaskKind,
};
use infoflow_kv::kv_store::{
    assemble, cache_distance, cache_max_abs_diff, digest_caches, inspect_cache, prefill_chunk,
    prefill_full, CacheRegistry, ChunkKv,
};
use infoflow_kv::model::contiguous;
use infoflow_kv::positional::{rope_similarity_stats, ChunkSpec, GeometryMode};
use infoflow_kv::recompute::{measure_overhead, recompute_selected, RecomputePlan};
use infoflow_kv::reorder::ChunkScore;
use infoflow_kv::selection::{select, Budget, SelectionConfig, Strategy};
use infoflow_kv::seqpar::{simulate, CostModelParams};
use infoflow_kv::{Error, Precision, Real, Result, TokenId, Weights};
use serde_json::json;

use config::FileConfig;

#[derive(Parser, Debug)]
#[command(name = "ifkv", version, about = "Chunk-wise KV prefilling with selective recomputation")]
struct Cli {
    /// Model weight seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "f32|f64")]
    precision: Option<Precision>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Plant the needle-retrieval probe in the generated weights.
    #[arg(long, global = true)]
    probe: bool,
    /// Load model weights from a file.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct TaskArgs {
    /// Seed of the synthetic task.
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    /// Context length.
    #[arg(long)]
    len: Option<usize>,
    #[arg(long, conflicts_with = "cuts")]
    chunk_size: Option<usize>,
    /// Passage boundaries: start index of every chunk after the first.
    #[arg(long, value_delimiter = ',')]
    cuts: Option<Vec<usize>>,
    /// Needle depth in [0, 1].
    #[arg(long)]
    depth: Option<f64>,
    #[arg(long)]
    prompt_len: Option<usize>,
    /// Uniform noise context without a needle.
    #[arg(long)]
    noise: bool,
}

#[derive(Args, Debug, Clone)]
struct ContextArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// Explicit context tokens (comma separated) instead of a synthetic task.
    #[arg(long, value_delimiter = ',', requires = "prompt")]
    context: Option<Vec<TokenId>>,
    /// Prompt tokens for an explicit context.
    #[arg(long, value_delimiter = ',', requires = "context")]
    prompt: Option<Vec<TokenId>>,
    /// Store and reuse chunk caches in this directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SelectArgs {
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long, conflicts_with = "count")]
    ratio: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    geometry: Option<GeometryMode>,
    #[arg(long)]
    norm_layer: Option<usize>,
    #[arg(long)]
    prompt_offset: Option<usize>,
    /// Seed of the random selector.
    #[arg(long)]
    selection_seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct SweepArgs {
    /// Number of task seeds.
    #[arg(long, default_value_t = 50)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    /// Append run records to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Prefill every chunk on its own and store the caches.
    Prefill {
        #[command(flatten)]
        ctx: ContextArgs,
    },
    /// Concatenate chunk caches and describe the result.
    Assemble {
        #[command(flatten)]
        ctx: ContextArgs,
    },
    /// Score context tokens and choose the ones to recompute.
    Select {
        #[command(flatten)]
        ctx: ContextArgs,
        #[command(flatten)]
        sel: SelectArgs,
    },
    /// Select, recompute, and compare against a full prefill.
    Recompute {
        #[command(flatten)]
        ctx: ContextArgs,
        #[command(flatten)]
        sel: SelectArgs,
        /// Also time the recomputation over this many repetitions.
        #[arg(long)]
        overhead: Option<usize>,
    },
    /// Run the whole pipeline on a synthetic task and emit a run record.
    Run {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        sel: SelectArgs,
        /// Move informative chunks next to the prompt before selecting.
        #[arg(long)]
        reorder: bool,
        #[arg(long)]
        chunk_score: Option<ChunkScore>,
        /// Append the record to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Re-run every record in this file and check the outcomes match.
        #[arg(long, conflicts_with = "out")]
        replay: Option<PathBuf>,
    },
    /// Attention-norm selection under each positional layout.
    SweepGeometry {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        sel: SelectArgs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// One selector over a range of budgets.
    SweepBudget {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        sel: SelectArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.15,0.3,0.6,1")]
        ratios: Vec<f64>,
    },
    /// Needle retrieval with the probe model, one line per seed.
    Needle {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        sel: SelectArgs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// RoPE similarity between prompt and selected positions.
    RopeSim {
        /// Report per-label means over a record file.
        #[arg(long, conflicts_with_all = ["selected", "prompt_start"])]
        records: Option<PathBuf>,
        #[arg(long)]
        prompt_start: Option<usize>,
        #[arg(long, default_value_t = 8)]
        prompt_len: usize,
        #[arg(long, value_delimiter = ',')]
        selected: Option<Vec<usize>>,
        /// Rotary dimension; defaults to the model's head width.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Time-to-first-token estimates under sequence parallelism.
    SimulateSp {
        #[arg(long)]
        devices: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "8192,16384,32768")]
        seqlen: Vec<usize>,
        #[arg(long)]
        ratio: Option<f64>,
        /// TOML file of cost-model parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Cache file utilities.
    Cache {
        #[command(subcommand)]
        command: CacheCommand,
    },
}

#[derive(Subcommand, Debug)]
enum CacheCommand {
    /// Print the header of a cache file after verifying its checksum.
    Inspect { file: PathBuf },
}

struct Env {
    cfg: FileConfig,
}

impl Env {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(p) = cli.precision {
            cfg.precision = p;
        }
        cfg.probe |= cli.probe;
        if cli.weights.is_some() {
            cfg.weights = cli.weights.clone();
        }
        Ok(Self { cfg })
    }

    fn model(&self) -> ModelArgs {
        self.cfg.model_args()
    }

    fn task(&self, args: &TaskArgs) -> SyntheticTask {
        let mut t = self.cfg.task.clone();
        if let Some(n) = args.len {
            t.total_len = n;
        }
        if let Some(s) = args.chunk_size {
            t.chunking = Chunking::FixedSize(s);
        }
        if let Some(c) = &args.cuts {
            t.chunking = Chunking::PassageSplit(c.clone());
        }
        if args.depth.is_some() {
            t.depth = args.depth;
        }
        if let Some(p) = args.prompt_len {
            t.prompt_len = p;
        }
        if args.noise {
            t.kind = TaskKind::UniformNoise;
        }
        t
    }

    fn selection(&self, args: &SelectArgs) -> SelectionConfig {
        let mut s = self.cfg.selection.clone();
        if let Some(st) = args.strategy {
            s.strategy = st;
        }
        if let Some(r) = args.ratio {
            s.budget = Budget::Ratio(r);
        }
        if let Some(k) = args.count {
            s.budget = Budget::Count(k);
        }
        if let Some(g) = args.geometry {
            s.geometry = g;
        }
        if args.norm_layer.is_some() {
            s.norm_layer = args.norm_layer;
        }
        if args.prompt_offset.is_some() {
            s.prompt_offset = args.prompt_offset;
        }
        if let Some(seed) = args.selection_seed {
            s.seed = seed;
        }
        s
    }
}

struct Context {
    chunks: Vec<ChunkSpec>,
    prompt: Vec<TokenId>,
    needle: Option<usize>,
}

fn context(env: &Env, args: &ContextArgs) -> Result<Context> {
    let task = env.task(&args.task);
    match (&args.context, &args.prompt) {
        (Some(tokens), Some(prompt)) => {
            if tokens.is_empty() || prompt.is_empty() {
                return Err(Error::Config("context and prompt must be nonempty".into()));
            }
            let mut chunks = Vec::new();
            let mut start = 0;
            for (i, len) in task.chunking.lengths(tokens.len())?.into_iter().enumerate() {
                chunks.push(ChunkSpec::new(i as u64, tokens[start..start + len].to_vec(), i));
                start += len;
            }
            Ok(Context {
                chunks,
                prompt: prompt.clone(),
                needle: None,
            })
        }
        _ => {
            let g = generate_task(&task, args.task.task_seed, env.cfg.model.vocab_size)?;
            Ok(Context {
                chunks: g.chunks,
                prompt: g.prompt,
                needle: g.needle,
            })
        }
    }
}

struct Prepared<T> {
    weights: Weights<T>,
    ctx: Context,
    caches: Vec<ChunkKv<T>>,
    reused: Vec<bool>,
    paths: Vec<Option<PathBuf>>,
}

fn prepare<T: Real>(env: &Env, args: &ContextArgs) -> Result<Prepared<T>> {
    let weights = env.model().build::<T>()?;
    let ctx = context(env, args)?;
    let registry = args.cache_dir.as_ref().map(CacheRegistry::open).transpose()?;
    let (mut caches, mut reused, mut paths) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in &ctx.chunks {
        match &registry {
            Some(r) => {
                let (kv, hit) = r.get_or_prefill(&weights, chunk)?;
                caches.push(kv);
                reused.push(hit);
                paths.push(Some(r.path_for(weights.fingerprint(), chunk)));
            }
            None => {
                caches.push(prefill_chunk(&weights, chunk)?);
                reused.push(false);
                paths.push(None);
            }
        }
    }
    Ok(Prepared {
        weights,
        ctx,
        caches,
        reused,
        paths,
    })
}

/// Writes one line to stdout; a closed pipe ends the process quietly.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{line}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        panic!("writing to stdout: {e}");
    }
}

macro_rules! say {
    ($($t:tt)*) => {
        emit(&format!($($t)*))
    };
}

fn print_json(v: &serde_json::Value) {
    emit(&serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn prefill_cmd<T: Real>(env: &Env, args: &ContextArgs) -> Result<()> {
    if args.cache_dir.is_none() {
        return Err(Error::Config("prefill needs --cache-dir".into()));
    }
    let p = prepare::<T>(env, args)?;
    let rows: Vec<_> = p
        .caches
        .iter()
        .zip(&p.reused)
        .zip(&p.paths)
        .map(|((c, hit), path)| {
            json!({
                "chunk_id": c.chunk_id.0,
                "length": c.len(),
                "reused": hit,
                "path": path,
            })
        })
        .collect();
    print_json(&json!({
        "model_fingerprint": format!("{:016x}", p.weights.fingerprint()),
        "chunks": rows,
    }));
    Ok(())
}

fn assemble_cmd<T: Real>(env: &Env, args: &ContextArgs) -> Result<()> {
    let p = prepare::<T>(env, args)?;
    let cache = assemble(&p.caches, None)?;
    print_json(&json!({
        "chunk_ids": cache.chunk_ids.iter().map(|c| c.0).collect::<Vec<_>>(),
        "chunk_lengths": cache.chunk_lengths,
        "chunk_offsets": cache.chunk_offsets(),
        "context_len": cache.context_len(),
        "n_layers": cache.n_layers(),
        "model_fingerprint": cache.model_fingerprint.map(|f| format!("{f:016x}")),
        "cache_digest": format!("{:016x}", digest_caches(&p.caches)),
        "prompt": p.ctx.prompt,
    }));
    Ok(())
}

fn select_cmd<T: Real>(env: &Env, args: &ContextArgs, sel: &SelectArgs) -> Result<()> {
    let p = prepare::<T>(env, args)?;
    let cfg = env.selection(sel);
    let cache = assemble(&p.caches, None)?;
    let r = select(&p.weights, &cache, &p.ctx.chunks, &p.ctx.prompt, &cfg)?;
    print_json(&json!({
        "strategy": r.strategy,
        "geometry": r.geometry,
        "norm_layer": r.norm_layer,
        "k": r.selected.len(),
        "selected": r.selected,
        "needle_index": p.ctx.needle,
        "needle_hit": p.ctx.needle.map(|i| r.selected.binary_search(&i).is_ok()),
        "scores": r.scores,
    }));
    Ok(())
}

fn recompute_cmd<T: Real>(
    env: &Env,
    args: &ContextArgs,
    sel: &SelectArgs,
    overhead: Option<usize>,
) -> Result<()> {
    let p = prepare::<T>(env, args)?;
    let mcfg = *p.weights.config();
    let cache = assemble(&p.caches, None)?;
    let r = select(&p.weights, &cache, &p.ctx.chunks, &p.ctx.prompt, &env.selection(sel))?;
    let plan = RecomputePlan::global(&p.ctx.chunks, r.selected)?;
    let out = recompute_selected(&p.weights, &cache, &plan)?;
    let n = cache.context_len();
    let at_global = |c: &infoflow_kv::kv_store::AssembledCache<T>| {
        c.context_kv_at(&contiguous(n), mcfg.d_head, mcfg.rope_base)
    };
    let (before, after) = (at_global(&cache)?, at_global(&out)?);
    let tokens: Vec<TokenId> = p.ctx.chunks.iter().flat_map(|c| c.token_ids.iter().copied()).collect();
    let reference = prefill_full(&p.weights, &tokens)?;
    let report = overhead
        .map(|reps| measure_overhead(&p.weights, &cache, &plan, reps))
        .transpose()?;
    print_json(&json!({
        "selected": plan.selected,
        "context_len": n,
        "cache_fidelity_before": cache_distance(&before, &reference.layers),
        "cache_fidelity_after": cache_distance(&after, &reference.layers),
        "max_abs_diff_after": cache_max_abs_diff(&after, &reference.layers),
        "overhead": report,
    }));
    Ok(())
}

fn open_writer(path: &Option<PathBuf>) -> Result<Option<RecordWriter>> {
    path.as_ref().map(RecordWriter::append).transpose()
}

fn workers(sweep: &SweepArgs) -> usize {
    sweep
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn seeds(sweep: &SweepArgs) -> Vec<u64> {
    (sweep.first_seed..sweep.first_seed + sweep.seeds).collect()
}

fn print_summary(records: &[RunRecord]) {
    say!("label\truns\thit_rate\tmean_cache_fidelity\tmean_logit_fidelity");
    for s in summarize(records) {
        let hit = s.hit_rate.map_or("-".to_string(), |h| format!("{h:.4}"));
        say!(
            "{}\t{}\t{hit}\t{:.6e}\t{:.6e}",
            s.label, s.runs, s.mean_cache_fidelity, s.mean_logit_fidelity
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn run_cmd(
    env: &Env,
    task: &TaskArgs,
    sel: &SelectArgs,
    reorder: bool,
    chunk_score: Option<ChunkScore>,
    out: &Option<PathBuf>,
    replay: &Option<PathBuf>,
) -> Result<()> {
    if let Some(path) = replay {
        let records = read_records(path)?;
        let mut differing = 0;
        for r in &records {
            let again = r.replay()?;
            let same = r.same_outcome(&again);
            differing += usize::from(!same);
            say!("{}\tseed={}\t{}", r.label, r.task_seed, if same { "identical" } else { "DIFFERS" });
        }
        say!("replayed {} records, {differing} differ", records.len());
        if differing > 0 {
            return Err(Error::Format(format!("{differing} records did not replay identically")));
        }
        return Ok(());
    }
    let mut run = RunConfig::new(env.selection(sel));
    run.reorder = reorder || env.cfg.run.reorder;
    run.chunk_score = chunk_score.unwrap_or(env.cfg.run.chunk_score);
    let record = run_pipeline(&env.model(), &env.task(task), task.task_seed, &run)?;
    if let Some(w) = open_writer(out)? {
        w.write(&record)?;
    }
    say!("{}", record.to_json_line());
    Ok(())
}

fn sweep(model: &ModelArgs, task: &SyntheticTask, jobs: &[Job], sw: &SweepArgs) -> Result<Vec<RunRecord>> {
    let writer = open_writer(&sw.out)?;
    run_jobs(model, task, jobs, workers(sw), writer.as_ref())
}

fn needle_cmd(env: &Env, task_args: &TaskArgs, sel: &SelectArgs, sw: &SweepArgs) -> Result<()> {
    let mut model = env.model();
    if model.weights_path.is_none() && model.probe.is_none() {
        model.probe = Some(NeedleProbe::default());
    }
    let mut task = env.task(task_args);
    task.kind = TaskKind::Needle;
    let selection = env.selection(sel);
    let jobs: Vec<Job> = seeds(sw)
        .into_iter()
        .map(|s| Job {
            label: selection.strategy.name().to_string(),
            task_seed: s,
            run: RunConfig::new(selection.clone()),
        })
        .collect();
    let records = sweep(&model, &task, &jobs, sw)?;
    say!("seed\tneedle_index\thit\tselected");
    for r in &records {
        say!(
            "{}\t{}\t{}\t{}",
            r.task_seed,
            r.needle_index.map_or("-".into(), |i| i.to_string()),
            r.metrics.needle_hit.unwrap_or(false),
            r.selected.len()
        );
    }
    print_summary(&records);
    Ok(())
}

fn rope_sim_cmd(
    env: &Env,
    records: &Option<PathBuf>,
    prompt_start: Option<usize>,
    prompt_len: usize,
    selected: &Option<Vec<usize>>,
    dim: Option<usize>,
) -> Result<()> {
    if let Some(path) = records {
        say!("label\truns\tmom\tmax");
        for row in report_similarity(&read_records(path)?)? {
            say!("{}\t{}\t{:.6}\t{:.6}", row.label, row.runs, row.mom, row.max);
        }
        return Ok(());
    }
    let selected = selected
        .as_ref()
        .ok_or_else(|| Error::Config("rope-sim needs --records or --selected".into()))?;
    let start = prompt_start.unwrap_or_else(|| selected.iter().max().map_or(0, |m| m + 1));
    let prompt: Vec<usize> = (start..start + prompt_len).collect();
    let d = dim.unwrap_or(env.cfg.model.d_head);
    let stats = rope_similarity_stats(&prompt, selected, d, env.cfg.model.rope_base)?;
    print_json(&json!({ "mom": stats.mom, "max": stats.max, "dim": d, "prompt_positions": prompt }));
    Ok(())
}

fn simulate_cmd(
    env: &Env,
    devices: Option<usize>,
    seqlen: &[usize],
    ratio: Option<f64>,
    params: &Option<PathBuf>,
    as_json: bool,
) -> Result<()> {
    let mut p = match params {
        Some(path) => CostModelParams::load(path)?,
        None => env.cfg.cost.clone(),
    };
    if let Some(d) = devices {
        p.devices = d;
    }
    if let Some(r) = ratio {
        p.recompute_ratio = r;
    }
    p.validate()?;
    let reports = seqlen.iter().map(|&n| simulate(&p, n)).collect::<Result<Vec<_>>>()?;
    if as_json {
        print_json(&serde_json::to_value(&reports).expect("reports serialize"));
    } else {
        for r in &reports {
            say!("seq_len={} devices={} ratio={}", r.seq_len, r.devices, r.recompute_ratio);
            say!("{}", r.to_string().trim_end());
        }
    }
    Ok(())
}

fn inspect_cmd(file: &Path) -> Result<()> {
    let header = inspect_cache(&std::fs::read(file)?)?;
    print_json(&serde_json::to_value(&header).expect("headers serialize"));
    Ok(())
}

macro_rules! typed {
    ($env:expr, $f:ident($($arg:expr),*)) => {
        match $env.cfg.precision {
            Precision::F32 => $f::<f32>($env, $($arg),*),
            Precision::F64 => $f::<f64>($env, $($arg),*),
        }
    };
}

fn dispatch(cli: &Cli) -> Result<()> {
    let env = Env::new(cli)?;
    let env = &env;
    match &cli.command {
        Command::Prefill { ctx } => typed!(env, prefill_cmd(ctx)),
        Command::Assemble { ctx } => typed!(env, assemble_cmd(ctx)),
        Command::Select { ctx, sel } => typed!(env, select_cmd(ctx, sel)),
        Command::Recompute { ctx, sel, overhead } => typed!(env, recompute_cmd(ctx, sel, *overhead)),
        Command::Run {
            task,
            sel,
            reorder,
            chunk_score,
            out,
            replay,
        } => run_cmd(env, task, sel, *reorder, *chunk_score, out, replay),
        Command::SweepGeometry { task, sel, sweep: sw } => {
            let base = env.selection(sel);
            let jobs = geometry_jobs(&seeds(sw), base.budget, &base);
            let records = sweep(&env.model(), &env.task(task), &jobs, sw)?;
            print_summary(&records);
            Ok(())
        }
        Command::SweepBudget {
            task,
            sel,
            sweep: sw,
            ratios,
        } => {
            let jobs = budget_jobs(&seeds(sw), ratios, &env.selection(sel));
            let records = sweep(&env.model(), &env.task(task), &jobs, sw)?;
            print_summary(&records);
            Ok(())
        }
        Command::Needle { task, sel, sweep: sw } => needle_cmd(env, task, sel, sw),
        Command::RopeSim {
            records,
            prompt_start,
            prompt_len,
            selected,
            dim,
        } => rope_sim_cmd(env, records, *prompt_start, *prompt_len, selected, *dim),
        Command::SimulateSp {
            devices,
            seqlen,
            ratio,
            params,
            json,
        } => simulate_cmd(env, *devices, seqlen, *ratio, params, *json),
        Command::Cache {
            command: CacheCommand::Inspect { file },
        } => inspect_cmd(file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ifkv: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
