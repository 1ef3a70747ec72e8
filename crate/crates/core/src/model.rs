//! A small pre-norm decoder: RMS normalisation, multi-head causal attention
//! with rotary positions, and a gated two-layer MLP.
//!
//! The forward pass takes per-token positions, an attention mask and an
//! optional KV prefix from the caller, so the same code path serves full
//! prefill, chunk-local prefill, prompt scoring over a reused cache and
//! incremental decoding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fnv64;
use crate::rope;
use crate::tensor::{Matrix, Precision, Real};

pub type TokenId = u32;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub max_position: usize,
}

impl Default for ModelConfig {
    /// The desk-scale toy: 4 layers, 4 heads of width 16.
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_ff: 128,
            vocab_size: 512,
            rope_base: 10000.0,
            max_position: 16384,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::config("n_layers and n_heads must be at least 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if self.d_head == 0 || self.d_head % 2 != 0 {
            return Err(Error::config(format!(
                "d_head must be a positive even number, got {}",
                self.d_head
            )));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::config(format!(
                "d_model ({}) must equal n_heads * d_head ({} * {})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_ff == 0 || self.max_position == 0 {
            return Err(Error::config("d_ff and max_position must be positive"));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::config("rope_base must exceed 1"));
        }
        Ok(())
    }

    /// Layer used for attention capture when none is given: 60% of the depth.
    pub fn default_norm_layer(&self) -> usize {
        ((self.n_layers as f64 * 0.6).floor() as usize).min(self.n_layers - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub mlp_norm: Vec<T>,
    pub w_gate: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

/// Model parameters. Projections act on row vectors: `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub config: ModelConfig,
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Matrix<T>,
}

/// Deterministic weights for `config`.
///
/// Embeddings are standard normal. Every projection matrix is drawn from a
/// zero-mean Gaussian with standard deviation `1/sqrt(d_model)`. Norm gains
/// are one. Samples are drawn in f64 from a ChaCha8 stream in the tensor
/// order of the weight file, then narrowed to `T`.
pub fn init_weights<T: Real>(config: &ModelConfig, seed: u64) -> Result<Weights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let scale = 1.0 / (config.d_model as f64).sqrt();
    let mut gaussian = |rows: usize, cols: usize, std: f64| {
        let data = (0..rows * cols)
            .map(|_| T::of(unit.sample(&mut rng) * std))
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    let (d, f) = (config.d_model, config.d_ff);
    let embedding = gaussian(config.vocab_size, d, 1.0);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![T::one(); d],
            wq: gaussian(d, d, scale),
            wk: gaussian(d, d, scale),
            wv: gaussian(d, d, scale),
            wo: gaussian(d, d, scale),
            mlp_norm: vec![T::one(); d],
            w_gate: gaussian(d, f, scale),
            w_up: gaussian(d, f, scale),
            w_down: gaussian(f, d, scale),
        })
        .collect();
    let lm_head = gaussian(d, config.vocab_size, scale);
    Ok(Weights {
        config: *config,
        embedding,
        layers,
        final_norm: vec![T::one(); d],
        lm_head,
    })
}

/// Key/value rows of one layer. Keys are stored already rotated.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv<T> {
    pub keys: Matrix<T>,
    pub values: Matrix<T>,
}

impl<T: Real> LayerKv<T> {
    pub fn empty(width: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, width),
            values: Matrix::zeros(0, width),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which keys each query row may attend to. Key indices address the
/// injected prefix first, then the request's own tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    /// Every prefix key plus request keys up to and including the query.
    Causal,
    /// Explicit allowed key indices per query row.
    Explicit(Vec<Vec<usize>>),
}

#[derive(Debug, Clone)]
pub struct ForwardRequest<'a, T> {
    pub token_ids: &'a [TokenId],
    pub positions: &'a [usize],
    pub mask: Mask,
    pub injected_kv: Option<&'a [LayerKv<T>]>,
    /// Layers (zero-based) whose attention weights are recorded.
    pub capture: &'a [usize],
    /// Run only the first `n` layers. Logits are omitted when set below the
    /// model depth.
    pub max_layers: Option<usize>,
}

impl<'a, T> ForwardRequest<'a, T> {
    pub fn causal(token_ids: &'a [TokenId], positions: &'a [usize]) -> Self {
        Self {
            token_ids,
            positions,
            mask: Mask::Causal,
            injected_kv: None,
            capture: &[],
            max_layers: None,
        }
    }

    pub fn with_prefix(mut self, kv: &'a [LayerKv<T>]) -> Self {
        self.injected_kv = Some(kv);
        self
    }

    pub fn with_capture(mut self, layers: &'a [usize]) -> Self {
        self.capture = layers;
        self
    }

    pub fn with_max_layers(mut self, n: usize) -> Self {
        self.max_layers = Some(n);
        self
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.mask = mask;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult<T> {
    /// Output of each executed layer, one row per request token.
    pub hidden: Vec<Matrix<T>>,
    /// Keys (rotated) and values of the request tokens, per layer.
    pub kv: Vec<LayerKv<T>>,
    /// Captured attention per layer: one `queries × keys` matrix per head,
    /// with zeros at masked positions.
    pub attention: BTreeMap<usize, Vec<Matrix<T>>>,
    /// Logits for the final request token; empty if the run stopped early.
    pub logits: Vec<T>,
}

impl<T: Real> ForwardResult<T> {
    /// Greedy next token.
    pub fn argmax(&self) -> Option<TokenId> {
        self.logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i as TokenId)
    }
}

/// The keys visible to one query row.
#[derive(Debug, Clone, Copy)]
pub(crate) enum KeySpan<'a> {
    /// Keys `0..n`.
    Prefix(usize),
    List(&'a [usize]),
}

pub(crate) fn rms_norm<T: Real>(x: &Matrix<T>, gain: &[T]) -> Matrix<T> {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let eps = T::of(RMS_EPS);
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(d as f64);
        let inv = (ms + eps).sqrt().recip();
        for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(gain) {
            *o = v * inv * g;
        }
    }
    out
}

#[inline]
fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

impl<T: Real> LayerWeights<T> {
    /// Queries, keys and values for `h`, with queries and keys rotated to
    /// `positions`.
    pub(crate) fn project(
        &self,
        h: &Matrix<T>,
        positions: &[usize],
        config: &ModelConfig,
    ) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let x = rms_norm(h, &self.attn_norm);
        let mut q = x.matmul(&self.wq);
        let mut k = x.matmul(&self.wk);
        let v = x.matmul(&self.wv);
        let shifts: Vec<i64> = positions.iter().map(|&p| p as i64).collect();
        rope::rotate_rows(&mut q, config.d_head, &shifts, config.rope_base);
        rope::rotate_rows(&mut k, config.d_head, &shifts, config.rope_base);
        (q, k, v)
    }

    /// Output projection, residual add, then the gated MLP with its residual.
    pub(crate) fn finish(&self, h: &mut Matrix<T>, attn: &Matrix<T>) {
        h.add_assign(&attn.matmul(&self.wo));
        let x = rms_norm(h, &self.mlp_norm);
        let gate = x.matmul(&self.w_gate);
        let mut up = x.matmul(&self.w_up);
        for (u, &g) in up.data_mut().iter_mut().zip(gate.data()) {
            *u = *u * silu(g);
        }
        h.add_assign(&up.matmul(&self.w_down));
    }
}

/// Multi-head scaled dot-product attention for every query row over the keys
/// selected by `span(row)`. Returns the concatenated head outputs and, when
/// `capture` is set, the per-head weight matrices.
pub(crate) fn attend<'s, T: Real>(
    q: &Matrix<T>,
    keys: &Matrix<T>,
    values: &Matrix<T>,
    config: &ModelConfig,
    span: impl Fn(usize) -> KeySpan<'s>,
    capture: bool,
) -> (Matrix<T>, Option<Vec<Matrix<T>>>) {
    let (n_heads, dh) = (config.n_heads, config.d_head);
    let n_keys = keys.rows();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = Matrix::zeros(q.rows(), n_heads * dh);
    let mut captured = capture.then(|| vec![Matrix::zeros(q.rows(), n_keys); n_heads]);
    let mut idx: Vec<usize> = Vec::new();
    let mut weights: Vec<T> = Vec::new();
    for i in 0..q.rows() {
        idx.clear();
        match span(i) {
            KeySpan::Prefix(n) => idx.extend(0..n),
            KeySpan::List(l) => idx.extend_from_slice(l),
        }
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = &q.row(i)[cols.clone()];
            weights.clear();
            let mut max = T::neg_infinity();
            for &j in &idx {
                let kh = &keys.row(j)[cols.clone()];
                let s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<T>() * scale;
                max = max.max(s);
                weights.push(s);
            }
            let mut total = T::zero();
            for w in weights.iter_mut() {
                *w = (*w - max).exp();
                total = total + *w;
            }
            let o = &mut out.row_mut(i)[cols.clone()];
            for (&j, w) in idx.iter().zip(weights.iter_mut()) {
                *w = *w / total;
                for (oc, &vc) in o.iter_mut().zip(&values.row(j)[cols.clone()]) {
                    *oc = *oc + *w * vc;
                }
            }
            if let Some(c) = captured.as_mut() {
                for (&j, &w) in idx.iter().zip(weights.iter()) {
                    c[h].set(i, j, w);
                }
            }
        }
    }
    (out, captured)
}

impl<T: Real> Weights<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embed(&self, tokens: &[TokenId]) -> Matrix<T> {
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        self.embedding.select_rows(&idx)
    }

    pub fn logits(&self, last_hidden: &[T]) -> Vec<T> {
        let row = Matrix::from_vec(1, last_hidden.len(), last_hidden.to_vec());
        rms_norm(&row, &self.final_norm)
            .matmul(&self.lm_head)
            .into_data()
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&t) => Err(Error::IndexOutOfRange {
                index: t as usize,
                len: vocab,
            }),
            None => Ok(()),
        }
    }

    pub(crate) fn check_positions(&self, positions: &[usize]) -> Result<()> {
        let max = self.config.max_position;
        match positions.iter().find(|&&p| p >= max) {
            Some(&position) => Err(Error::PositionOutOfRange { position, max }),
            None => Ok(()),
        }
    }

    pub(crate) fn check_kv(&self, kv: &[LayerKv<T>]) -> Result<usize> {
        let cfg = &self.config;
        if kv.len() != cfg.n_layers {
            return Err(Error::shape(format!(
                "KV has {} layers, model has {}",
                kv.len(),
                cfg.n_layers
            )));
        }
        let len = kv.first().map_or(0, LayerKv::len);
        for (l, layer) in kv.iter().enumerate() {
            if layer.keys.cols() != cfg.d_model || layer.values.cols() != cfg.d_model {
                return Err(Error::shape(format!(
                    "layer {l} KV width must be {}",
                    cfg.d_model
                )));
            }
            if layer.keys.rows() != len || layer.values.rows() != len {
                return Err(Error::shape(format!(
                    "layer {l} has {} keys and {} values, expected {len}",
                    layer.keys.rows(),
                    layer.values.rows()
                )));
            }
        }
        Ok(len)
    }

    /// Runs the decoder over `request`.
    pub fn forward(&self, request: &ForwardRequest<'_, T>) -> Result<ForwardResult<T>> {
        let cfg = &self.config;
        let n = request.token_ids.len();
        if request.positions.len() != n {
            return Err(Error::shape(format!(
                "{} positions for {} tokens",
                request.positions.len(),
                n
            )));
        }
        self.check_tokens(request.token_ids)?;
        self.check_positions(request.positions)?;
        let prefix_len = match request.injected_kv {
            Some(kv) => self.check_kv(kv)?,
            None => 0,
        };
        if let Mask::Explicit(rows) = &request.mask {
            validate_explicit_mask(rows, n, prefix_len)?;
        }
        let depth = request.max_layers.unwrap_or(cfg.n_layers);
        if depth == 0 || depth > cfg.n_layers {
            return Err(Error::config(format!(
                "max_layers {depth} outside 1..={}",
                cfg.n_layers
            )));
        }
        if let Some(&l) = request.capture.iter().find(|&&l| l >= depth) {
            return Err(Error::IndexOutOfRange {
                index: l,
                len: depth,
            });
        }

        let mut h = self.embed(request.token_ids);
        let mut hidden = Vec::with_capacity(depth);
        let mut new_kv = Vec::with_capacity(depth);
        let mut attention = BTreeMap::new();
        for (l, layer) in self.layers.iter().take(depth).enumerate() {
            let (q, k, v) = layer.project(&h, request.positions, cfg);
            let (keys, values) = match request.injected_kv {
                Some(kv) if prefix_len > 0 => (
                    Matrix::vstack(&[&kv[l].keys, &k], cfg.d_model),
                    Matrix::vstack(&[&kv[l].values, &v], cfg.d_model),
                ),
                _ => (k.clone(), v.clone()),
            };
            let capture = request.capture.contains(&l);
            let (attn, weights) = match &request.mask {
                Mask::Causal => attend(
                    &q,
                    &keys,
                    &values,
                    cfg,
                    |i| KeySpan::Prefix(prefix_len + i + 1),
                    capture,
                ),
                Mask::Explicit(rows) => attend(
                    &q,
                    &keys,
                    &values,
                    cfg,
                    |i| KeySpan::List(&rows[i]),
                    capture,
                ),
            };
            if let Some(w) = weights {
                attention.insert(l, w);
            }
            layer.finish(&mut h, &attn);
            hidden.push(h.clone());
            new_kv.push(LayerKv { keys: k, values: v });
        }
        let logits = if depth == cfg.n_layers && n > 0 {
            self.logits(h.row(n - 1))
        } else {
            Vec::new()
        };
        Ok(ForwardResult {
            hidden,
            kv: new_kv,
            attention,
            logits,
        })
    }

    /// 64-bit fingerprint of the configuration, precision and parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for v in config_words(&self.config) {
            h.update(&v.to_le_bytes());
        }
        h.update(&T::PRECISION.tag().to_le_bytes());
        for (_, t) in self.named_tensors() {
            for &x in t.data {
                h.update(&x.as_f64().to_le_bytes());
            }
        }
        h.finish()
    }

    fn named_tensors(&self) -> Vec<(String, TensorView<'_, T>)> {
        let mut out = vec![("embedding".to_string(), TensorView::mat(&self.embedding))];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.push((p("attn_norm"), TensorView::vec(&layer.attn_norm)));
            out.push((p("wq"), TensorView::mat(&layer.wq)));
            out.push((p("wk"), TensorView::mat(&layer.wk)));
            out.push((p("wv"), TensorView::mat(&layer.wv)));
            out.push((p("wo"), TensorView::mat(&layer.wo)));
            out.push((p("mlp_norm"), TensorView::vec(&layer.mlp_norm)));
            out.push((p("w_gate"), TensorView::mat(&layer.w_gate)));
            out.push((p("w_up"), TensorView::mat(&layer.w_up)));
            out.push((p("w_down"), TensorView::mat(&layer.w_down)));
        }
        out.push(("final_norm".to_string(), TensorView::vec(&self.final_norm)));
        out.push(("lm_head".to_string(), TensorView::mat(&self.lm_head)));
        out
    }
}

fn validate_explicit_mask(rows: &[Vec<usize>], n: usize, prefix_len: usize) -> Result<()> {
    if rows.len() != n {
        return Err(Error::Mask(format!(
            "{} mask rows for {n} query tokens",
            rows.len()
        )));
    }
    let total = prefix_len + n;
    for (i, row) in rows.iter().enumerate() {
        if row.is_empty() {
            return Err(Error::Mask(format!("query {i} has no permitted keys")));
        }
        for &k in row {
            if k >= total {
                return Err(Error::Mask(format!(
                    "query {i} references key {k}, only {total} keys exist"
                )));
            }
            if k > prefix_len + i {
                return Err(Error::Mask(format!(
                    "query {i} may not attend to later key {k}"
                )));
            }
        }
    }
    Ok(())
}

struct TensorView<'a, T> {
    dims: Vec<usize>,
    data: &'a [T],
}

impl<'a, T: Real> TensorView<'a, T> {
    fn mat(m: &'a Matrix<T>) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.data(),
        }
    }

    fn vec(v: &'a [T]) -> Self {
        Self {
            dims: vec![v.len()],
            data: v,
        }
    }
}

// Weight file layout (all integers little-endian):
//   "IFKV" | version u32 | n_layers, n_heads, d_model, d_head, d_ff,
//   vocab_size, max_position as u64 | rope_base as f64 bits u64 |
//   precision tag u32 | tensor count u32 |
//   per tensor: name length u32, name bytes, rank u32, dims u64 * rank,
//   raw elements (4 or 8 bytes each, per precision tag)
// Tensor order: embedding, then per layer attn_norm wq wk wv wo mlp_norm
// w_gate w_up w_down, then final_norm, lm_head.
pub const WEIGHT_MAGIC: &[u8; 4] = b"IFKV";
pub const WEIGHT_VERSION: u32 = 1;

fn config_words(c: &ModelConfig) -> [u64; 8] {
    [
        c.n_layers as u64,
        c.n_heads as u64,
        c.d_model as u64,
        c.d_head as u64,
        c.d_ff as u64,
        c.vocab_size as u64,
        c.max_position as u64,
        c.rope_base.to_bits(),
    ]
}

impl<T: Real> Weights<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(WEIGHT_MAGIC)?;
        w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
        for v in config_words(&self.config) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&T::PRECISION.tag().to_le_bytes())?;
        let tensors = self.named_tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for d in &t.dims {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for &x in t.data {
                match T::PRECISION {
                    Precision::F32 => w.write_all(&(x.as_f64() as f32).to_le_bytes())?,
                    Precision::F64 => w.write_all(&x.as_f64().to_le_bytes())?,
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a weight file. The stored precision must match `T`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != WEIGHT_MAGIC {
            return Err(Error::Format("not a weight file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != WEIGHT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: WEIGHT_VERSION,
            });
        }
        let mut words = [0u64; 8];
        for w in words.iter_mut() {
            *w = read_u64(&mut r)?;
        }
        let config = ModelConfig {
            n_layers: words[0] as usize,
            n_heads: words[1] as usize,
            d_model: words[2] as usize,
            d_head: words[3] as usize,
            d_ff: words[4] as usize,
            vocab_size: words[5] as usize,
            max_position: words[6] as usize,
            rope_base: f64::from_bits(words[7]),
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let tag = read_u32(&mut r)?;
        let precision = Precision::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("unknown precision tag {tag}")))?;
        if precision != T::PRECISION {
            return Err(Error::Format(format!(
                "file stores {precision} weights, requested {}",
                T::PRECISION
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut template = init_shapes::<T>(&config);
        if count != template.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, file has {count}",
                template.len()
            )));
        }
        for (name, dims, slot) in template.iter_mut() {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 1024 {
                return Err(Error::Format("tensor name too long".into()));
            }
            let mut buf = vec![0u8; name_len];
            read_exact(&mut r, &mut buf)?;
            if buf != name.as_bytes() {
                return Err(Error::Format(format!(
                    "expected tensor '{name}', found '{}'",
                    String::from_utf8_lossy(&buf)
                )));
            }
            let rank = read_u32(&mut r)? as usize;
            let mut got = Vec::with_capacity(rank);
            for _ in 0..rank.min(4) {
                got.push(read_u64(&mut r)? as usize);
            }
            if &got != dims {
                return Err(Error::Format(format!(
                    "tensor '{name}' has dims {got:?}, expected {dims:?}"
                )));
            }
            for x in slot.iter_mut() {
                *x = match precision {
                    Precision::F32 => T::of(f32::from_bits(read_u32(&mut r)?) as f64),
                    Precision::F64 => T::of(f64::from_bits(read_u64(&mut r)?)),
                };
            }
        }
        let mut it = template.into_iter().map(|(_, dims, data)| (dims, data));
        let mut next_mat = || {
            let (dims, data) = it.next().expect("template length");
            if dims.len() == 2 {
                (Matrix::from_vec(dims[0], dims[1], data), Vec::new())
            } else {
                (Matrix::zeros(0, 0), data)
            }
        };
        let embedding = next_mat().0;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: next_mat().1,
                wq: next_mat().0,
                wk: next_mat().0,
                wv: next_mat().0,
                wo: next_mat().0,
                mlp_norm: next_mat().1,
                w_gate: next_mat().0,
                w_up: next_mat().0,
                w_down: next_mat().0,
            });
        }
        let final_norm = next_mat().1;
        let lm_head = next_mat().0;
        Ok(Weights {
            config,
            embedding,
            layers,
            final_norm,
            lm_head,
        })
    }
}

type Slot<T> = (String, Vec<usize>, Vec<T>);

fn init_shapes<T: Real>(c: &ModelConfig) -> Vec<Slot<T>> {
    let (d, f) = (c.d_model, c.d_ff);
    let slot = |name: String, dims: Vec<usize>| {
        let n = dims.iter().product();
        (name, dims, vec![T::zero(); n])
    };
    let mut out = vec![slot("embedding".into(), vec![c.vocab_size, d])];
    for l in 0..c.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        out.push(slot(p("attn_norm"), vec![d]));
        for n in ["wq", "wk", "wv", "wo"] {
            out.push(slot(p(n), vec![d, d]));
        }
        out.push(slot(p("mlp_norm"), vec![d]));
        out.push(slot(p("w_gate"), vec![d, f]));
        out.push(slot(p("w_up"), vec![d, f]));
        out.push(slot(p("w_down"), vec![f, d]));
    }
    out.push(slot("final_norm".into(), vec![d]));
    out.push(slot("lm_head".into(), vec![d, c.vocab_size]));
    out
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Positions `0..n`.
pub fn contiguous(n: usize) -> Vec<usize> {
    (0..n).collect()
}
