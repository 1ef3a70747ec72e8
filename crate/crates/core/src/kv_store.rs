//! Per-chunk KV caches: chunk-local prefill, the on-disk cache format, a
//! directory-backed registry, and assembly of chunk caches into one
//! context cache whose rows can later be replaced.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{fnv64, Fnv64};
use crate::model::{contiguous, ForwardRequest, LayerKv, TokenId, Weights};
use crate::positional::{ChunkId, ChunkSpec};
use crate::rope;
use crate::tensor::{Matrix, Precision, Real};

/// How a block of KV rows was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Chunk processed alone at positions `0..len`.
    PrefilledLocal,
    /// Row recomputed under the global causal mask at its global position.
    RecomputedGlobal,
    /// Produced by a full-context prefill.
    FullPrefill,
}

impl Provenance {
    fn tag(self) -> u8 {
        match self {
            Provenance::PrefilledLocal => 0,
            Provenance::RecomputedGlobal => 1,
            Provenance::FullPrefill => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Provenance::PrefilledLocal),
            1 => Some(Provenance::RecomputedGlobal),
            2 => Some(Provenance::FullPrefill),
            _ => None,
        }
    }
}

/// Cached keys and values of one chunk, all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkKv<T> {
    pub chunk_id: ChunkId,
    pub model_fingerprint: u64,
    pub layers: Vec<LayerKv<T>>,
    /// Positions the keys were rotated at; consecutive.
    pub prefill_positions: Vec<usize>,
    pub provenance: Provenance,
}

impl<T: Real> ChunkKv<T> {
    pub fn len(&self) -> usize {
        self.prefill_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefill_positions.is_empty()
    }
}

/// Prefills `chunk` on its own: positions `0..len`, chunk-internal causal mask.
pub fn prefill_chunk<T: Real>(weights: &Weights<T>, chunk: &ChunkSpec) -> Result<ChunkKv<T>> {
    if chunk.token_ids.is_empty() {
        return Err(Error::config(format!("chunk {} is empty", chunk.chunk_id)));
    }
    let positions = contiguous(chunk.local_length());
    let out = weights.forward(&ForwardRequest::causal(&chunk.token_ids, &positions))?;
    Ok(ChunkKv {
        chunk_id: chunk.chunk_id,
        model_fingerprint: weights.fingerprint(),
        layers: out.kv,
        prefill_positions: positions,
        provenance: Provenance::PrefilledLocal,
    })
}

/// Reference prefill of the whole token sequence at positions `0..n`.
pub fn prefill_full<T: Real>(weights: &Weights<T>, tokens: &[TokenId]) -> Result<ChunkKv<T>> {
    let positions = contiguous(tokens.len());
    let out = weights.forward(&ForwardRequest::causal(tokens, &positions))?;
    Ok(ChunkKv {
        chunk_id: ChunkId(u64::MAX),
        model_fingerprint: weights.fingerprint(),
        layers: out.kv,
        prefill_positions: positions,
        provenance: Provenance::FullPrefill,
    })
}

// Cache file layout (little-endian):
//   "IFKC" | version u32 | model fingerprint u64 | chunk_id u64 |
//   chunk length u64 | n_layers u32 | n_heads u32 | d_head u32 |
//   provenance u8 | compute precision tag u32 | first position u64 |
//   per layer: keys then values, f32 row-major |
//   FNV-1a 64 of every preceding byte
pub const CACHE_MAGIC: &[u8; 4] = b"IFKC";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8 + 4 + 4 + 4 + 1 + 4 + 8;

pub fn encode_cache<T: Real>(cache: &ChunkKv<T>, n_heads: usize, d_head: usize) -> Vec<u8> {
    let len = cache.len();
    let width = n_heads * d_head;
    let mut buf =
        Vec::with_capacity(HEADER_LEN + cache.layers.len() * 2 * len * width * 4 + 8);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&cache.model_fingerprint.to_le_bytes());
    buf.extend_from_slice(&cache.chunk_id.0.to_le_bytes());
    buf.extend_from_slice(&(len as u64).to_le_bytes());
    buf.extend_from_slice(&(cache.layers.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(n_heads as u32).to_le_bytes());
    buf.extend_from_slice(&(d_head as u32).to_le_bytes());
    buf.push(cache.provenance.tag());
    buf.extend_from_slice(&T::PRECISION.tag().to_le_bytes());
    let first = cache.prefill_positions.first().copied().unwrap_or(0);
    buf.extend_from_slice(&(first as u64).to_le_bytes());
    for layer in &cache.layers {
        for m in [&layer.keys, &layer.values] {
            for &x in m.data() {
                buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
    }
    let sum = fnv64(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        if end > self.buf.len() {
            return Err(Error::Format("truncated cache file".into()));
        }
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Header fields of a cache file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CacheHeader {
    pub version: u32,
    pub model_fingerprint: u64,
    pub chunk_id: ChunkId,
    pub length: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub provenance: Provenance,
    pub compute_precision: Precision,
    pub first_position: usize,
}

fn decode_header(cur: &mut Cursor<'_>) -> Result<CacheHeader> {
    if cur.take(4)? != CACHE_MAGIC {
        return Err(Error::Format("not a cache file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let model_fingerprint = cur.u64()?;
    let chunk_id = ChunkId(cur.u64()?);
    let length = cur.u64()? as usize;
    let n_layers = cur.u32()? as usize;
    let n_heads = cur.u32()? as usize;
    let d_head = cur.u32()? as usize;
    let tag = cur.u8()?;
    let provenance =
        Provenance::from_tag(tag).ok_or_else(|| Error::Format(format!("bad provenance {tag}")))?;
    let ptag = cur.u32()?;
    let compute_precision = Precision::from_tag(ptag)
        .ok_or_else(|| Error::Format(format!("bad precision tag {ptag}")))?;
    let first_position = cur.u64()? as usize;
    Ok(CacheHeader {
        version,
        model_fingerprint,
        chunk_id,
        length,
        n_layers,
        n_heads,
        d_head,
        provenance,
        compute_precision,
        first_position,
    })
}

/// Parses only the header; the checksum is still verified.
pub fn inspect_cache(bytes: &[u8]) -> Result<CacheHeader> {
    let mut cur = Cursor { buf: bytes, at: 0 };
    let header = decode_header(&mut cur)?;
    verify_checksum(bytes)?;
    Ok(header)
}

fn verify_checksum(bytes: &[u8]) -> Result<()> {
    if bytes.len() < HEADER_LEN + 8 {
        return Err(Error::Format("truncated cache file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv64(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(())
}

pub fn decode_cache<T: Real>(bytes: &[u8]) -> Result<ChunkKv<T>> {
    let mut cur = Cursor { buf: bytes, at: 0 };
    let h = decode_header(&mut cur)?;
    let overflow = || Error::Format("cache dimensions overflow".into());
    let width = h.n_heads.checked_mul(h.d_head).ok_or_else(overflow)?;
    let expected = h
        .length
        .checked_mul(width)
        .and_then(|p| p.checked_mul(8))
        .and_then(|p| p.checked_mul(h.n_layers))
        .and_then(|p| p.checked_add(HEADER_LEN + 8))
        .ok_or_else(overflow)?;
    if bytes.len() < expected {
        return Err(Error::Format("truncated cache file".into()));
    }
    if bytes.len() > expected {
        return Err(Error::Format("trailing bytes after cache payload".into()));
    }
    verify_checksum(bytes)?;
    let matrix = |cur: &mut Cursor<'_>| -> Result<Matrix<T>> {
        let raw = cur.take(h.length * width * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        Ok(Matrix::from_vec(h.length, width, data))
    };
    let mut layers = Vec::with_capacity(h.n_layers);
    for _ in 0..h.n_layers {
        let keys = matrix(&mut cur)?;
        let values = matrix(&mut cur)?;
        layers.push(LayerKv { keys, values });
    }
    Ok(ChunkKv {
        chunk_id: h.chunk_id,
        model_fingerprint: h.model_fingerprint,
        layers,
        prefill_positions: (h.first_position..h.first_position + h.length).collect(),
        provenance: h.provenance,
    })
}

/// Writes `cache` to `path`. Tensors are narrowed to f32 on disk.
pub fn save_cache<T: Real>(
    cache: &ChunkKv<T>,
    n_heads: usize,
    d_head: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode_cache(cache, n_heads, d_head);
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_cache<T: Real>(path: impl AsRef<Path>) -> Result<ChunkKv<T>> {
    decode_cache(&fs::read(path)?)
}

/// Directory of chunk caches keyed by model fingerprint and chunk content.
/// Concurrent requests for the same chunk id are serialised; distinct
/// chunks proceed in parallel.
#[derive(Debug)]
pub struct CacheRegistry {
    dir: PathBuf,
    locks: Mutex<HashMap<ChunkId, Arc<Mutex<()>>>>,
}

impl CacheRegistry {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, fingerprint: u64, chunk: &ChunkSpec) -> PathBuf {
        self.dir.join(format!(
            "{fingerprint:016x}-{:016x}.ifkc",
            chunk.content_hash()
        ))
    }

    fn lock_for(&self, id: ChunkId) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("registry lock poisoned");
        locks.entry(id).or_default().clone()
    }

    /// Loads the chunk's cache if present, otherwise prefills and stores it.
    /// Returns the cache and whether it came from disk.
    pub fn get_or_prefill<T: Real>(
        &self,
        weights: &Weights<T>,
        chunk: &ChunkSpec,
    ) -> Result<(ChunkKv<T>, bool)> {
        let lock = self.lock_for(chunk.chunk_id);
        let _guard = lock.lock().expect("chunk lock poisoned");
        let fp = weights.fingerprint();
        let path = self.path_for(fp, chunk);
        if path.exists() {
            let mut kv = load_cache::<T>(&path)?;
            if kv.model_fingerprint != fp || kv.len() != chunk.local_length() {
                return Err(Error::Format(format!(
                    "{} does not belong to this model/chunk",
                    path.display()
                )));
            }
            kv.chunk_id = chunk.chunk_id;
            return Ok((kv, true));
        }
        let kv = prefill_chunk(weights, chunk)?;
        let cfg = weights.config();
        save_cache(&kv, cfg.n_heads, cfg.d_head, &path)?;
        Ok((kv, false))
    }
}

/// Context cache built from chunk caches in a given order, optionally
/// followed by prompt rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledCache<T> {
    pub chunk_ids: Vec<ChunkId>,
    pub chunk_lengths: Vec<usize>,
    pub model_fingerprint: Option<u64>,
    /// Context rows, then prompt rows.
    pub layers: Vec<LayerKv<T>>,
    /// Global context index → (chunk, index within chunk).
    pub index_map: Vec<(ChunkId, usize)>,
    pub provenance: Vec<Provenance>,
    /// Position each context row's keys are currently rotated at.
    pub row_positions: Vec<usize>,
    pub prompt_len: usize,
}

/// Concatenates chunk caches (in slice order) and optional prompt rows.
pub fn assemble<T: Real>(
    chunks: &[ChunkKv<T>],
    prompt_kv: Option<&[LayerKv<T>]>,
) -> Result<AssembledCache<T>> {
    let n_layers = chunks
        .first()
        .map(|c| c.layers.len())
        .or(prompt_kv.map(<[_]>::len))
        .ok_or_else(|| Error::config("nothing to assemble"))?;
    let width = chunks
        .first()
        .and_then(|c| c.layers.first())
        .or(prompt_kv.and_then(<[_]>::first))
        .map(|l| l.keys.cols())
        .unwrap_or(0);
    let fingerprint = chunks.first().map(|c| c.model_fingerprint);
    for c in chunks {
        if c.model_fingerprint != fingerprint.unwrap() {
            return Err(Error::config(format!(
                "chunk {} was prefilled by a different model",
                c.chunk_id
            )));
        }
        if c.layers.len() != n_layers
            || c.layers.iter().any(|l| {
                l.keys.cols() != width || l.keys.rows() != c.len() || l.values.rows() != c.len()
            })
        {
            return Err(Error::config(format!(
                "chunk {} has a different model shape",
                c.chunk_id
            )));
        }
    }
    if let Some(p) = prompt_kv {
        if p.len() != n_layers || p.iter().any(|l| l.keys.cols() != width) {
            return Err(Error::config("prompt KV shape does not match the chunks"));
        }
    }
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut keys: Vec<&Matrix<T>> = chunks.iter().map(|c| &c.layers[l].keys).collect();
        let mut values: Vec<&Matrix<T>> = chunks.iter().map(|c| &c.layers[l].values).collect();
        if let Some(p) = prompt_kv {
            keys.push(&p[l].keys);
            values.push(&p[l].values);
        }
        layers.push(LayerKv {
            keys: Matrix::vstack(&keys, width),
            values: Matrix::vstack(&values, width),
        });
    }
    let mut index_map = Vec::new();
    let mut provenance = Vec::new();
    let mut row_positions = Vec::new();
    for c in chunks {
        for (i, &p) in c.prefill_positions.iter().enumerate() {
            index_map.push((c.chunk_id, i));
            provenance.push(c.provenance);
            row_positions.push(p);
        }
    }
    Ok(AssembledCache {
        chunk_ids: chunks.iter().map(|c| c.chunk_id).collect(),
        chunk_lengths: chunks.iter().map(ChunkKv::len).collect(),
        model_fingerprint: fingerprint,
        layers,
        index_map,
        provenance,
        row_positions,
        prompt_len: prompt_kv.and_then(|p| p.first()).map_or(0, LayerKv::len),
    })
}

impl<T: Real> AssembledCache<T> {
    pub fn context_len(&self) -> usize {
        self.index_map.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// First global context index of each chunk.
    pub fn chunk_offsets(&self) -> Vec<usize> {
        self.chunk_lengths
            .iter()
            .scan(0, |acc, &n| {
                let s = *acc;
                *acc += n;
                Some(s)
            })
            .collect()
    }

    pub fn global_index(&self, chunk: ChunkId, local: usize) -> Option<usize> {
        let k = self.chunk_ids.iter().position(|&c| c == chunk)?;
        (local < self.chunk_lengths[k]).then(|| self.chunk_offsets()[k] + local)
    }

    /// Context rows only, keys as stored.
    pub fn context_kv(&self) -> Vec<LayerKv<T>> {
        let n = self.context_len();
        self.layers
            .iter()
            .map(|l| LayerKv {
                keys: l.keys.slice_rows(0, n),
                values: l.values.slice_rows(0, n),
            })
            .collect()
    }

    /// Context rows with keys re-rotated from their stored positions to
    /// `positions`.
    pub fn context_kv_at(&self, positions: &[usize], d_head: usize, base: f64) -> Result<Vec<LayerKv<T>>> {
        if positions.len() != self.context_len() {
            return Err(Error::shape(format!(
                "{} positions for {} context rows",
                positions.len(),
                self.context_len()
            )));
        }
        let shifts: Vec<i64> = positions
            .iter()
            .zip(&self.row_positions)
            .map(|(&to, &from)| to as i64 - from as i64)
            .collect();
        let mut kv = self.context_kv();
        for layer in kv.iter_mut() {
            rope::rotate_rows(&mut layer.keys, d_head, &shifts, base);
        }
        Ok(kv)
    }

    /// Overwrites context rows `indices` in every layer with the rows of
    /// `new_kv` (one row per index, keys rotated at `positions`).
    pub fn replace_entries(
        &mut self,
        indices: &[usize],
        new_kv: &[LayerKv<T>],
        positions: &[usize],
    ) -> Result<()> {
        let n = self.context_len();
        let mut seen = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::DuplicateIndex(i));
            }
        }
        if positions.len() != indices.len() {
            return Err(Error::shape("one position per replaced row is required"));
        }
        if indices.is_empty() {
            return Ok(());
        }
        if new_kv.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} replacement layers for a {}-layer cache",
                new_kv.len(),
                self.layers.len()
            )));
        }
        for (l, kv) in new_kv.iter().enumerate() {
            let width = self.layers[l].keys.cols();
            if kv.keys.rows() != indices.len()
                || kv.values.rows() != indices.len()
                || kv.keys.cols() != width
                || kv.values.cols() != width
            {
                return Err(Error::shape(format!("replacement rows for layer {l} have the wrong shape")));
            }
        }
        for (layer, kv) in self.layers.iter_mut().zip(new_kv) {
            for (r, &i) in indices.iter().enumerate() {
                layer.keys.row_mut(i).copy_from_slice(kv.keys.row(r));
                layer.values.row_mut(i).copy_from_slice(kv.values.row(r));
            }
        }
        for (&i, &p) in indices.iter().zip(positions) {
            self.provenance[i] = Provenance::RecomputedGlobal;
            self.row_positions[i] = p;
        }
        Ok(())
    }
}

/// Frobenius distance over keys and values of all layers.
pub fn cache_distance<T: Real>(a: &[LayerKv<T>], b: &[LayerKv<T>]) -> f64 {
    assert_eq!(a.len(), b.len(), "layer count");
    a.iter()
        .zip(b)
        .map(|(x, y)| x.keys.squared_distance(&y.keys) + x.values.squared_distance(&y.values))
        .sum::<f64>()
        .sqrt()
}

/// Largest per-element difference over keys and values of all layers.
pub fn cache_max_abs_diff<T: Real>(a: &[LayerKv<T>], b: &[LayerKv<T>]) -> f64 {
    assert_eq!(a.len(), b.len(), "layer count");
    a.iter()
        .zip(b)
        .map(|(x, y)| x.keys.max_abs_diff(&y.keys).max(x.values.max_abs_diff(&y.values)))
        .fold(0.0, f64::max)
}

/// Stable digest of a set of chunk caches, for run records.
pub fn digest_caches<T: Real>(caches: &[ChunkKv<T>]) -> u64 {
    let mut h = Fnv64::new();
    for c in caches {
        h.update(&c.chunk_id.0.to_le_bytes());
        for l in &c.layers {
            for m in [&l.keys, &l.values] {
                for &x in m.data() {
                    h.update(&x.as_f64().to_bits().to_le_bytes());
                }
            }
        }
    }
    h.finish()
}
