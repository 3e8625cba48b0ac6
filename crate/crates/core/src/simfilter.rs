//! Top-similarity removal: drop any group in which two members'
//! descriptions embed too close to each other.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{read_jsonl, text_digest, ImageGroup};
use crate::parallel::bounded_map;

/// Tolerance on the unit-norm invariant of returned embeddings.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("provider returned malformed embeddings: {0}")]
    Shape(String),
    #[error("no embedding known for text {0:?}")]
    UnknownText(String),
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("no description for image `{0}`")]
    MissingDescription(String),
    #[error("embedding failed for group {group}: {source}")]
    Provider {
        group: String,
        #[source]
        source: ProviderError,
    },
    #[error("threshold {0} outside [-1, 1]")]
    BadThreshold(f64),
    #[error("target retention {0} outside (0, 1]")]
    BadTarget(f64),
    #[error("need at least 2 pair groups to calibrate, got {0}")]
    TooFewPairs(usize),
    #[error("all {0} similarities are equal; set tau manually")]
    Degenerate(usize),
    #[error("cache io: {0}")]
    Cache(String),
}

/// Something that maps texts to unit-length vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        (**self).embed(texts)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        (**self).embed(texts)
    }
}

pub fn normalize(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    true
}

/// Cosine similarity of two unit vectors, clamped to [-1, 1].
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    dot.clamp(-1.0, 1.0)
}

/// Deterministic offline provider: hashed bag of lowercase word tokens
/// with random signs, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashBagProvider {
    dim: usize,
}

impl HashBagProvider {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2, "dim must be at least 2");
        Self { dim }
    }
}

impl Default for HashBagProvider {
    fn default() -> Self {
        Self::new(256)
    }
}

impl EmbeddingProvider for HashBagProvider {
    fn name(&self) -> &str {
        "hashbag"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts
            .iter()
            .map(|text| {
                let mut v = vec![0f32; self.dim];
                for token in text
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|t| !t.is_empty())
                {
                    let h = Sha256::digest(token.to_lowercase().as_bytes());
                    let bucket = u64::from_le_bytes(h[..8].try_into().unwrap());
                    let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
                    v[(bucket % self.dim as u64) as usize] += sign;
                }
                if !normalize(&mut v) {
                    v.iter_mut().for_each(|x| *x = 0.0);
                    v[0] = 1.0;
                }
                v
            })
            .collect())
    }
}

/// Provider backed by an explicit text → vector table.
#[derive(Debug, Clone)]
pub struct StaticProvider {
    dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl StaticProvider {
    pub fn new(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Self {
        let table = entries
            .into_iter()
            .map(|(k, mut v)| {
                assert_eq!(v.len(), dim, "vector for {k:?} has wrong dimension");
                assert!(normalize(&mut v), "zero vector for {k:?}");
                (k, v)
            })
            .collect();
        Self { dim, table }
    }
}

impl EmbeddingProvider for StaticProvider {
    fn name(&self) -> &str {
        "static"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| ProviderError::UnknownText(t.clone()))
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    provider: String,
    digest: String,
    vector: Vec<f32>,
}

/// Memoizes another provider by `(provider name, text digest)`.
pub struct CachedProvider<P> {
    inner: P,
    cache: Mutex<HashMap<String, Vec<f32>>>,
    inner_texts: AtomicUsize,
    hits: AtomicUsize,
}

impl<P: EmbeddingProvider> CachedProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
            inner_texts: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        }
    }

    /// Number of texts forwarded to the wrapped provider.
    pub fn provider_calls(&self) -> usize {
        self.inner_texts.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn load(&self, path: &Path) -> Result<usize, FilterError> {
        if !path.exists() {
            return Ok(0);
        }
        let lines: Vec<CacheLine> =
            read_jsonl(path).map_err(|e| FilterError::Cache(e.to_string()))?;
        let mut cache = self.cache.lock().unwrap();
        let mut n = 0;
        for l in lines
            .into_iter()
            .filter(|l| l.provider == self.inner.name() && l.vector.len() == self.inner.dim())
        {
            cache.insert(l.digest, l.vector);
            n += 1;
        }
        Ok(n)
    }

    pub fn save(&self, path: &Path) -> Result<usize, FilterError> {
        let cache = self.cache.lock().unwrap();
        let io = |e: std::io::Error| FilterError::Cache(e.to_string());
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let mut keys: Vec<&String> = cache.keys().collect();
        keys.sort();
        for k in &keys {
            let line = CacheLine {
                provider: self.inner.name().to_string(),
                digest: (*k).clone(),
                vector: cache[*k].clone(),
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| io(e.into()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(keys.len())
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedProvider<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let digests: Vec<String> = texts.iter().map(|t| text_digest(t)).collect();
        let mut missing: Vec<(String, String)> = Vec::new();
        {
            let cache = self.cache.lock().unwrap();
            for (t, d) in texts.iter().zip(&digests) {
                if cache.contains_key(d) {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                } else if !missing.iter().any(|(_, md)| md == d) {
                    missing.push((t.clone(), d.clone()));
                }
            }
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|(t, _)| t.clone()).collect();
            self.inner_texts.fetch_add(batch.len(), Ordering::Relaxed);
            let vectors = self.inner.embed(&batch)?;
            if vectors.len() != batch.len() {
                return Err(ProviderError::Shape(format!(
                    "asked for {} embeddings, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            let mut cache = self.cache.lock().unwrap();
            for ((_, d), v) in missing.into_iter().zip(vectors) {
                cache.insert(d, v);
            }
        }
        let cache = self.cache.lock().unwrap();
        Ok(digests.iter().map(|d| cache[d].clone()).collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedOptions {
    pub batch_size: usize,
    pub in_flight: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            in_flight: 4,
        }
    }
}

fn check_vectors(dim: usize, texts: &[String], vectors: &[Vec<f32>]) -> Result<(), ProviderError> {
    if vectors.len() != texts.len() {
        return Err(ProviderError::Shape(format!(
            "asked for {} embeddings, got {}",
            texts.len(),
            vectors.len()
        )));
    }
    for v in vectors {
        if v.len() != dim {
            return Err(ProviderError::Shape(format!(
                "vector has {} entries, expected {dim}",
                v.len()
            )));
        }
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(ProviderError::Shape(format!("vector norm {norm} is not 1")));
        }
    }
    Ok(())
}

/// Description texts for every member of `group`, in member order.
fn member_texts<'a>(
    group: &ImageGroup,
    descs: &'a HashMap<String, String>,
) -> Result<Vec<&'a String>, FilterError> {
    group
        .ids()
        .map(|id| {
            descs
                .get(id)
                .ok_or_else(|| FilterError::MissingDescription(id.to_string()))
        })
        .collect()
}

fn max_pairwise(vectors: &[&Vec<f32>]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            best = best.max(cosine(vectors[i], vectors[j]));
        }
    }
    best
}

pub fn max_pair_similarity(
    group: &ImageGroup,
    descs: &HashMap<String, String>,
    provider: &dyn EmbeddingProvider,
) -> Result<f64, FilterError> {
    let texts: Vec<String> = member_texts(group, descs)?.into_iter().cloned().collect();
    let ctx = |source| FilterError::Provider {
        group: group.group_id().to_string(),
        source,
    };
    let vectors = provider.embed(&texts).map_err(ctx)?;
    check_vectors(provider.dim(), &texts, &vectors).map_err(ctx)?;
    Ok(max_pairwise(&vectors.iter().collect::<Vec<_>>()))
}

/// Max pairwise similarity for each group, embedding every distinct text
/// once in bounded-concurrent batches.
pub fn group_similarities(
    groups: &[ImageGroup],
    descs: &HashMap<String, String>,
    provider: &dyn EmbeddingProvider,
    opts: EmbedOptions,
) -> Result<Vec<f64>, FilterError> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut unique: Vec<String> = Vec::new();
    let mut first_group: Vec<usize> = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for text in member_texts(g, descs)? {
            if !index.contains_key(text.as_str()) {
                index.insert(text.as_str(), unique.len());
                unique.push(text.clone());
                first_group.push(gi);
            }
        }
    }
    let batch_size = opts.batch_size.max(1);
    let chunks: Vec<(usize, &[String])> = unique
        .chunks(batch_size)
        .enumerate()
        .map(|(ci, c)| (ci * batch_size, c))
        .collect();
    let results = bounded_map(&chunks, opts.in_flight, |_, (start, chunk)| {
        let v = provider.embed(chunk)?;
        check_vectors(provider.dim(), chunk, &v)?;
        Ok::<_, ProviderError>((*start, v))
    });
    let mut vectors: Vec<Vec<f32>> = Vec::with_capacity(unique.len());
    for r in results {
        match r {
            Ok((_, v)) => vectors.extend(v),
            Err(source) => {
                let start = vectors.len();
                return Err(FilterError::Provider {
                    group: groups[first_group[start]].group_id().to_string(),
                    source,
                });
            }
        }
    }
    Ok(groups
        .iter()
        .map(|g| {
            let vs: Vec<&Vec<f32>> = g
                .ids()
                .map(|id| &vectors[index[descs[id].as_str()]])
                .collect();
            max_pairwise(&vs)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub kept: Vec<ImageGroup>,
    pub removed: Vec<ImageGroup>,
    pub tau: f64,
    pub retention_by_size: BTreeMap<usize, f64>,
}

/// Splits groups by `similarity > tau` (removed) versus kept.
pub fn partition_by_similarity(groups: &[ImageGroup], similarities: &[f64], tau: f64) -> FilterReport {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    let mut totals: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (g, &s) in groups.iter().zip(similarities) {
        let entry = totals.entry(g.len()).or_default();
        entry.1 += 1;
        if s > tau {
            removed.push(g.clone());
        } else {
            entry.0 += 1;
            kept.push(g.clone());
        }
    }
    let retention_by_size = totals
        .into_iter()
        .map(|(size, (k, n))| (size, k as f64 / n as f64))
        .collect();
    FilterReport {
        kept,
        removed,
        tau,
        retention_by_size,
    }
}

pub fn filter_groups(
    groups: &[ImageGroup],
    descs: &HashMap<String, String>,
    provider: &dyn EmbeddingProvider,
    tau: f64,
    opts: EmbedOptions,
) -> Result<FilterReport, FilterError> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(FilterError::BadThreshold(tau));
    }
    let sims = group_similarities(groups, descs, provider, opts)?;
    Ok(partition_by_similarity(groups, &sims, tau))
}

/// Threshold that keeps `target` of the given similarities. Kept means
/// `similarity <= tau`; tau sits midway between the last kept and the first
/// removed value.
pub fn threshold_for_retention(similarities: &[f64], target: f64) -> Result<f64, FilterError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(FilterError::BadTarget(target));
    }
    let n = similarities.len();
    if n < 2 {
        return Err(FilterError::TooFewPairs(n));
    }
    let mut sorted = similarities.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    if sorted[0] == sorted[n - 1] {
        return Err(FilterError::Degenerate(n));
    }
    let keep = ((target * n as f64).round() as usize).clamp(1, n);
    if keep == n {
        return Ok(sorted[n - 1]);
    }
    Ok((sorted[keep - 1] + sorted[keep]) / 2.0)
}

pub fn calibrate_threshold(
    pair_groups: &[ImageGroup],
    descs: &HashMap<String, String>,
    provider: &dyn EmbeddingProvider,
    target_retention: f64,
    opts: EmbedOptions,
) -> Result<f64, FilterError> {
    let pairs: Vec<ImageGroup> = pair_groups.iter().filter(|g| g.len() == 2).cloned().collect();
    if pairs.len() < 2 {
        return Err(FilterError::TooFewPairs(pairs.len()));
    }
    if !(target_retention > 0.0 && target_retention <= 1.0) {
        return Err(FilterError::BadTarget(target_retention));
    }
    let sims = group_similarities(&pairs, descs, provider, opts)?;
    threshold_for_retention(&sims, target_retention)
}
