//! Fixed text embeddings for verbalized paths and domain labels.
//!
//! Providers return an unnormalized vector with integer components, which is
//! exact in 32-bit floats; [`Embedder`] normalizes it in 64-bit. The on-disk
//! cache therefore stores raw vectors losslessly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenizer::split_words;
use crate::error::{Error, Result};

const EMPTY_INPUT: &str = "empty embedding input";

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a over the bytes, keyed by `seed`. Stable across platforms and runs.
pub fn seeded_hash(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ splitmix64(seed);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(h)
}

/// Adds the ±1 pattern of `key` onto `acc`.
fn add_sign_pattern(acc: &mut [f32], key: u64) {
    let mut state = key;
    for chunk in acc.chunks_mut(64) {
        state = splitmix64(state);
        for (bit, v) in chunk.iter_mut().enumerate() {
            *v += if (state >> bit) & 1 == 1 { 1.0 } else { -1.0 };
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn seed(&self) -> u64;
    fn method(&self) -> &'static str;
    /// Unnormalized vector; components must be exactly representable in f32.
    fn raw(&self, text: &str) -> Result<Vec<f32>>;
}

/// Bag of tokens: each token adds a seeded ±1 pattern over all slots.
#[derive(Debug, Clone)]
pub struct HashedBagOfTokens {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingProvider for HashedBagOfTokens {
    fn dim(&self) -> usize {
        self.dim
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn method(&self) -> &'static str {
        "hashed-bag-of-tokens"
    }

    fn raw(&self, text: &str) -> Result<Vec<f32>> {
        let tokens = split_words(text);
        if tokens.is_empty() {
            return Err(Error::invalid(EMPTY_INPUT));
        }
        let mut acc = vec![0f32; self.dim];
        for t in &tokens {
            add_sign_pattern(&mut acc, seeded_hash(t.as_bytes(), self.seed));
        }
        Ok(acc)
    }
}

/// Random ±1 projection of padded character trigrams.
#[derive(Debug, Clone)]
pub struct CharTrigramProjection {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingProvider for CharTrigramProjection {
    fn dim(&self) -> usize {
        self.dim
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn method(&self) -> &'static str {
        "char-trigram-projection"
    }

    fn raw(&self, text: &str) -> Result<Vec<f32>> {
        let tokens = split_words(text);
        if tokens.is_empty() {
            return Err(Error::invalid(EMPTY_INPUT));
        }
        let mut acc = vec![0f32; self.dim];
        let salt = self.seed ^ 0x7472_6967_7261_6d73;
        for t in &tokens {
            let chars: Vec<char> = format!("#{t}#").chars().collect();
            for w in chars.windows(3) {
                let gram: String = w.iter().collect();
                add_sign_pattern(&mut acc, seeded_hash(gram.as_bytes(), salt));
            }
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct CacheManifest {
    provider: String,
    seed: u64,
    dim: usize,
    /// text hash (hex) → (text, entry index in the binary block)
    entries: BTreeMap<String, (String, usize)>,
}

/// Raw vectors by text, optionally persisted as a JSON manifest plus a
/// block of little-endian f32 values.
#[derive(Debug)]
pub struct EmbeddingCache {
    provider: String,
    seed: u64,
    dim: usize,
    entries: BTreeMap<String, Vec<f32>>,
    location: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn in_memory(provider: &dyn EmbeddingProvider) -> Self {
        Self {
            provider: provider.method().to_string(),
            seed: provider.seed(),
            dim: provider.dim(),
            entries: BTreeMap::new(),
            location: None,
        }
    }

    fn manifest_path(base: &Path) -> PathBuf {
        base.with_extension("json")
    }

    fn block_path(base: &Path) -> PathBuf {
        base.with_extension("bin")
    }

    /// Opens a cache at `base` (`base.json` + `base.bin`). A cache written
    /// by a different provider, seed, or dimension is discarded.
    pub fn open(base: &Path, provider: &dyn EmbeddingProvider) -> Result<Self> {
        let mut cache = Self::in_memory(provider);
        cache.location = Some(base.to_path_buf());
        let manifest_path = Self::manifest_path(base);
        if !manifest_path.exists() {
            return Ok(cache);
        }
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CacheManifest = serde_json::from_str(&text)?;
        if manifest.provider != cache.provider || manifest.seed != cache.seed || manifest.dim != cache.dim {
            return Ok(cache);
        }
        let block_path = Self::block_path(base);
        let block = std::fs::read(&block_path).map_err(|e| Error::io(&block_path, e))?;
        let width = 4 * cache.dim;
        for (key, (text, idx)) in manifest.entries {
            let bytes = block
                .get(idx * width..(idx + 1) * width)
                .ok_or_else(|| Error::Checkpoint(format!("cache entry {key} past end of block")))?;
            let v = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            cache.entries.insert(text, v);
        }
        Ok(cache)
    }

    pub fn get(&self, text: &str) -> Option<&Vec<f32>> {
        self.entries.get(text)
    }

    pub fn insert(&mut self, text: &str, v: Vec<f32>) {
        self.entries.insert(text.to_string(), v);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes the cache to its location; no-op for in-memory caches.
    pub fn persist(&self) -> Result<()> {
        let Some(base) = &self.location else { return Ok(()) };
        let mut manifest = CacheManifest {
            provider: self.provider.clone(),
            seed: self.seed,
            dim: self.dim,
            entries: BTreeMap::new(),
        };
        let block_path = Self::block_path(base);
        let file = std::fs::File::create(&block_path).map_err(|e| Error::io(&block_path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (idx, (text, v)) in self.entries.iter().enumerate() {
            let key = format!("{:016x}", seeded_hash(text.as_bytes(), 0));
            manifest.entries.insert(key, (text.clone(), idx));
            for x in v {
                w.write_all(&x.to_le_bytes()).map_err(|e| Error::io(&block_path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&block_path, e))?;
        let manifest_path = Self::manifest_path(base);
        std::fs::write(&manifest_path, serde_json::to_string(&manifest)?)
            .map_err(|e| Error::io(&manifest_path, e))
    }
}

/// Normalizing front end over a provider with a shared cache.
pub struct Embedder {
    provider: Box<dyn EmbeddingProvider>,
    cache: Mutex<EmbeddingCache>,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder")
            .field("method", &self.provider.method())
            .field("dim", &self.provider.dim())
            .field("seed", &self.provider.seed())
            .finish()
    }
}

impl Embedder {
    pub fn new(provider: Box<dyn EmbeddingProvider>) -> Self {
        let cache = EmbeddingCache::in_memory(provider.as_ref());
        Self {
            provider,
            cache: Mutex::new(cache),
        }
    }

    /// Default provider: hashed bag of tokens.
    pub fn hashed(dim: usize, seed: u64) -> Self {
        Self::new(Box::new(HashedBagOfTokens { dim, seed }))
    }

    pub fn with_cache_file(provider: Box<dyn EmbeddingProvider>, base: &Path) -> Result<Self> {
        let cache = EmbeddingCache::open(base, provider.as_ref())?;
        Ok(Self {
            provider,
            cache: Mutex::new(cache),
        })
    }

    pub fn dim(&self) -> usize {
        self.provider.dim()
    }

    pub fn method(&self) -> &'static str {
        self.provider.method()
    }

    pub fn persist_cache(&self) -> Result<()> {
        self.cache.lock().expect("cache lock").persist()
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    /// Unit-norm embedding of `text`.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let raw = {
            let cached = self.cache.lock().expect("cache lock").get(text).cloned();
            match cached {
                Some(v) => v,
                None => {
                    let v = self.provider.raw(text)?;
                    self.cache.lock().expect("cache lock").insert(text, v.clone());
                    v
                }
            }
        };
        let norm = raw.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid(format!("zero embedding for `{text}`")));
        }
        Ok(raw.iter().map(|&x| x as f64 / norm).collect())
    }

    fn embed_rows<S: AsRef<str>>(&self, texts: &[S]) -> Result<Array2<f64>> {
        let d = self.dim();
        let mut out = Array2::zeros((texts.len(), d));
        for (i, t) in texts.iter().enumerate() {
            let v = self.embed_text(t.as_ref())?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(out)
    }

    /// One row per verbalized path.
    pub fn embed_paths<S: AsRef<str>>(&self, paths: &[S]) -> Result<Array2<f64>> {
        self.embed_rows(paths)
    }

    /// One row per domain label.
    pub fn embed_domains<S: AsRef<str>>(&self, labels: &[S]) -> Result<Array2<f64>> {
        self.embed_rows(labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    #[test]
    fn embed_text_contract() {
        let e = Embedder::hashed(64, 3);
        let a = e.embed_text("a b").unwrap();
        assert_eq!(a, e.embed_text("a b").unwrap());
        assert_eq!(a.len(), 64);
        for text in ["a b", "Secret Garden author F. H. Burnett", "x"] {
            let v = e.embed_text(text).unwrap();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let b = e.embed_text("b a").unwrap();
        assert!((cos(&a, &b) - 1.0).abs() < 1e-12);
        let err = e.embed_text("   ").unwrap_err();
        assert!(err.to_string().contains("empty embedding input"));
    }

    #[test]
    fn seed_changes_vectors() {
        let a = Embedder::hashed(32, 1).embed_text("books").unwrap();
        let b = Embedder::hashed(32, 2).embed_text("books").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn batched_rows_match_single_calls() {
        let e = Embedder::hashed(16, 9);
        let texts = ["a b c", "d", "e f"];
        let m = e.embed_paths(&texts).unwrap();
        assert_eq!(m.dim(), (3, 16));
        for (i, t) in texts.iter().enumerate() {
            assert_eq!(m.row(i).to_vec(), e.embed_text(t).unwrap());
        }
        let empty: [&str; 0] = [];
        assert_eq!(e.embed_paths(&empty).unwrap().dim(), (0, 16));
    }

    #[test]
    fn domain_rows() {
        let e = Embedder::hashed(32, 7);
        let m = e.embed_domains(&["books", "movies", "books"]).unwrap();
        assert_ne!(m.row(0), m.row(1));
        assert_eq!(m.row(0), m.row(2));
        for r in m.rows() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cache_is_transparent_and_keyed_by_provider() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("emb");
        let texts = ["alpha beta", "gamma", "delta epsilon zeta"];
        let cold = Embedder::with_cache_file(Box::new(HashedBagOfTokens { dim: 24, seed: 4 }), &base).unwrap();
        let m_cold = cold.embed_paths(&texts).unwrap();
        cold.persist_cache().unwrap();

        let warm = Embedder::with_cache_file(Box::new(HashedBagOfTokens { dim: 24, seed: 4 }), &base).unwrap();
        assert_eq!(warm.cached_entries(), 3);
        assert_eq!(warm.embed_paths(&texts).unwrap(), m_cold);

        let other = Embedder::with_cache_file(Box::new(HashedBagOfTokens { dim: 24, seed: 5 }), &base).unwrap();
        assert_eq!(other.cached_entries(), 0);
        let tri = Embedder::with_cache_file(Box::new(CharTrigramProjection { dim: 24, seed: 4 }), &base).unwrap();
        assert_eq!(tri.cached_entries(), 0);
    }

    #[test]
    fn trigram_provider_contract() {
        let e = Embedder::new(Box::new(CharTrigramProjection { dim: 32, seed: 1 }));
        let a = e.embed_text("manchester").unwrap();
        assert_eq!(a, e.embed_text("manchester").unwrap());
        assert!((cos(&a, &a) - 1.0).abs() < 1e-9);
        let b = e.embed_text("manchestor").unwrap();
        let c = e.embed_text("books").unwrap();
        assert!(cos(&a, &b) > cos(&a, &c));
    }
}
