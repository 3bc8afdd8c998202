//! Embedding providers for embedding-similarity selection.
//!
//! A provider turns a text rendering into a fixed-dimension vector. Two are
//! built in: [`HashEmbeddingProvider`], deterministic and offline, and
//! [`RemoteEmbeddingProvider`], which speaks the OpenAI-compatible
//! `POST /embeddings` endpoint. [`Embedder`] adds the per-run cache so each
//! trajectory is encoded at most once.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PredictionTask, Trajectory, TrajectoryId};
use crate::prompting::embedding_text;

pub const HASH_EMBEDDING_DIM: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("provider returned dimension {got}, declared {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("provider returned a non-finite entry")]
    NonFinite,
    #[error("embedding {key}: {source}")]
    Keyed {
        key: EmbedKey,
        #[source]
        source: Box<EmbeddingError>,
    },
}

/// What an embedding was computed for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmbedKey {
    /// A full pool trajectory.
    Trajectory(TrajectoryId),
    /// The observed context of the test task built from this trajectory.
    Context(TrajectoryId),
}

impl fmt::Display for EmbedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedKey::Trajectory(id) => write!(f, "trajectory {id}"),
            EmbedKey::Context(id) => write!(f, "context of trajectory {id}"),
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError>;

    /// Extra cost to charge per call when benchmarking a stand-in provider.
    /// Real providers leave this at zero; their cost is measured directly.
    fn simulated_cost(&self) -> Duration {
        Duration::ZERO
    }

    fn name(&self) -> String;
}

/// Feature-hashing provider: every alphanumeric token of the rendering (POI
/// ids, clock digits, day names, category words) is hashed with 64-bit FNV-1a
/// into one of `dim` buckets with a ±1 sign taken from the top hash bit.
#[derive(Clone, Debug)]
pub struct HashEmbeddingProvider {
    dim: usize,
    simulated_cost: Duration,
}

impl Default for HashEmbeddingProvider {
    fn default() -> Self {
        Self::new(HASH_EMBEDDING_DIM)
    }
}

impl HashEmbeddingProvider {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            simulated_cost: Duration::ZERO,
        }
    }

    pub fn with_simulated_cost(mut self, cost: Duration) -> Self {
        self.simulated_cost = cost;
        self
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let mut v = vec![0.0; self.dim];
        for token in text
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = fnv1a(token.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        Ok(v)
    }

    fn simulated_cost(&self) -> Duration {
        self.simulated_cost
    }

    fn name(&self) -> String {
        format!("hash-{}", self.dim)
    }
}

/// Client for an OpenAI-compatible embeddings endpoint.
pub struct RemoteEmbeddingProvider {
    endpoint: String,
    model: String,
    dim: usize,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl RemoteEmbeddingProvider {
    /// `endpoint` is the API base, e.g. `https://api.openai.com/v1`.
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        dim: usize,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_owned(),
            model: model.into(),
            dim,
            api_key,
            agent,
        }
    }
}

impl EmbeddingProvider for RemoteEmbeddingProvider {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let url = format!("{}/embeddings", self.endpoint);
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(EmbeddingRequest {
                model: &self.model,
                input: text,
            })
            .map_err(|e| EmbeddingError::Provider(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(EmbeddingError::Provider(format!("HTTP {status}: {body}")));
        }
        let parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::Provider(format!("bad response body: {e}")))?;
        let v = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| EmbeddingError::Provider("response has no data".into()))?
            .embedding;
        Ok(v)
    }

    fn name(&self) -> String {
        format!("remote:{}", self.model)
    }
}

/// Concurrent read-mostly cache of embeddings. The first writer for a key
/// wins; later computations of the same key are discarded.
#[derive(Default)]
pub struct EmbeddingCache {
    map: RwLock<HashMap<EmbedKey, Arc<Vec<f64>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
    simulated_nanos: AtomicU64,
}

impl EmbeddingCache {
    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    /// Total simulated provider cost accrued by cache misses.
    pub fn simulated_cost(&self) -> Duration {
        Duration::from_nanos(self.simulated_nanos.load(Ordering::Relaxed))
    }

    pub fn len(&self) -> usize {
        self.map.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.read().is_empty()
    }

    pub fn clear(&self) {
        self.map.write().clear();
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
        self.simulated_nanos.store(0, Ordering::Relaxed);
    }
}

/// A provider plus its cache and the clock offset used to render text.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: EmbeddingCache,
    render_offset_minutes: i32,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, render_offset_minutes: i32) -> Self {
        Self {
            provider,
            cache: EmbeddingCache::default(),
            render_offset_minutes,
        }
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn embed_trajectory(&self, t: &Trajectory) -> Result<Arc<Vec<f64>>, EmbeddingError> {
        self.embed_keyed(EmbedKey::Trajectory(t.id), || {
            embedding_text(t.checkins(), self.render_offset_minutes)
        })
    }

    /// Embeds the task's observed context only; the target is never encoded.
    pub fn embed_context(&self, task: &PredictionTask) -> Result<Arc<Vec<f64>>, EmbeddingError> {
        self.embed_keyed(EmbedKey::Context(task.trajectory_id), || {
            embedding_text(&task.context, self.render_offset_minutes)
        })
    }

    fn embed_keyed(
        &self,
        key: EmbedKey,
        text: impl FnOnce() -> String,
    ) -> Result<Arc<Vec<f64>>, EmbeddingError> {
        if let Some(v) = self.cache.map.read().get(&key) {
            self.cache.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(v));
        }
        let keyed = |source| EmbeddingError::Keyed {
            key,
            source: Box::new(source),
        };
        let v = self.provider.embed(&text()).map_err(keyed)?;
        let expected = self.provider.dimension();
        if v.len() != expected {
            return Err(keyed(EmbeddingError::Dimension {
                expected,
                got: v.len(),
            }));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(keyed(EmbeddingError::NonFinite));
        }
        self.cache.misses.fetch_add(1, Ordering::Relaxed);
        let cost = self.provider.simulated_cost().as_nanos() as u64;
        self.cache.simulated_nanos.fetch_add(cost, Ordering::Relaxed);
        let v = Arc::new(v);
        Ok(Arc::clone(
            self.cache.map.write().entry(key).or_insert(v),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_support::trajectory;

    struct Fixed(Vec<f64>);

    impl EmbeddingProvider for Fixed {
        fn dimension(&self) -> usize {
            4
        }
        fn embed(&self, _: &str) -> Result<Vec<f64>, EmbeddingError> {
            Ok(self.0.clone())
        }
        fn name(&self) -> String {
            "fixed".into()
        }
    }

    #[test]
    fn cache_hits_on_second_call() {
        let e = Embedder::new(Arc::new(HashEmbeddingProvider::default()), 0);
        let t = trajectory(1, 0, &[(3, 0), (4, 1)]);
        let a = e.embed_trajectory(&t).unwrap();
        let b = e.embed_trajectory(&t).unwrap();
        assert_eq!(a, b);
        assert_eq!(e.cache().misses(), 1);
        assert_eq!(e.cache().hits(), 1);
        assert_eq!(a.len(), HASH_EMBEDDING_DIM);
    }

    #[test]
    fn wrong_dimension_is_reported_with_key() {
        let e = Embedder::new(Arc::new(Fixed(vec![1.0; 3])), 0);
        let t = trajectory(7, 0, &[(3, 0)]);
        match e.embed_trajectory(&t) {
            Err(EmbeddingError::Keyed { key, source }) => {
                assert_eq!(key, EmbedKey::Trajectory(TrajectoryId(7)));
                assert_eq!(*source, EmbeddingError::Dimension { expected: 4, got: 3 });
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(e.cache().is_empty());
    }

    #[test]
    fn simulated_cost_accrues_on_misses_only() {
        let p = HashEmbeddingProvider::default().with_simulated_cost(Duration::from_millis(50));
        let e = Embedder::new(Arc::new(p), 0);
        let t = trajectory(1, 0, &[(3, 0)]);
        e.embed_trajectory(&t).unwrap();
        e.embed_trajectory(&t).unwrap();
        assert_eq!(e.cache().simulated_cost(), Duration::from_millis(50));
        e.cache().clear();
        assert_eq!(e.cache().simulated_cost(), Duration::ZERO);
    }
}
