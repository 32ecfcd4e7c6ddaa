//! Code embeddings: a deterministic feature-hashing embedder, a remote
//! embedding service client, and PCA projection.

use std::time::Duration;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::tokenize;

pub const DEFAULT_HASH_DIM: usize = 256;
pub const MIN_HASH_DIM: usize = 8;
/// Codes per request to the remote service.
pub const REMOTE_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("nothing to embed")]
    EmptyBatch,
    #[error("input {0} is empty")]
    EmptyCode(usize),
    #[error("hash embedding dimension must be at least {MIN_HASH_DIM}, got {0}")]
    DimTooSmall(usize),
    #[error("remote provider requires an endpoint")]
    MissingEndpoint,
    #[error("embedding service unreachable after {attempts} attempts: {message}")]
    Remote { attempts: u32, message: String },
    #[error("embedding service returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite embedding value")]
    NonFinite,
    #[error("PCA needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("cannot project {dim}-dimensional vectors onto {k} components")]
    BadComponentCount { k: usize, dim: usize },
}

/// Fixed-length vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Unit-length copy; `None` for the zero vector.
    pub fn normalized(&self) -> Option<EmbeddingVector> {
        let norm = self.norm();
        (norm > 0.0).then(|| EmbeddingVector(self.0.iter().map(|v| v / norm).collect()))
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }
}

/// 64-bit FNV-1a over the token's UTF-8 bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Bucket and sign a token hashes to: bucket `h mod dim`, sign from the top bit.
pub fn hash_slot(token: &str, dim: usize) -> (usize, f64) {
    let h = fnv1a64(token.as_bytes());
    let bucket = (h % dim as u64) as usize;
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

/// Signed feature hashing of token unigram counts, L2-normalized.
pub fn hash_embed(code: &str, dim: usize) -> Result<EmbeddingVector, EmbeddingError> {
    if dim < MIN_HASH_DIM {
        return Err(EmbeddingError::DimTooSmall(dim));
    }
    let mut values = vec![0.0; dim];
    for token in tokenize(code) {
        let (bucket, sign) = hash_slot(&token, dim);
        values[bucket] += sign;
    }
    let raw = EmbeddingVector(values);
    Ok(raw.normalized().unwrap_or_else(|| EmbeddingVector::zeros(dim)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingProvider {
    Hash { dim: usize },
    Remote(RemoteEmbedder),
}

impl EmbeddingProvider {
    pub fn hash(dim: usize) -> Result<Self, EmbeddingError> {
        if dim < MIN_HASH_DIM {
            return Err(EmbeddingError::DimTooSmall(dim));
        }
        Ok(Self::Hash { dim })
    }

    pub fn remote(endpoint: impl Into<String>) -> Result<Self, EmbeddingError> {
        let endpoint = endpoint.into();
        if endpoint.trim().is_empty() {
            return Err(EmbeddingError::MissingEndpoint);
        }
        Ok(Self::Remote(RemoteEmbedder::new(endpoint)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteEmbedder {
    pub endpoint: String,
    pub max_attempts: u32,
    pub retry_delay: Duration,
    pub concurrency: usize,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_owned(),
            max_attempts: 3,
            retry_delay: Duration::from_millis(500),
            concurrency: 4,
        }
    }

    async fn post(&self, client: &reqwest::Client, codes: &[String]) -> Result<EmbedResponse, EmbeddingError> {
        let url = format!("{}/embed", self.endpoint);
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            match try_post(client, &url, codes).await {
                Ok(resp) => return Ok(resp),
                Err(message) => {
                    tracing::warn!(attempt, %message, "embedding request failed");
                    last = message;
                }
            }
            if attempt < self.max_attempts {
                tokio::time::sleep(self.retry_delay * attempt).await;
            }
        }
        Err(EmbeddingError::Remote {
            attempts: self.max_attempts,
            message: last,
        })
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    codes: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

#[derive(Deserialize)]
struct EmbedErrorBody {
    error: String,
}

async fn try_post(client: &reqwest::Client, url: &str, codes: &[String]) -> Result<EmbedResponse, String> {
    let resp = client
        .post(url)
        .json(&EmbedRequest { codes })
        .send()
        .await
        .map_err(|e| e.to_string())?;
    let status = resp.status();
    if !status.is_success() {
        let body = resp.text().await.unwrap_or_default();
        let detail = serde_json::from_str::<EmbedErrorBody>(&body)
            .map(|b| b.error)
            .unwrap_or(body);
        return Err(format!("HTTP {status}: {detail}"));
    }
    resp.json::<EmbedResponse>().await.map_err(|e| e.to_string())
}

/// One vector per input code, in input order.
pub async fn embed_batch(provider: &EmbeddingProvider, codes: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    if codes.is_empty() {
        return Err(EmbeddingError::EmptyBatch);
    }
    if let Some(i) = codes.iter().position(|c| c.is_empty()) {
        return Err(EmbeddingError::EmptyCode(i));
    }
    match provider {
        EmbeddingProvider::Hash { dim } => codes.iter().map(|c| hash_embed(c, *dim)).collect(),
        EmbeddingProvider::Remote(remote) => embed_remote(remote, codes).await,
    }
}

async fn embed_remote(remote: &RemoteEmbedder, codes: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    use futures::stream::{self, StreamExt, TryStreamExt};

    let client = reqwest::Client::new();
    // `buffered` keeps chunk order regardless of completion order.
    let chunks: Vec<EmbedResponse> = stream::iter(codes.chunks(REMOTE_BATCH))
        .map(|chunk| {
            let client = &client;
            async move {
                let resp = remote.post(client, chunk).await?;
                if resp.vectors.len() != chunk.len() {
                    return Err(EmbeddingError::CountMismatch {
                        expected: chunk.len(),
                        got: resp.vectors.len(),
                    });
                }
                Ok(resp)
            }
        })
        .buffered(remote.concurrency.max(1))
        .try_collect()
        .await?;

    let dim = chunks[0].dim;
    let mut out = Vec::with_capacity(codes.len());
    for chunk in chunks {
        if chunk.dim != dim {
            return Err(EmbeddingError::DimMismatch { expected: dim, got: chunk.dim });
        }
        for values in chunk.vectors {
            if values.len() != dim {
                return Err(EmbeddingError::DimMismatch { expected: dim, got: values.len() });
            }
            out.push(EmbeddingVector::new(values)?);
        }
    }
    Ok(out)
}

/// Projects mean-centered vectors onto the top-`k` eigenvectors of their
/// covariance.
///
/// Components are ordered by decreasing eigenvalue and each is flipped so its
/// largest-magnitude loading is positive (first index wins on ties).
/// Components with (numerically) zero variance project to 0.
pub fn pca_project(vectors: &[EmbeddingVector], k: usize) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    let basis = principal_components(vectors, k)?;
    let n = vectors.len();
    let dim = vectors[0].dim();
    let mean = column_mean(vectors, dim);
    Ok((0..n)
        .map(|i| {
            let centered: Vec<f64> = vectors[i].values().iter().zip(&mean).map(|(v, m)| v - m).collect();
            EmbeddingVector(
                basis
                    .iter()
                    .map(|axis| match axis {
                        Some(dir) => dir.iter().zip(&centered).map(|(a, b)| a * b).sum(),
                        None => 0.0,
                    })
                    .collect(),
            )
        })
        .collect())
}

fn column_mean(vectors: &[EmbeddingVector], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.values()) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Top-`k` unit principal directions; `None` marks a zero-variance component.
pub fn principal_components(vectors: &[EmbeddingVector], k: usize) -> Result<Vec<Option<Vec<f64>>>, EmbeddingError> {
    if vectors.len() < 2 {
        return Err(EmbeddingError::TooFewVectors(vectors.len()));
    }
    let dim = vectors[0].dim();
    if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(EmbeddingError::DimMismatch { expected: dim, got: bad.dim() });
    }
    if k == 0 || k > dim {
        return Err(EmbeddingError::BadComponentCount { k, dim });
    }

    let n = vectors.len();
    let mean = column_mean(vectors, dim);
    let centered = DMatrix::from_fn(n, dim, |i, j| vectors[i].values()[j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eigen = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]).then(a.cmp(&b)));
    let top = eigen.eigenvalues[order[0]].max(0.0);
    let floor = top * 1e-12 + f64::MIN_POSITIVE;

    Ok(order
        .into_iter()
        .take(k)
        .map(|idx| {
            if eigen.eigenvalues[idx] <= floor {
                return None;
            }
            let mut dir: Vec<f64> = eigen.eigenvectors.column(idx).iter().copied().collect();
            let mut pivot = 0;
            for (j, v) in dir.iter().enumerate() {
                if v.abs() > dir[pivot].abs() {
                    pivot = j;
                }
            }
            if dir[pivot] < 0.0 {
                dir.iter_mut().for_each(|v| *v = -*v);
            }
            Some(dir)
        })
        .collect())
}
