//! Embedding backends: the contract, two deterministic offline embedders and
//! the remote client.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EmbeddingVector;
use crate::error::BackendError;
use crate::http::{self, Endpoint, RetryPolicy};
use crate::raster::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbeddingBackendDescriptor {
    pub name: String,
    pub dim: usize,
    pub modality: Modality,
}

/// Maps text and images into a shared vector space.
///
/// Implementations must be usable from many threads at once. A joint
/// backend returns text and image vectors of the same dimension.
pub trait EmbeddingBackend: Send + Sync {
    fn descriptor(&self) -> EmbeddingBackendDescriptor;

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, BackendError>;

    fn embed_images(&self, images: &[&RasterImage]) -> Result<Vec<EmbeddingVector>, BackendError>;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        single(self.embed_texts(&[text])?)
    }

    fn embed_image(&self, image: &RasterImage) -> Result<EmbeddingVector, BackendError> {
        single(self.embed_images(&[image])?)
    }
}

fn single(mut v: Vec<EmbeddingVector>) -> Result<EmbeddingVector, BackendError> {
    if v.len() != 1 {
        return Err(BackendError::Protocol(format!(
            "expected 1 vector, got {}",
            v.len()
        )));
    }
    Ok(v.remove(0))
}

fn unsupported(name: &str, what: &str) -> BackendError {
    BackendError::Protocol(format!("{name} does not embed {what}"))
}

/// Hashes input bytes into a seeded pseudo-random unit vector.
///
/// Identical input always yields the identical vector, on every platform.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    name: String,
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            name: "hash".into(),
            dim,
            seed,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn vector_for(&self, domain: &[u8], bytes: &[u8]) -> EmbeddingVector {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        h.update(domain);
        h.update([0]);
        h.update(bytes);
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        loop {
            let raw: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                let unit = raw.iter().map(|x| (x / norm) as f32).collect();
                return EmbeddingVector::new(unit).expect("finite, non-empty");
            }
        }
    }

    fn image_bytes(img: &RasterImage) -> Vec<u8> {
        let mut b = Vec::with_capacity(8 + img.pixels().len());
        b.extend_from_slice(&img.width().to_le_bytes());
        b.extend_from_slice(&img.height().to_le_bytes());
        b.extend_from_slice(img.pixels());
        b
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn descriptor(&self) -> EmbeddingBackendDescriptor {
        EmbeddingBackendDescriptor {
            name: self.name.clone(),
            dim: self.dim,
            modality: Modality::Joint,
        }
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, BackendError> {
        Ok(texts
            .iter()
            .map(|t| self.vector_for(b"text", t.as_bytes()))
            .collect())
    }

    fn embed_images(&self, images: &[&RasterImage]) -> Result<Vec<EmbeddingVector>, BackendError> {
        Ok(images
            .iter()
            .map(|img| self.vector_for(b"image", &Self::image_bytes(img)))
            .collect())
    }
}

/// Content-aware image embedder: the image is area-averaged down to a
/// `side`×`side` RGB thumbnail and each channel mapped to `v/255 - 0.5`.
///
/// The map is affine in pixel values, so the embedding of a per-pixel mean
/// of images equals the mean of their embeddings (up to rounding).
#[derive(Debug, Clone)]
pub struct ThumbnailEmbedder {
    side: u32,
}

impl ThumbnailEmbedder {
    pub fn new(side: u32) -> Self {
        assert!(side > 0, "thumbnail side must be positive");
        Self { side }
    }

    pub fn dim(&self) -> usize {
        (self.side * self.side * 3) as usize
    }

    pub fn features(&self, img: &RasterImage) -> EmbeddingVector {
        let (w, h) = (img.width() as u64, img.height() as u64);
        let side = self.side as u64;
        let mut out = Vec::with_capacity(self.dim());
        for by in 0..side {
            let (y0, y1) = span(by, side, h);
            for bx in 0..side {
                let (x0, x1) = span(bx, side, w);
                let mut sum = [0u64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = img.pixel(x as u32, y as u32);
                        for c in 0..3 {
                            sum[c] += u64::from(p[c]);
                        }
                    }
                }
                let count = ((x1 - x0) * (y1 - y0)) as f64;
                for s in sum {
                    out.push((s as f64 / count / 255.0 - 0.5) as f32);
                }
            }
        }
        EmbeddingVector::new(out).expect("finite, non-empty")
    }
}

/// Pixel range `[lo, hi)` of block `b` out of `blocks` over `len` pixels,
/// never empty.
fn span(b: u64, blocks: u64, len: u64) -> (u64, u64) {
    let lo = b * len / blocks;
    let hi = ((b + 1) * len / blocks).max(lo + 1).min(len.max(1));
    (lo.min(len.saturating_sub(1)), hi)
}

impl EmbeddingBackend for ThumbnailEmbedder {
    fn descriptor(&self) -> EmbeddingBackendDescriptor {
        EmbeddingBackendDescriptor {
            name: format!("thumb{}", self.side),
            dim: self.dim(),
            modality: Modality::Image,
        }
    }

    fn embed_texts(&self, _texts: &[&str]) -> Result<Vec<EmbeddingVector>, BackendError> {
        Err(unsupported("thumbnail embedder", "text"))
    }

    fn embed_images(&self, images: &[&RasterImage]) -> Result<Vec<EmbeddingVector>, BackendError> {
        Ok(images.iter().map(|img| self.features(img)).collect())
    }
}

/// Offline joint embedder: hashed text vectors and thumbnail image vectors
/// in the same dimension.
#[derive(Debug, Clone)]
pub struct MockJointEmbedder {
    text: HashEmbedder,
    image: ThumbnailEmbedder,
}

impl MockJointEmbedder {
    pub const NAME: &'static str = "mock-joint";

    pub fn new(seed: u64) -> Self {
        let image = ThumbnailEmbedder::new(4);
        Self {
            text: HashEmbedder::new(image.dim(), seed),
            image,
        }
    }
}

impl Default for MockJointEmbedder {
    fn default() -> Self {
        Self::new(0)
    }
}

impl EmbeddingBackend for MockJointEmbedder {
    fn descriptor(&self) -> EmbeddingBackendDescriptor {
        EmbeddingBackendDescriptor {
            name: Self::NAME.into(),
            dim: self.image.dim(),
            modality: Modality::Joint,
        }
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, BackendError> {
        self.text.embed_texts(texts)
    }

    fn embed_images(&self, images: &[&RasterImage]) -> Result<Vec<EmbeddingVector>, BackendError> {
        self.image.embed_images(images)
    }
}

/// Request body: images travel as base64 PNG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingWireRequest {
    pub modality: Modality,
    pub payload: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingWireResponse {
    pub dim: usize,
    pub vectors: Vec<Vec<f32>>,
}

/// Client for a remote joint encoder speaking the embedding wire contract.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingBackend {
    descriptor: EmbeddingBackendDescriptor,
    endpoint: Endpoint,
    retry: RetryPolicy,
    client: Client,
}

impl HttpEmbeddingBackend {
    pub fn new(name: impl Into<String>, dim: usize, endpoint: Endpoint) -> Result<Self, BackendError> {
        Ok(Self {
            descriptor: EmbeddingBackendDescriptor {
                name: name.into(),
                dim,
                modality: Modality::Joint,
            },
            client: http::build_client(endpoint.timeout)?,
            endpoint,
            retry: RetryPolicy::default(),
        })
    }

    /// Reads `DVP_EMBED_URL`, `DVP_EMBED_TOKEN`, `DVP_EMBED_DIM`,
    /// `DVP_EMBED_NAME` and `DVP_EMBED_TIMEOUT_S` (default 60).
    pub fn from_env() -> Result<Self, BackendError> {
        let url = std::env::var("DVP_EMBED_URL")
            .map_err(|_| BackendError::Unavailable("DVP_EMBED_URL is not set".into()))?;
        let dim = std::env::var("DVP_EMBED_DIM")
            .ok()
            .and_then(|d| d.parse().ok())
            .unwrap_or(768);
        let name = std::env::var("DVP_EMBED_NAME").unwrap_or_else(|_| "clip".into());
        let timeout = std::env::var("DVP_EMBED_TIMEOUT_S")
            .ok()
            .and_then(|t| t.parse().ok())
            .unwrap_or(60);
        Self::new(
            name,
            dim,
            Endpoint {
                url,
                token: std::env::var("DVP_EMBED_TOKEN").ok(),
                timeout: Duration::from_secs(timeout),
            },
        )
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn call(&self, req: &EmbeddingWireRequest) -> Result<Vec<EmbeddingVector>, BackendError> {
        let resp: EmbeddingWireResponse = self
            .retry
            .run(|| http::post_json(&self.client, &self.endpoint, req))?;
        if resp.dim != self.descriptor.dim {
            return Err(BackendError::Protocol(format!(
                "backend returned dim {}, expected {}",
                resp.dim, self.descriptor.dim
            )));
        }
        if resp.vectors.len() != req.payload.len() {
            return Err(BackendError::Protocol(format!(
                "{} vectors for {} inputs",
                resp.vectors.len(),
                req.payload.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != resp.dim {
                    return Err(BackendError::Protocol("ragged vector".into()));
                }
                EmbeddingVector::new(v).map_err(|e| BackendError::Protocol(e.to_string()))
            })
            .collect()
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn descriptor(&self) -> EmbeddingBackendDescriptor {
        self.descriptor.clone()
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, BackendError> {
        self.call(&EmbeddingWireRequest {
            modality: Modality::Text,
            payload: texts.iter().map(|t| t.to_string()).collect(),
        })
    }

    fn embed_images(&self, images: &[&RasterImage]) -> Result<Vec<EmbeddingVector>, BackendError> {
        let payload = images
            .iter()
            .map(|img| {
                img.encode_png()
                    .map(|png| BASE64.encode(png))
                    .map_err(|e| BackendError::Protocol(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.call(&EmbeddingWireRequest {
            modality: Modality::Image,
            payload,
        })
    }
}
