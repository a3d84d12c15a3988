//! Embedding-space math: normalization, cosine similarity, top-K selection
//! and the element-to-image candidate table.

mod backend;

pub use backend::{
    EmbeddingBackend, EmbeddingBackendDescriptor, EmbeddingWireRequest, EmbeddingWireResponse,
    HashEmbedder, HttpEmbeddingBackend, MockJointEmbedder, Modality, ThumbnailEmbedder,
};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::ImageId;
use crate::error::SimilarityError;

/// A dense embedding of fixed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, SimilarityError> {
        if values.is_empty() {
            return Err(SimilarityError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SimilarityError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Unit-length copy.
    pub fn normalized(&self) -> Result<Self, SimilarityError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(SimilarityError::ZeroVector);
        }
        Ok(Self(
            self.0.iter().map(|&v| (f64::from(v) / n) as f32).collect(),
        ))
    }

    pub fn scaled(&self, s: f32) -> Result<Self, SimilarityError> {
        Self::new(self.0.iter().map(|v| v * s).collect())
    }

    fn unit_f64(&self) -> Result<Vec<f64>, SimilarityError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(SimilarityError::ZeroVector);
        }
        Ok(self.0.iter().map(|&v| f64::from(v) / n).collect())
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = SimilarityError;

    fn try_from(values: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// `a·b / (‖a‖‖b‖)`, accumulated in f64.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, SimilarityError> {
    if a.dim() != b.dim() {
        return Err(SimilarityError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.0.iter().zip(&b.0) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Descending by score, then ascending by id.
fn rank_order<I: Ord>(a: &(I, f64), b: &(I, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Ids of the `k` highest scores, best first; ties go to the smaller id.
pub fn top_k<I: Ord + Clone>(scores: &[(I, f64)], k: usize) -> Result<Vec<I>, SimilarityError> {
    Ok(top_k_scored(scores, k)?.into_iter().map(|(id, _)| id).collect())
}

fn top_k_scored<I: Ord + Clone>(
    scores: &[(I, f64)],
    k: usize,
) -> Result<Vec<(I, f64)>, SimilarityError> {
    if k > scores.len() {
        return Err(SimilarityError::KTooLarge {
            k,
            available: scores.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut ranked: Vec<(I, f64)> = scores.to_vec();
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, rank_order);
        ranked.truncate(k);
    }
    ranked.sort_by(rank_order);
    Ok(ranked)
}

/// Similarity of one element to one bank image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub element_index: usize,
    pub image_id: ImageId,
    pub score: f64,
}

/// N rows of exactly K matches each, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTable {
    k: usize,
    rows: Vec<Vec<MatchScore>>,
}

impl CandidateTable {
    pub fn new(k: usize, rows: Vec<Vec<MatchScore>>) -> Result<Self, SimilarityError> {
        if rows.is_empty() {
            return Err(SimilarityError::NoElements);
        }
        for row in &rows {
            if row.len() != k {
                return Err(SimilarityError::KTooLarge {
                    k,
                    available: row.len(),
                });
            }
        }
        Ok(Self { k, rows })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> &[Vec<MatchScore>] {
        &self.rows
    }

    pub fn row(&self, element: usize) -> &[MatchScore] {
        &self.rows[element]
    }

    /// Distinct image ids in first-seen (row-major) order.
    pub fn unique_images(&self) -> Vec<ImageId> {
        let mut seen = std::collections::BTreeSet::new();
        self.rows
            .iter()
            .flatten()
            .filter(|m| seen.insert(m.image_id))
            .map(|m| m.image_id)
            .collect()
    }

    /// Canonical byte form: per entry, element index (u32 LE), 32 id bytes,
    /// score bits (f64 LE).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.n() * self.k * 44);
        out.extend_from_slice(&(self.n() as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        for m in self.rows.iter().flatten() {
            out.extend_from_slice(&(m.element_index as u32).to_le_bytes());
            out.extend_from_slice(m.image_id.as_bytes());
            out.extend_from_slice(&m.score.to_le_bytes());
        }
        out
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// For each element, the `k` bank images of highest cosine similarity.
///
/// Both sides are normalized once, so each score is a plain dot product.
/// An image may appear in several rows.
pub fn match_elements(
    element_vecs: &[EmbeddingVector],
    bank_vecs: &[(ImageId, EmbeddingVector)],
    k: usize,
) -> Result<CandidateTable, SimilarityError> {
    let first = element_vecs.first().ok_or(SimilarityError::NoElements)?;
    let dim = first.dim();
    for v in element_vecs.iter().chain(bank_vecs.iter().map(|(_, v)| v)) {
        if v.dim() != dim {
            return Err(SimilarityError::DimensionMismatch {
                left: dim,
                right: v.dim(),
            });
        }
    }
    if k > bank_vecs.len() {
        return Err(SimilarityError::KTooLarge {
            k,
            available: bank_vecs.len(),
        });
    }

    let bank_units = bank_vecs
        .iter()
        .map(|(id, v)| Ok((*id, v.unit_f64()?)))
        .collect::<Result<Vec<_>, SimilarityError>>()?;

    let mut rows = Vec::with_capacity(element_vecs.len());
    for (i, e) in element_vecs.iter().enumerate() {
        let e = e.unit_f64()?;
        let scores: Vec<(ImageId, f64)> = bank_units
            .iter()
            .map(|(id, b)| {
                let dot: f64 = e.iter().zip(b).map(|(x, y)| x * y).sum();
                (*id, dot.clamp(-1.0, 1.0))
            })
            .collect();
        let row = top_k_scored(&scores, k)?
            .into_iter()
            .map(|(image_id, score)| MatchScore {
                element_index: i,
                image_id,
                score,
            })
            .collect();
        rows.push(row);
    }
    CandidateTable::new(k, rows)
}
