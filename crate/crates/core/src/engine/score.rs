//! Candidate scoring: prompt consistency, theme consistency and an optional
//! quality judgement, folded into one weighted score.

use serde::{Deserialize, Serialize};

use crate::error::{BackendError, EngineError};
use crate::raster::RasterImage;
use crate::similarity::{cosine, EmbeddingBackend, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub w_text: f64,
    pub w_image: f64,
    pub w_quality: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            w_text: 0.5,
            w_image: 0.5,
            w_quality: 0.0,
        }
    }
}

impl ScoreWeights {
    pub fn new(w_text: f64, w_image: f64, w_quality: f64) -> Result<Self, EngineError> {
        let w = Self {
            w_text,
            w_image,
            w_quality,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let all = [self.w_text, self.w_image, self.w_quality];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(EngineError::InvalidWeights(format!(
                "weights must be finite and non-negative, got {all:?}"
            )));
        }
        if all.iter().sum::<f64>() <= 0.0 {
            return Err(EngineError::InvalidWeights("weights sum to zero".into()));
        }
        Ok(())
    }

    pub fn combine(&self, text: f64, image: f64, quality: f64) -> f64 {
        self.w_text * text + self.w_image * image + self.w_quality * quality
    }

    /// Parses `text,image,quality`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("weights {s:?}: {e}")))
            .collect::<Result<_, _>>()?;
        let [t, i, q] = parts[..] else {
            return Err(format!("weights {s:?} must have three values"));
        };
        Self::new(t, i, q).map_err(|e| e.to_string())
    }
}

/// Visual-quality judge returning a value in `[0, 1]`.
pub trait QualityScorer: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, image: &RasterImage, prompt: &str) -> Result<f64, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub text_score: f64,
    pub image_score: f64,
    pub quality_score: f64,
    pub combined: f64,
}

impl ScoreBreakdown {
    pub fn new(text: f64, image: f64, quality: f64, weights: &ScoreWeights) -> Self {
        Self {
            text_score: text,
            image_score: image,
            quality_score: quality,
            combined: weights.combine(text, image, quality),
        }
    }

    pub fn recombined(&self, weights: &ScoreWeights) -> Self {
        Self::new(self.text_score, self.image_score, self.quality_score, weights)
    }
}

/// Mean cosine between `image` and each reference.
pub fn mean_cosine(image: &EmbeddingVector, refs: &[EmbeddingVector]) -> Result<f64, EngineError> {
    if refs.is_empty() {
        return Err(EngineError::EmptyInput("reference images"));
    }
    let mut sum = 0.0;
    for r in refs {
        sum += cosine(r, image)?;
    }
    Ok(sum / refs.len() as f64)
}

fn checked_quality(q: f64) -> Result<f64, EngineError> {
    if (0.0..=1.0).contains(&q) {
        Ok(q)
    } else {
        Err(BackendError::Protocol(format!("quality score {q} outside [0, 1]")).into())
    }
}

/// Scores from precomputed embeddings.
pub fn score_embeddings(
    image: &EmbeddingVector,
    text: &EmbeddingVector,
    refs: &[EmbeddingVector],
    quality: Option<f64>,
    weights: &ScoreWeights,
) -> Result<ScoreBreakdown, EngineError> {
    let t = cosine(text, image)?;
    let i = mean_cosine(image, refs)?;
    let q = quality.map(checked_quality).transpose()?.unwrap_or(0.0);
    Ok(ScoreBreakdown::new(t, i, q, weights))
}

pub fn score_candidate(
    image: &RasterImage,
    prompt: &str,
    reference_images: &[RasterImage],
    weights: &ScoreWeights,
    embedder: &dyn EmbeddingBackend,
    quality: Option<&dyn QualityScorer>,
) -> Result<ScoreBreakdown, EngineError> {
    if reference_images.is_empty() {
        return Err(EngineError::EmptyInput("reference images"));
    }
    let v = embedder.embed_image(image)?;
    let t = embedder.embed_text(prompt)?;
    let refs = embedder.embed_images(&reference_images.iter().collect::<Vec<_>>())?;
    let q = quality.map(|s| s.score(image, prompt)).transpose()?;
    score_embeddings(&v, &t, &refs, q, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{HashEmbedder, MockJointEmbedder};

    fn v(x: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn combined_is_weighted_sum() {
        let w = ScoreWeights::default();
        assert!((w.combine(0.3, 0.5, 0.9) - 0.4).abs() < 1e-12);
        assert!(ScoreWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(ScoreWeights::new(-1.0, 1.0, 0.0).is_err());
        assert_eq!(ScoreWeights::parse("1,0,0").unwrap(), ScoreWeights::new(1.0, 0.0, 0.0).unwrap());
        assert!(ScoreWeights::parse("1,0").is_err());
    }

    #[test]
    fn image_score_is_mean_of_reference_cosines() {
        // unit vectors at cosine 0.2 and 0.8 to e0
        let img = v(&[1.0, 0.0, 0.0]);
        let a = v(&[0.2, (1.0f32 - 0.04).sqrt(), 0.0]);
        let b = v(&[0.8, 0.0, 0.6]);
        let text = v(&[1.0, 0.0, 0.0]);
        let s = score_embeddings(&img, &text, &[a, b], None, &ScoreWeights::default()).unwrap();
        assert!((s.image_score - 0.5).abs() < 1e-6);
        assert_eq!(s.quality_score, 0.0);
        assert!((s.combined - 0.75).abs() < 1e-6);
    }

    #[test]
    fn identical_reference_scores_one() {
        let e = MockJointEmbedder::default();
        let img = RasterImage::filled(8, 8, [200, 10, 90]);
        let s = score_candidate(&img, "x", std::slice::from_ref(&img), &ScoreWeights::default(), &e, None).unwrap();
        assert!((s.image_score - 1.0).abs() < 1e-6);
        assert!(matches!(
            score_candidate(&img, "x", &[], &ScoreWeights::default(), &e, None),
            Err(EngineError::EmptyInput(_))
        ));
    }

    struct Fixed(f64);

    impl QualityScorer for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn score(&self, _: &RasterImage, _: &str) -> Result<f64, BackendError> {
            Ok(self.0)
        }
    }

    #[test]
    fn quality_must_be_in_range() {
        let e = HashEmbedder::new(8, 1);
        let img = RasterImage::filled(2, 2, [1, 2, 3]);
        let w = ScoreWeights::new(0.0, 0.0, 1.0).unwrap();
        let s = score_candidate(&img, "x", std::slice::from_ref(&img), &w, &e, Some(&Fixed(0.7))).unwrap();
        assert_eq!(s.combined, 0.7);
        assert!(score_candidate(&img, "x", std::slice::from_ref(&img), &w, &e, Some(&Fixed(1.5))).is_err());
    }
}
