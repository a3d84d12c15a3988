//! Quantitative evaluation: mean pairwise image similarity against the theme
//! references and mean prompt similarity, over a themes × prompts × seeds
//! sweep.

use serde::{Deserialize, Serialize};

use super::{Engine, EngineConfig};
use crate::bank::ThemeBank;
use crate::error::EngineError;
use crate::raster::RasterImage;
use crate::similarity::{cosine, EmbeddingBackend, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    /// Mean cosine over every (generated, reference) pair.
    pub image_similarity: f64,
    /// Mean cosine between each generated image and its prompt.
    pub text_similarity: f64,
    pub generated: usize,
    pub references: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    image: f64,
    pairs: usize,
    text: f64,
    generated: usize,
}

impl Sums {
    fn add(&mut self, other: Sums) {
        self.image += other.image;
        self.pairs += other.pairs;
        self.text += other.text;
        self.generated += other.generated;
    }

    fn scores(&self, references: usize) -> EvalScores {
        EvalScores {
            image_similarity: self.image / self.pairs as f64,
            text_similarity: self.text / self.generated as f64,
            generated: self.generated,
            references,
        }
    }
}

fn sums(generated: &[(EmbeddingVector, EmbeddingVector)], refs: &[EmbeddingVector]) -> Result<Sums, EngineError> {
    if generated.is_empty() {
        return Err(EngineError::EmptyInput("generated images"));
    }
    if refs.is_empty() {
        return Err(EngineError::EmptyInput("reference images"));
    }
    let mut s = Sums::default();
    for (image, text) in generated {
        for r in refs {
            s.image += cosine(image, r)?;
            s.pairs += 1;
        }
        s.text += cosine(text, image)?;
        s.generated += 1;
    }
    Ok(s)
}

/// `generated` holds `(image vector, prompt vector)` pairs.
pub fn evaluate_embeddings(
    generated: &[(EmbeddingVector, EmbeddingVector)],
    references: &[EmbeddingVector],
) -> Result<EvalScores, EngineError> {
    Ok(sums(generated, references)?.scores(references.len()))
}

pub fn evaluate_run(
    generated: &[(RasterImage, String)],
    references: &[RasterImage],
    embedder: &dyn EmbeddingBackend,
) -> Result<EvalScores, EngineError> {
    if generated.is_empty() {
        return Err(EngineError::EmptyInput("generated images"));
    }
    if references.is_empty() {
        return Err(EngineError::EmptyInput("reference images"));
    }
    let images = embedder.embed_images(&generated.iter().map(|(i, _)| i).collect::<Vec<_>>())?;
    let texts = embedder.embed_texts(&generated.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>())?;
    let refs = embedder.embed_images(&references.iter().collect::<Vec<_>>())?;
    let pairs: Vec<_> = images.into_iter().zip(texts).collect();
    evaluate_embeddings(&pairs, &refs)
}

pub struct ProtocolTheme {
    pub bank: ThemeBank,
    pub prompts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRun {
    pub theme: String,
    pub prompt: String,
    pub seed: u64,
    pub run_id: String,
    pub selected_arrangement: usize,
    pub canvas_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeEval {
    pub theme: String,
    pub bank_digest: String,
    pub scores: EvalScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub version: u32,
    pub seeds: Vec<u64>,
    pub total_images: usize,
    pub overall: EvalScores,
    pub themes: Vec<ThemeEval>,
    pub runs: Vec<ProtocolRun>,
}

impl Engine {
    /// Generates once per (theme, prompt, seed) and scores every selected
    /// canvas against all images of its theme bank.
    pub fn run_protocol(
        &self,
        themes: &[ProtocolTheme],
        seeds: &[u64],
        config: &EngineConfig,
    ) -> Result<ProtocolReport, EngineError> {
        if themes.is_empty() {
            return Err(EngineError::EmptyInput("themes"));
        }
        if seeds.is_empty() {
            return Err(EngineError::EmptyInput("seeds"));
        }
        let embedder = self.backends.embedder.as_ref();
        let mut total = Sums::default();
        let mut total_refs = 0;
        let mut theme_evals = Vec::new();
        let mut runs = Vec::new();
        for theme in themes {
            if theme.prompts.is_empty() {
                return Err(EngineError::EmptyInput("prompts"));
            }
            let refs: Vec<EmbeddingVector> =
                self.bank_vectors(&theme.bank)?.into_iter().map(|(_, v)| v).collect();
            let name = theme.bank.manifest().theme_name.clone();
            let mut generated = Vec::new();
            for prompt in &theme.prompts {
                for &seed in seeds {
                    let cfg = EngineConfig {
                        seed,
                        ..config.clone()
                    };
                    let outcome = self.generate(&theme.bank, prompt, &cfg)?;
                    generated.push((
                        embedder.embed_image(&outcome.selected.image)?,
                        embedder.embed_text(prompt.trim())?,
                    ));
                    runs.push(ProtocolRun {
                        theme: name.clone(),
                        prompt: prompt.clone(),
                        seed,
                        run_id: outcome.run_id,
                        selected_arrangement: outcome.selected.arrangement_id,
                        canvas_sha256: outcome.selected.canvas_sha256(),
                    });
                }
            }
            let s = sums(&generated, &refs)?;
            total.add(s);
            total_refs += refs.len();
            theme_evals.push(ThemeEval {
                theme: name,
                bank_digest: theme.bank.digest_hex(),
                scores: s.scores(refs.len()),
            });
        }
        Ok(ProtocolReport {
            version: 1,
            seeds: seeds.to_vec(),
            total_images: total.generated,
            overall: total.scores(total_refs),
            themes: theme_evals,
            runs,
        })
    }
}
