//! The full loop: extract elements, match them against the bank, then for
//! every row arrangement assign, compose, inpaint, crop and score, and keep
//! the best candidate.

mod eval;
mod score;
mod session;

pub use eval::{
    evaluate_embeddings, evaluate_run, ProtocolReport, ProtocolRun, ProtocolTheme, ThemeEval,
    EvalScores,
};
pub use score::{
    mean_cosine, score_candidate, score_embeddings, QualityScorer, ScoreBreakdown, ScoreWeights,
};
pub use session::{CandidateSummary, HistoryEntry, RefineRequest, Session, SessionStore};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::bank::{build_cache, EmbeddingCache, ImageId, ThemeBank};
use crate::error::BankError;
use crate::composer::{compose_with, crop_canvas, ComposeOptions, VisualPrompt, COMPOSITE_FILE, MASK_FILE};
use crate::error::EngineError;
use crate::fsutil::write_atomic;
use crate::generation::{GenerationParams, InpaintBackend, MockInpainter, DEFAULT_GUIDANCE_SCALE, DEFAULT_STEPS};
use crate::intent::{extract_elements, override_elements, ExtractionRequest, KeyElement, LlmBackend, DEFAULT_ELEMENT_COUNT};
use crate::layout::{
    assign_slots, enumerate_arrangements, pin_list, validate_pins, Arrangement, Cell, GridSpec, Pins,
    SlotAssignment, StarPolicy,
};
use crate::raster::RasterImage;
use crate::similarity::{match_elements, CandidateTable, EmbeddingBackend, EmbeddingVector, MockJointEmbedder};

pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const RESULT_FILE: &str = "result.png";
pub const CANVAS_FILE: &str = "canvas.png";
pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 3;

/// Everything the engine talks to.
#[derive(Clone)]
pub struct Backends {
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub inpainter: Arc<dyn InpaintBackend>,
    pub llm: Option<Arc<dyn LlmBackend>>,
    pub quality: Option<Arc<dyn QualityScorer>>,
}

impl Backends {
    /// Offline, fully deterministic backends.
    pub fn mock() -> Self {
        Self {
            embedder: Arc::new(MockJointEmbedder::default()),
            inpainter: Arc::new(MockInpainter::new()),
            llm: None,
            quality: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub n: usize,
    pub k: usize,
    /// Bypasses extraction when set.
    pub elements: Option<Vec<String>>,
    pub grid: GridSpec,
    pub stars: StarPolicy,
    pub weights: ScoreWeights,
    pub guidance_scale: f64,
    pub steps: u32,
    pub seed: u64,
    /// Arrangement `i` uses `seed + i` instead of the shared seed.
    pub seed_per_arrangement: bool,
    pub border_px: u32,
    /// Arrangements generated at once.
    pub max_parallel: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_ELEMENT_COUNT,
            k: DEFAULT_K,
            elements: None,
            grid: GridSpec::default_grid(),
            stars: StarPolicy::Auto,
            weights: ScoreWeights::default(),
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            steps: DEFAULT_STEPS,
            seed: 0,
            seed_per_arrangement: false,
            border_px: 0,
            max_parallel: 6,
        }
    }
}

impl EngineConfig {
    pub fn seed_for(&self, arrangement_id: usize) -> u64 {
        if self.seed_per_arrangement {
            self.seed.wrapping_add(arrangement_id as u64)
        } else {
            self.seed
        }
    }
}

/// Elements and candidate table for one prompt against one bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prepared {
    pub prompt: String,
    pub elements: Vec<KeyElement>,
    pub table: CandidateTable,
}

#[derive(Debug, Clone)]
pub struct ScoredCandidate {
    pub arrangement_id: usize,
    pub row_assignment: Vec<usize>,
    /// The cropped canvas.
    pub image: RasterImage,
    pub scores: ScoreBreakdown,
}

impl ScoredCandidate {
    pub fn canvas_sha256(&self) -> String {
        self.image.digest_hex()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSummary {
    pub theme: String,
    pub digest: String,
    pub images: usize,
}

/// Configuration as echoed into the report. Paths are left out so reports
/// compare equal across machines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub n: usize,
    pub k: usize,
    pub elements_override: bool,
    pub grid: GridSpec,
    pub stars: Vec<Cell>,
    #[serde(with = "pin_list")]
    pub pins: Pins,
    pub weights: ScoreWeights,
    pub guidance_scale: f64,
    pub steps: u32,
    pub seed: u64,
    pub seed_per_arrangement: bool,
    pub border_px: u32,
    pub embedder: String,
    pub inpainter: String,
    pub quality: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactFiles {
    pub composite: String,
    pub mask: String,
    pub result: Option<String>,
    pub canvas: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub code: String,
    pub message: String,
    pub retryable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrangementReport {
    pub arrangement_id: usize,
    pub row_assignment: Vec<usize>,
    pub seed: u64,
    pub assignment: SlotAssignment,
    pub scores: Option<ScoreBreakdown>,
    pub canvas_sha256: Option<String>,
    pub files: ArtifactFiles,
    pub failure: Option<FailureReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedReport {
    pub arrangement_id: usize,
    pub combined: f64,
    pub canvas_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub run_id: String,
    pub status: RunStatus,
    pub bank: BankSummary,
    pub prompt: String,
    pub elements: Vec<KeyElement>,
    pub candidates: CandidateTable,
    pub config: ConfigEcho,
    pub arrangements: Vec<ArrangementReport>,
    pub selected: SelectedReport,
}

impl RunReport {
    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("report serializes");
        v.push(b'\n');
        v
    }

    pub fn failures(&self) -> impl Iterator<Item = (usize, &FailureReport)> {
        self.arrangements
            .iter()
            .filter_map(|a| a.failure.as_ref().map(|f| (a.arrangement_id, f)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub total_ms: f64,
    pub prepare_ms: f64,
    pub arrangements_ms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub report: RunReport,
    /// Successful candidates in arrangement order.
    pub candidates: Vec<ScoredCandidate>,
    pub selected: ScoredCandidate,
}

/// Highest combined score; ties go to the lowest arrangement id.
pub fn select_best(candidates: &[(usize, f64)]) -> Option<usize> {
    candidates
        .iter()
        .copied()
        .fold(None, |best: Option<(usize, f64)>, (id, s)| match best {
            Some((bid, bs)) if bs > s || (bs == s && bid < id) => Some((bid, bs)),
            _ => Some((id, s)),
        })
        .map(|(id, _)| id)
}

pub struct Engine {
    backends: Backends,
    runs_root: PathBuf,
}

struct ArrangementWork {
    arrangement: Arrangement,
    assignment: SlotAssignment,
    seed: u64,
}

struct ArrangementResult {
    candidate: Result<ScoredCandidate, EngineError>,
    files: ArtifactFiles,
    elapsed_ms: f64,
}

impl Engine {
    pub fn new(backends: Backends, runs_root: impl Into<PathBuf>) -> Self {
        Self {
            backends,
            runs_root: runs_root.into(),
        }
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn runs_root(&self) -> &Path {
        &self.runs_root
    }

    /// Cached bank embeddings, embedding and saving whatever is missing.
    pub fn bank_vectors(&self, bank: &ThemeBank) -> Result<Vec<(ImageId, EmbeddingVector)>, EngineError> {
        let embedder = self.backends.embedder.as_ref();
        let mut cache = EmbeddingCache::load(bank.root(), embedder.descriptor())?;
        match cache.vectors_for(bank.manifest()) {
            Ok(v) => return Ok(v),
            Err(BankError::PartialCache { .. }) => {}
            Err(e) => return Err(e.into()),
        }
        let lock = match bank.lock() {
            Ok(l) => Some(l),
            Err(BankError::Locked(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let stats = build_cache(bank, embedder, &mut cache)?;
        if lock.is_some() {
            cache.save(bank.root())?;
        } else {
            warn!("bank is locked, embeddings kept in memory only");
        }
        info!(embedded = stats.embedded, reused = stats.reused, "indexed bank");
        Ok(cache.vectors_for(bank.manifest())?)
    }

    /// Extraction and matching.
    pub fn prepare(&self, bank: &ThemeBank, prompt: &str, config: &EngineConfig) -> Result<Prepared, EngineError> {
        let prompt = prompt.trim();
        if prompt.is_empty() {
            return Err(crate::error::IntentError::EmptyPrompt.into());
        }
        let elements = match &config.elements {
            Some(list) => override_elements(list)?,
            None => extract_elements(
                &ExtractionRequest::new(prompt).with_n(config.n),
                self.backends.llm.as_deref(),
            )?,
        };
        let phrases: Vec<&str> = elements.iter().map(|e| e.phrase.as_str()).collect();
        let element_vecs = self.backends.embedder.embed_texts(&phrases)?;
        let bank_vecs = self.bank_vectors(bank)?;
        let table = match_elements(&element_vecs, &bank_vecs, config.k)?;
        Ok(Prepared {
            prompt: prompt.to_string(),
            elements,
            table,
        })
    }

    pub fn config_echo(&self, config: &EngineConfig, pins: &Pins) -> Result<ConfigEcho, EngineError> {
        Ok(ConfigEcho {
            n: config.elements.as_ref().map_or(config.n, Vec::len),
            k: config.k,
            elements_override: config.elements.is_some(),
            grid: config.grid,
            stars: config.stars.resolve(&config.grid)?,
            pins: pins.clone(),
            weights: config.weights,
            guidance_scale: config.guidance_scale,
            steps: config.steps,
            seed: config.seed,
            seed_per_arrangement: config.seed_per_arrangement,
            border_px: config.border_px,
            embedder: self.backends.embedder.descriptor().name,
            inpainter: self.backends.inpainter.name().to_string(),
            quality: self.backends.quality.as_ref().map(|q| q.name().to_string()),
        })
    }

    /// Content-derived id: the same bank, prompt and configuration always
    /// map to the same run directory.
    pub fn run_id_for(&self, bank: &ThemeBank, prompt: &str, config: &EngineConfig, pins: &Pins) -> Result<String, EngineError> {
        let echo = self.config_echo(config, pins)?;
        let mut h = Sha256::new();
        h.update(bank.digest_hex().as_bytes());
        h.update([0]);
        h.update(prompt.trim().as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(&echo)?);
        h.update([0]);
        h.update(serde_json::to_vec(&config.elements)?);
        Ok(format!("run-{}", &hex::encode(h.finalize())[..16]))
    }

    pub fn generate(&self, bank: &ThemeBank, prompt: &str, config: &EngineConfig) -> Result<RunOutcome, EngineError> {
        let started = Instant::now();
        let prepared = self.prepare(bank, prompt, config)?;
        let prepare_ms = started.elapsed().as_secs_f64() * 1e3;
        let run_id = self.run_id_for(bank, prompt, config, &Pins::new())?;
        self.execute(bank, &prepared, &Pins::new(), config, &run_id, prepare_ms)
    }

    /// One pass over every arrangement of a prepared prompt.
    pub fn execute(
        &self,
        bank: &ThemeBank,
        prepared: &Prepared,
        pins: &Pins,
        config: &EngineConfig,
        run_id: &str,
        prepare_ms: f64,
    ) -> Result<RunOutcome, EngineError> {
        let started = Instant::now();
        config.weights.validate()?;
        let grid = config.grid;
        validate_pins(&grid, pins)?;
        for id in pins.values() {
            if bank.manifest().entry(id).is_none() {
                return Err(BankError::UnknownImage(*id).into());
            }
        }
        let echo = self.config_echo(config, pins)?;
        let stars = echo.stars.clone();
        let n = prepared.table.n();

        let mut work = Vec::new();
        for arrangement in enumerate_arrangements(n)? {
            let assignment = assign_slots(&prepared.table, &arrangement, &grid, &stars, pins)?;
            let seed = config.seed_for(arrangement.id);
            GenerationParams { seed, ..self.params(config, &prepared.prompt) }.validate()?;
            work.push(ArrangementWork { arrangement, assignment, seed });
        }

        let bank_vecs: BTreeMap<ImageId, EmbeddingVector> = self.bank_vectors(bank)?.into_iter().collect();
        let mut needed: BTreeSet<ImageId> = prepared.table.unique_images().into_iter().collect();
        needed.extend(pins.values().copied());
        let images = bank.load_images(needed)?;
        let refs: Vec<EmbeddingVector> = prepared
            .table
            .unique_images()
            .iter()
            .map(|id| bank_vecs[id].clone())
            .collect();
        let text_vec = self.backends.embedder.embed_text(&prepared.prompt)?;

        let run_dir = self.runs_root.join(run_id);
        if run_dir.exists() {
            std::fs::remove_dir_all(&run_dir)?;
        }
        std::fs::create_dir_all(&run_dir)?;

        let ctx = RunContext {
            engine: self,
            config,
            prompt: &prepared.prompt,
            images: &images,
            refs: &refs,
            text_vec: &text_vec,
            run_dir: &run_dir,
        };
        let results = ctx.fan_out(&work);

        let mut arrangements = Vec::new();
        let mut candidates = Vec::new();
        let mut first_error = None;
        let mut all_retryable = true;
        let mut arrangements_ms = Vec::new();
        for (w, r) in work.iter().zip(results) {
            arrangements_ms.push(r.elapsed_ms);
            let (scores, canvas_sha256, failure) = match r.candidate {
                Ok(c) => {
                    let out = (Some(c.scores), Some(c.canvas_sha256()), None);
                    candidates.push(c);
                    out
                }
                Err(e) => {
                    warn!(arrangement = w.arrangement.id, error = %e, "arrangement failed");
                    let f = FailureReport {
                        code: e.code().to_string(),
                        message: e.to_string(),
                        retryable: e.is_retryable(),
                    };
                    first_error.get_or_insert_with(|| format!("{}: {}", f.code, f.message));
                    all_retryable &= f.retryable;
                    (None, None, Some(f))
                }
            };
            arrangements.push(ArrangementReport {
                arrangement_id: w.arrangement.id,
                row_assignment: w.arrangement.row_assignment.clone(),
                seed: w.seed,
                assignment: w.assignment.clone(),
                scores,
                canvas_sha256,
                files: r.files,
                failure,
            });
        }

        let ranked: Vec<(usize, f64)> = candidates
            .iter()
            .map(|c| (c.arrangement_id, c.scores.combined))
            .collect();
        let Some(best) = select_best(&ranked) else {
            return Err(EngineError::AllArrangementsFailed {
                first: first_error.unwrap_or_default(),
                retryable: all_retryable,
            });
        };
        let selected = candidates
            .iter()
            .find(|c| c.arrangement_id == best)
            .cloned()
            .expect("selected id comes from candidates");

        let report = RunReport {
            version: REPORT_VERSION,
            run_id: run_id.to_string(),
            status: if candidates.len() == work.len() {
                RunStatus::Complete
            } else {
                RunStatus::Partial
            },
            bank: BankSummary {
                theme: bank.manifest().theme_name.clone(),
                digest: bank.digest_hex(),
                images: bank.len(),
            },
            prompt: prepared.prompt.clone(),
            elements: prepared.elements.clone(),
            candidates: prepared.table.clone(),
            config: echo,
            arrangements,
            selected: SelectedReport {
                arrangement_id: best,
                combined: selected.scores.combined,
                canvas_sha256: selected.canvas_sha256(),
            },
        };
        write_atomic(&run_dir.join(REPORT_FILE), &report.to_json())?;
        let timings = Timings {
            total_ms: prepare_ms + started.elapsed().as_secs_f64() * 1e3,
            prepare_ms,
            arrangements_ms,
        };
        write_atomic(&run_dir.join(TIMINGS_FILE), &serde_json::to_vec_pretty(&timings)?)?;

        Ok(RunOutcome {
            run_id: run_id.to_string(),
            run_dir,
            report,
            candidates,
            selected,
        })
    }

    fn params(&self, config: &EngineConfig, prompt: &str) -> GenerationParams {
        GenerationParams {
            guidance_scale: config.guidance_scale,
            steps: config.steps,
            seed: config.seed,
            prompt: prompt.to_string(),
        }
    }
}

struct RunContext<'a> {
    engine: &'a Engine,
    config: &'a EngineConfig,
    prompt: &'a str,
    images: &'a BTreeMap<ImageId, RasterImage>,
    refs: &'a [EmbeddingVector],
    text_vec: &'a EmbeddingVector,
    run_dir: &'a Path,
}

impl RunContext<'_> {
    /// Runs every arrangement on up to `max_parallel` threads; results come
    /// back in input order whatever the completion order.
    fn fan_out(&self, work: &[ArrangementWork]) -> Vec<ArrangementResult> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<ArrangementResult>>> =
            Mutex::new((0..work.len()).map(|_| None).collect());
        let threads = self.config.max_parallel.clamp(1, work.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(w) = work.get(i) else { break };
                    let r = self.run_one(w);
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every arrangement ran"))
            .collect()
    }

    fn run_one(&self, w: &ArrangementWork) -> ArrangementResult {
        let started = Instant::now();
        let rel = format!("arrangement-{}", w.arrangement.id);
        let dir = self.run_dir.join(&rel);
        let mut files = ArtifactFiles {
            composite: format!("{rel}/{COMPOSITE_FILE}"),
            mask: format!("{rel}/{MASK_FILE}"),
            result: None,
            canvas: None,
        };
        let candidate = self.generate_one(w, &dir, &rel, &mut files);
        ArrangementResult {
            candidate,
            files,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        }
    }

    fn generate_one(
        &self,
        w: &ArrangementWork,
        dir: &Path,
        rel: &str,
        files: &mut ArtifactFiles,
    ) -> Result<ScoredCandidate, EngineError> {
        let backends = &self.engine.backends;
        let vp: VisualPrompt = compose_with(
            &w.assignment,
            self.images,
            &self.config.grid,
            ComposeOptions {
                border_px: self.config.border_px,
            },
        )?;
        vp.write_to(dir)?;
        let params = GenerationParams {
            seed: w.seed,
            ..self.engine.params(self.config, self.prompt)
        };
        let result = backends.inpainter.inpaint(&vp, &params)?;
        let canvas = crop_canvas(&result, &self.config.grid)?;
        result.save_png(&dir.join(RESULT_FILE))?;
        files.result = Some(format!("{rel}/{RESULT_FILE}"));
        canvas.save_png(&dir.join(CANVAS_FILE))?;
        files.canvas = Some(format!("{rel}/{CANVAS_FILE}"));

        let image_vec = backends.embedder.embed_image(&canvas)?;
        let quality = backends
            .quality
            .as_ref()
            .map(|q| q.score(&canvas, self.prompt))
            .transpose()?;
        let scores = score_embeddings(&image_vec, self.text_vec, self.refs, quality, &self.config.weights)?;
        Ok(ScoredCandidate {
            arrangement_id: w.arrangement.id,
            row_assignment: w.arrangement.row_assignment.clone(),
            image: canvas,
            scores,
        })
    }
}
