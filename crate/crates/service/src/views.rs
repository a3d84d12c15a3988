//! JSON shapes returned by the `/v1` endpoints.

use serde::{Deserialize, Serialize};

use dvp_core::bank::{ImageId, ThemeBank};
use dvp_core::engine::{
    EngineConfig, FailureReport, HistoryEntry, RunReport, RunStatus, ScoreBreakdown, ScoreWeights, Session,
};
use dvp_core::generation::JobStatus;
use dvp_core::intent::KeyElement;
use dvp_core::layout::{CanvasRect, Cell, GridSpec, Pin, Slot, StarPolicy};

use crate::error::ApiError;

pub fn image_url(bank_id: &str, id: &ImageId) -> String {
    format!("/v1/banks/{bank_id}/images/{}", id.to_hex())
}

pub fn artifact_url(sha: &str) -> String {
    format!("/v1/artifacts/{sha}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankImageView {
    pub image_id: ImageId,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankView {
    pub bank_id: String,
    pub theme: String,
    pub digest: String,
    pub image_count: usize,
    pub images: Vec<BankImageView>,
    pub warnings: Vec<String>,
}

impl BankView {
    pub fn new(bank_id: &str, bank: &ThemeBank) -> Self {
        let m = bank.manifest();
        Self {
            bank_id: bank_id.to_string(),
            theme: m.theme_name.clone(),
            digest: bank.digest_hex(),
            image_count: m.len(),
            images: m
                .entries
                .iter()
                .map(|e| BankImageView {
                    image_id: e.image_id,
                    path: e.path.clone(),
                    width: e.width,
                    height: e.height,
                    url: image_url(bank_id, &e.image_id),
                })
                .collect(),
            warnings: m.warnings.iter().map(|w| w.message.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridView {
    pub rows: u32,
    pub cols: u32,
    pub cell_px: u32,
    pub canvas: CanvasRect,
    pub reference_cells: Vec<Cell>,
    /// Cells that receive each element's best candidates.
    pub stars: Vec<Cell>,
}

impl GridView {
    pub fn new(g: &GridSpec, stars: &StarPolicy) -> Self {
        Self {
            rows: g.rows(),
            cols: g.cols(),
            cell_px: g.cell_px(),
            canvas: g.canvas(),
            reference_cells: g.reference_cells(),
            stars: stars.resolve(g).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub image_id: ImageId,
    pub score: f64,
    pub thumbnail_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub bank_id: String,
    pub prompt: String,
    pub elements: Vec<KeyElement>,
    /// One row per element, best match first.
    pub candidates: Vec<Vec<CandidateView>>,
    pub grid: GridView,
    pub pins: Vec<Pin>,
    pub config: EngineConfig,
    pub history: Vec<HistoryEntry>,
}

impl SessionView {
    pub fn new(bank_id: &str, s: &Session) -> Self {
        Self {
            session_id: s.session_id.clone(),
            bank_id: bank_id.to_string(),
            prompt: s.prompt.clone(),
            elements: s.elements.clone(),
            candidates: s
                .table
                .rows()
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|m| CandidateView {
                            image_id: m.image_id,
                            score: m.score,
                            thumbnail_url: image_url(bank_id, &m.image_id),
                        })
                        .collect()
                })
                .collect(),
            grid: GridView::new(&s.config.grid, &s.config.stars),
            pins: s
                .pins
                .iter()
                .map(|(&cell, &image_id)| Pin { cell, image_id })
                .collect(),
            config: s.config.clone(),
            history: s.history.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactUrls {
    pub composite: String,
    pub mask: String,
    pub result: Option<String>,
    pub canvas: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrangementView {
    pub arrangement_id: usize,
    pub row_assignment: Vec<usize>,
    pub seed: u64,
    pub slots: Vec<Slot>,
    pub scores: Option<ScoreBreakdown>,
    pub artifacts: ArtifactUrls,
    pub failure: Option<FailureReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResultView {
    pub status: RunStatus,
    pub prompt: String,
    pub elements: Vec<KeyElement>,
    pub weights: ScoreWeights,
    pub selected: usize,
    pub arrangements: Vec<ArrangementView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub session_id: String,
    pub status: JobStatus,
    pub error: Option<ApiError>,
    pub result: Option<RunResultView>,
}

impl RunResultView {
    /// `url` maps a file path relative to the run directory to its artifact URL.
    pub fn new(report: &RunReport, mut url: impl FnMut(&str) -> Result<String, ApiError>) -> Result<Self, ApiError> {
        let mut arrangements = Vec::with_capacity(report.arrangements.len());
        for a in &report.arrangements {
            let f = &a.files;
            arrangements.push(ArrangementView {
                arrangement_id: a.arrangement_id,
                row_assignment: a.row_assignment.clone(),
                seed: a.seed,
                slots: a.assignment.slots.clone(),
                scores: a.scores,
                artifacts: ArtifactUrls {
                    composite: url(&f.composite)?,
                    mask: url(&f.mask)?,
                    result: f.result.as_deref().map(&mut url).transpose()?,
                    canvas: f.canvas.as_deref().map(&mut url).transpose()?,
                },
                failure: a.failure.clone(),
            });
        }
        Ok(Self {
            status: report.status,
            prompt: report.prompt.clone(),
            elements: report.elements.clone(),
            weights: report.config.weights,
            selected: report.selected.arrangement_id,
            arrangements,
        })
    }
}
