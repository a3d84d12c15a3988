//! Multi-turn refinement: a session keeps the prompt, its candidate table,
//! the user's pins and an append-only run history on disk.

use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Engine, EngineConfig, Prepared, RunOutcome, RunStatus, ScoreBreakdown, ScoreWeights};
use crate::bank::{ImageId, ThemeBank};
use crate::error::BankError;
use crate::error::EngineError;
use crate::fsutil::write_atomic;
use crate::intent::KeyElement;
use crate::layout::{pin_list, validate_pins, Cell, Pins};
use crate::similarity::CandidateTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub arrangement_id: usize,
    pub scores: ScoreBreakdown,
    pub canvas_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub run_id: String,
    pub prompt: String,
    pub weights: ScoreWeights,
    #[serde(with = "pin_list")]
    pub pins: Pins,
    pub status: RunStatus,
    pub candidates: Vec<CandidateSummary>,
    /// The engine's pick.
    pub selected: usize,
    /// A later override by the user, if any.
    pub user_selected: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub bank_root: PathBuf,
    pub bank_digest: String,
    pub prompt: String,
    pub elements: Vec<KeyElement>,
    pub table: CandidateTable,
    #[serde(with = "pin_list")]
    pub pins: Pins,
    pub config: EngineConfig,
    pub history: Vec<HistoryEntry>,
}

/// Changes applied before re-running a session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineRequest {
    /// Replaces the session's pins.
    pub pins: Option<Pins>,
    /// Triggers fresh extraction and matching.
    pub new_prompt: Option<String>,
    pub weights: Option<ScoreWeights>,
}

impl Session {
    pub fn new(session_id: String, bank: &ThemeBank, prepared: Prepared, config: EngineConfig) -> Self {
        Self {
            session_id,
            bank_root: bank.root().to_path_buf(),
            bank_digest: bank.digest_hex(),
            prompt: prepared.prompt,
            elements: prepared.elements,
            table: prepared.table,
            pins: Pins::new(),
            config,
            history: Vec::new(),
        }
    }

    pub fn prepared(&self) -> Prepared {
        Prepared {
            prompt: self.prompt.clone(),
            elements: self.elements.clone(),
            table: self.table.clone(),
        }
    }

    pub fn pin(&mut self, cell: Cell, image_id: ImageId, bank: &ThemeBank) -> Result<(), EngineError> {
        let one = Pins::from([(cell, image_id)]);
        validate_pins(&self.config.grid, &one)?;
        if bank.manifest().entry(&image_id).is_none() {
            return Err(BankError::UnknownImage(image_id).into());
        }
        self.pins.insert(cell, image_id);
        Ok(())
    }

    /// Returns whether a pin was removed.
    pub fn unpin(&mut self, cell: Cell) -> bool {
        self.pins.remove(&cell).is_some()
    }

    pub fn record(&mut self, outcome: &RunOutcome) {
        self.history.push(HistoryEntry {
            run_id: outcome.run_id.clone(),
            prompt: outcome.report.prompt.clone(),
            weights: outcome.report.config.weights,
            pins: outcome.report.config.pins.clone(),
            status: outcome.report.status,
            candidates: outcome
                .candidates
                .iter()
                .map(|c| CandidateSummary {
                    arrangement_id: c.arrangement_id,
                    scores: c.scores,
                    canvas_sha256: c.canvas_sha256(),
                })
                .collect(),
            selected: outcome.report.selected.arrangement_id,
            user_selected: None,
        });
    }

    /// Records the user's choice for a past run.
    pub fn select(&mut self, run_id: &str, arrangement_id: usize) -> Result<&HistoryEntry, EngineError> {
        let entry = self
            .history
            .iter_mut()
            .find(|h| h.run_id == run_id)
            .ok_or_else(|| EngineError::UnknownRun(run_id.to_string()))?;
        if !entry.candidates.iter().any(|c| c.arrangement_id == arrangement_id) {
            return Err(EngineError::InvalidSelection(format!(
                "run {run_id} has no successful arrangement {arrangement_id}"
            )));
        }
        entry.user_selected = Some(arrangement_id);
        Ok(entry)
    }
}

/// One JSON file per session under a directory.
#[derive(Debug)]
pub struct SessionStore {
    root: PathBuf,
    ids: Mutex<()>,
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, EngineError> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            ids: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, id: &str) -> Option<PathBuf> {
        let ok = !id.is_empty()
            && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        ok.then(|| self.root.join(format!("{id}.json")))
    }

    pub fn ids(&self) -> Result<Vec<String>, EngineError> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.root)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".json") {
                if !name.starts_with('.') {
                    out.push(id.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Saves a new session under the next free `s-NNNNNN` id.
    pub fn create(&self, mut session: Session) -> Result<Session, EngineError> {
        let _g = self.ids.lock().unwrap();
        let next = self
            .ids()?
            .iter()
            .filter_map(|id| id.strip_prefix("s-")?.parse::<u64>().ok())
            .max()
            .unwrap_or(0)
            + 1;
        session.session_id = format!("s-{next:06}");
        self.save(&session)?;
        Ok(session)
    }

    pub fn save(&self, session: &Session) -> Result<(), EngineError> {
        let path = self
            .path(&session.session_id)
            .ok_or_else(|| EngineError::UnknownSession(session.session_id.clone()))?;
        let mut bytes = serde_json::to_vec_pretty(session)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<Session, EngineError> {
        let path = self
            .path(id)
            .ok_or_else(|| EngineError::UnknownSession(id.to_string()))?;
        match std::fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == ErrorKind::NotFound => Err(EngineError::UnknownSession(id.to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Engine {
    /// Extracts and matches, then stores a new session.
    pub fn open_session(
        &self,
        store: &SessionStore,
        bank: &ThemeBank,
        prompt: &str,
        config: EngineConfig,
    ) -> Result<Session, EngineError> {
        let prepared = self.prepare(bank, prompt, &config)?;
        store.create(Session::new(String::new(), bank, prepared, config))
    }

    /// Applies `req`, runs every arrangement with the session's pins and
    /// appends the run to the history. The caller persists the session.
    pub fn refine(
        &self,
        session: &mut Session,
        bank: &ThemeBank,
        req: RefineRequest,
        run_id: &str,
    ) -> Result<RunOutcome, EngineError> {
        let mut config = session.config.clone();
        if let Some(w) = req.weights {
            w.validate()?;
            config.weights = w;
        }
        let pins = req.pins.unwrap_or_else(|| session.pins.clone());
        validate_pins(&config.grid, &pins)?;

        let mut prepared = session.prepared();
        let mut fresh = false;
        if let Some(p) = req.new_prompt.as_deref() {
            config.elements = None;
            prepared = self.prepare(bank, p, &config)?;
            fresh = true;
        } else if bank.digest_hex() != session.bank_digest {
            prepared = self.prepare(bank, &session.prompt, &config)?;
            fresh = true;
        }

        let outcome = self.execute(bank, &prepared, &pins, &config, run_id, 0.0)?;
        if fresh {
            session.prompt = prepared.prompt;
            session.elements = prepared.elements;
            session.table = prepared.table;
            session.bank_digest = bank.digest_hex();
        }
        session.config = config;
        session.pins = pins;
        session.record(&outcome);
        Ok(outcome)
    }
}
