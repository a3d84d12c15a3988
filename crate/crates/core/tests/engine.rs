mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use dvp_core::composer::VisualPrompt;
use dvp_core::engine::{
    Backends, Engine, EngineConfig, RefineRequest, RunStatus, ScoreWeights, SessionStore,
    QualityScorer, REPORT_FILE,
};
use dvp_core::error::{BackendError, EngineError, GenerationError, LayoutError};
use dvp_core::generation::{GenerationParams, InpaintBackend, MockInpainter};
use dvp_core::layout::Cell;
use dvp_core::raster::RasterImage;
use dvp_core::similarity::{EmbeddingBackend, EmbeddingBackendDescriptor, EmbeddingVector, MockJointEmbedder};

use common::{bank, small_config};

#[derive(Default)]
struct Counting {
    calls: AtomicUsize,
    fail_rows: Vec<Vec<usize>>,
}

impl InpaintBackend for Counting {
    fn name(&self) -> &str {
        "counting"
    }

    fn inpaint(&self, vp: &VisualPrompt, p: &GenerationParams) -> Result<RasterImage, GenerationError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let rows: Vec<usize> = vp
            .assignment
            .slots
            .iter()
            .filter_map(|s| match s.source {
                dvp_core::layout::SlotSource::Candidate { element, .. } if s.cell.col == 0 => Some(element),
                _ => None,
            })
            .collect();
        if self.fail_rows.contains(&rows) {
            return Err(BackendError::Unavailable("flaky".into()).into());
        }
        MockInpainter::new().inpaint(vp, p)
    }
}

fn engine_with(inpainter: Arc<dyn InpaintBackend>, runs: &std::path::Path) -> Engine {
    Engine::new(
        Backends {
            inpainter,
            ..Backends::mock()
        },
        runs,
    )
}

#[test]
fn three_elements_make_six_generation_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let b = bank(&tmp.path().join("bank"), 12);
    let counter = Arc::new(Counting::default());
    let engine = engine_with(counter.clone(), &tmp.path().join("runs"));
    let out = engine.generate(&b, "Tintin rides a horse on the grassland", &small_config(7)).unwrap();
    assert_eq!(counter.calls.load(Ordering::SeqCst), 6);
    assert_eq!(out.candidates.len(), 6);
    assert_eq!(out.report.status, RunStatus::Complete);
    let phrases: Vec<_> = out.report.elements.iter().map(|e| e.phrase.as_str()).collect();
    assert_eq!(phrases, ["Tintin", "horse", "grassland"]);
    for a in &out.report.arrangements {
        let dir = out.run_dir.join(format!("arrangement-{}", a.arrangement_id));
        for f in ["prompt.composite.png", "prompt.mask.png", "result.png", "canvas.png"] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        let s = a.scores.unwrap();
        let w = out.report.config.weights;
        assert!((s.combined - w.combine(s.text_score, s.image_score, s.quality_score)).abs() < 1e-9);
    }
    assert!(out.run_dir.join(REPORT_FILE).is_file());
    assert!(out.run_dir.join("timings.json").is_file());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let b = bank(&tmp.path().join("bank"), 12);
    let engine = Engine::new(Backends::mock(), tmp.path().join("runs"));
    let cfg = small_config(7);
    let a = engine.generate(&b, "a red rocket over the sea", &cfg).unwrap();
    let report_a = std::fs::read(a.run_dir.join(REPORT_FILE)).unwrap();
    let b2 = engine.generate(&b, "a red rocket over the sea", &cfg).unwrap();
    let report_b = std::fs::read(b2.run_dir.join(REPORT_FILE)).unwrap();
    assert_eq!(a.run_id, b2.run_id);
    assert_eq!(report_a, report_b);
    assert_eq!(a.selected.canvas_sha256(), b2.selected.canvas_sha256());

    let other = engine.generate(&b, "a red rocket over the sea", &small_config(8)).unwrap();
    assert_ne!(other.run_id, a.run_id);
}

struct Constant(f64);

impl QualityScorer for Constant {
    fn name(&self) -> &str {
        "constant"
    }
    fn score(&self, _: &RasterImage, _: &str) -> Result<f64, BackendError> {
        Ok(self.0)
    }
}

#[test]
fn ties_select_lowest_arrangement() {
    let tmp = tempfile::tempdir().unwrap();
    let b = bank(&tmp.path().join("bank"), 12);
    let engine = Engine::new(
        Backends {
            quality: Some(Arc::new(Constant(0.5))),
            ..Backends::mock()
        },
        tmp.path().join("runs"),
    );
    let cfg = EngineConfig {
        weights: ScoreWeights::new(0.0, 0.0, 1.0).unwrap(),
        ..small_config(1)
    };
    let out = engine.generate(&b, "Snowy chases a ball", &cfg).unwrap();
    assert!(out.candidates.iter().all(|c| c.scores.combined == 0.5));
    assert_eq!(out.selected.arrangement_id, 0);
}

#[test]
fn partial_runs_keep_successes() {
    let tmp = tempfile::tempdir().unwrap();
    let b = bank(&tmp.path().join("bank"), 12);
    let counter = Arc::new(Counting {
        fail_rows: vec![vec![0, 1, 2], vec![1, 0, 2]],
        ..Counting::default()
    });
    let engine = engine_with(counter, &tmp.path().join("runs"));
    let out = engine.generate(&b, "Tintin rides a horse on the grassland", &small_config(3)).unwrap();
    assert_eq!(out.report.status, RunStatus::Partial);
    assert_eq!(out.candidates.len(), 4);
    let failed: Vec<usize> = out.report.failures().map(|(id, _)| id).collect();
    assert_eq!(failed.len(), 2);
    for (_, f) in out.report.failures() {
        assert_eq!(f.code, "BackendUnavailable");
        assert!(f.retryable);
    }
    assert!(!failed.contains(&out.selected.arrangement_id));
}

struct Down;

impl InpaintBackend for Down {
    fn name(&self) -> &str {
        "down"
    }
    fn inpaint(&self, _: &VisualPrompt, _: &GenerationParams) -> Result<RasterImage, GenerationError> {
        Err(BackendError::Unavailable("connection refused".into()).into())
    }
}

#[test]
fn all_failures_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let b = bank(&tmp.path().join("bank"), 12);
    let engine = engine_with(Arc::new(Down), &tmp.path().join("runs"));
    let err = engine.generate(&b, "a cat", &small_config(0)).unwrap_err();
    assert_eq!(err.code(), "AllArrangementsFailed");
    assert!(err.is_retryable());
}

#[test]
fn pins_appear_in_every_arrangement() {
    let tmp = tempfile::tempdir().unwrap();
    let b = bank(&tmp.path().join("bank"), 12);
    let engine = Engine::new(Backends::mock(), tmp.path().join("runs"));
    let store = SessionStore::open(tmp.path().join("sessions")).unwrap();
    let mut s = engine
        .open_session(&store, &b, "Tintin rides a horse on the grassland", small_config(7))
        .unwrap();
    let portrait = b.manifest().entries[11].image_id;
    s.pin(Cell::new(0, 0), portrait, &b).unwrap();
    let out = engine.refine(&mut s, &b, RefineRequest::default(), "r1").unwrap();
    assert_eq!(out.report.arrangements.len(), 6);
    for a in &out.report.arrangements {
        assert_eq!(a.assignment.image_at(Cell::new(0, 0)), Some(portrait));
    }
    assert!(matches!(
        s.pin(Cell::new(1, 1), portrait, &b),
        Err(EngineError::Layout(LayoutError::PinOnCanvas(1, 1)))
    ));

    let again = engine.refine(&mut s, &b, RefineRequest::default(), "r2").unwrap();
    assert_eq!(again.selected.canvas_sha256(), out.selected.canvas_sha256());
    assert_eq!(s.history.len(), 2);

    let swapped = engine
        .refine(
            &mut s,
            &b,
            RefineRequest {
                new_prompt: Some("Captain Haddock sails a ship".into()),
                ..RefineRequest::default()
            },
            "r3",
        )
        .unwrap();
    assert_eq!(s.history.len(), 3);
    assert_eq!(s.prompt, "Captain Haddock sails a ship");
    assert_eq!(swapped.report.elements[0].phrase, "Captain Haddock");

    store.save(&s).unwrap();
    let loaded = store.load(&s.session_id).unwrap();
    assert_eq!(loaded, s);
    assert!(matches!(store.load("s-999999"), Err(EngineError::UnknownSession(_))));
    assert!(matches!(store.load("../etc"), Err(EngineError::UnknownSession(_))));

    let pick = s.history[0].candidates.last().unwrap().arrangement_id;
    s.select("r1", pick).unwrap();
    assert_eq!(s.history[0].user_selected, Some(pick));
    assert!(s.select("nope", 0).is_err());
    assert!(s.unpin(Cell::new(0, 0)));
}

#[test]
fn element_override_sets_n() {
    let tmp = tempfile::tempdir().unwrap();
    let b = bank(&tmp.path().join("bank"), 12);
    let engine = Engine::new(Backends::mock(), tmp.path().join("runs"));
    let cfg = EngineConfig {
        elements: Some(vec!["Captain Haddock".into(), "ship".into()]),
        k: 4,
        ..small_config(2)
    };
    let out = engine.generate(&b, "anything", &cfg).unwrap();
    assert_eq!(out.report.elements.len(), 2);
    assert_eq!(out.candidates.len(), 2);
    assert_eq!(out.report.config.n, 2);
}

/// Multiplies every vector from the inner backend by a constant.
struct Scaled<E>(E, f32);

impl<E: EmbeddingBackend> EmbeddingBackend for Scaled<E> {
    fn descriptor(&self) -> EmbeddingBackendDescriptor {
        EmbeddingBackendDescriptor {
            name: format!("scaled-{}", self.1),
            ..self.0.descriptor()
        }
    }
    fn embed_texts(&self, t: &[&str]) -> Result<Vec<EmbeddingVector>, BackendError> {
        Ok(self.0.embed_texts(t)?.iter().map(|v| v.scaled(self.1).unwrap()).collect())
    }
    fn embed_images(&self, i: &[&RasterImage]) -> Result<Vec<EmbeddingVector>, BackendError> {
        Ok(self.0.embed_images(i)?.iter().map(|v| v.scaled(self.1).unwrap()).collect())
    }
}

#[test]
fn selection_survives_embedding_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let b = bank(&tmp.path().join("bank"), 12);
    let base = Engine::new(Backends::mock(), tmp.path().join("runs-a"));
    let scaled = Engine::new(
        Backends {
            embedder: Arc::new(Scaled(MockJointEmbedder::default(), 3.5)),
            ..Backends::mock()
        },
        tmp.path().join("runs-b"),
    );
    for seed in 0..3 {
        let cfg = small_config(seed);
        let a = base.generate(&b, "a dog walks through the old market", &cfg).unwrap();
        let s = scaled.generate(&b, "a dog walks through the old market", &cfg).unwrap();
        assert_eq!(a.selected.arrangement_id, s.selected.arrangement_id);
    }
}

#[test]
fn bad_inputs_fail_before_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let b = bank(&tmp.path().join("bank"), 12);
    let counter = Arc::new(Counting::default());
    let engine = engine_with(counter.clone(), &tmp.path().join("runs"));
    let err = engine.generate(&b, "   ", &small_config(0)).unwrap_err();
    assert_eq!(err.code(), "EmptyPrompt");
    let cfg = EngineConfig {
        weights: ScoreWeights { w_text: 0.0, w_image: 0.0, w_quality: 0.0 },
        ..small_config(0)
    };
    assert_eq!(engine.generate(&b, "a cat", &cfg).unwrap_err().code(), "InvalidWeights");
    let cfg = EngineConfig { k: 2, ..small_config(0) };
    assert_eq!(engine.generate(&b, "a cat", &cfg).unwrap_err().code(), "InsufficientCandidates");
    let cfg = EngineConfig { k: 40, ..small_config(0) };
    assert_eq!(engine.generate(&b, "a cat", &cfg).unwrap_err().code(), "KTooLarge");
    assert_eq!(counter.calls.load(Ordering::SeqCst), 0);
}
