use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use dvp_core::bank::{build_cache, verify_cache, EmbeddingCache, ImageId, ThemeBank, MANIFEST_FILE};
use dvp_core::engine::{
    Backends, Engine, EngineConfig, ProtocolTheme, RefineRequest, RunOutcome, ScoreWeights, Session, SessionStore,
};
use dvp_core::generation::{HttpInpaintBackend, MockInpainter};
use dvp_core::intent::HttpLlmBackend;
use dvp_core::layout::Cell;
use dvp_core::similarity::{EmbeddingBackend, HttpEmbeddingBackend, MockJointEmbedder};

use crate::config::{split_list, FileConfig, DEFAULT_RUNS_DIR, DEFAULT_SESSIONS_DIR};
use crate::{BankCommand, Cli, CliError, Command, EvaluateArgs, GenerateArgs, RefineCommand, ServeArgs, SessionDirs};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let out = Output { json: cli.json };
    match &cli.command {
        Command::Bank(cmd) => bank(cmd, &file, &out),
        Command::Generate(args) => generate(args, &file, &out),
        Command::Refine(cmd) => refine(cmd, &file, &out),
        Command::Evaluate(args) => evaluate(args, &file, &out),
        Command::Serve(args) => serve(args, &file, &out),
    }
}

struct Output {
    json: bool,
}

impl Output {
    /// Prints `value` as JSON, or `text` otherwise.
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
        } else {
            print!("{}", text());
        }
    }
}

fn embedder(mock: bool) -> Result<Arc<dyn EmbeddingBackend>> {
    if mock {
        return Ok(Arc::new(MockJointEmbedder::default()));
    }
    HttpEmbeddingBackend::from_env()
        .map(|e| Arc::new(e) as Arc<dyn EmbeddingBackend>)
        .map_err(|e| no_backend(e.to_string()))
}

fn no_backend(msg: String) -> CliError {
    CliError::Domain(crate::ErrorReport {
        code: "BackendUnavailable".into(),
        message: format!("{msg}; configure DVP_EMBED_URL and DVP_GEN_URL or pass --mock-backends"),
        retryable: false,
    })
}

fn backends(mock: bool) -> Result<Backends> {
    if mock {
        return Ok(Backends {
            embedder: Arc::new(MockJointEmbedder::default()),
            inpainter: Arc::new(MockInpainter::new()),
            llm: None,
            quality: None,
        });
    }
    let inpainter = HttpInpaintBackend::from_env().map_err(|e| no_backend(e.to_string()))?;
    let llm = match std::env::var_os("DVP_LLM_URL") {
        Some(_) => Some(Arc::new(HttpLlmBackend::from_env().map_err(|e| no_backend(e.to_string()))?) as _),
        None => None,
    };
    Ok(Backends {
        embedder: embedder(false)?,
        inpainter: Arc::new(inpainter),
        llm,
        quality: None,
    })
}

fn dir_name(dir: &Path) -> String {
    std::fs::canonicalize(dir)
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "theme".into())
}

/// Opens the bank at `dir`, ingesting it first if it has no manifest.
fn open_or_ingest(dir: &Path) -> Result<ThemeBank> {
    if dir.join(MANIFEST_FILE).is_file() {
        Ok(ThemeBank::open(dir)?)
    } else {
        Ok(ThemeBank::create(dir, &dir_name(dir))?)
    }
}

#[derive(Serialize)]
struct BankSummaryOut {
    root: PathBuf,
    theme: String,
    digest: String,
    images: usize,
    warnings: Vec<String>,
}

fn bank(cmd: &BankCommand, file: &FileConfig, out: &Output) -> Result<()> {
    match cmd {
        BankCommand::Ingest { dir, theme } => {
            let theme = theme.clone().unwrap_or_else(|| dir_name(dir));
            if theme.trim().is_empty() {
                return Err(CliError::Usage("--theme must not be empty".into()));
            }
            let b = ThemeBank::create(dir, theme.trim())?;
            let m = b.manifest();
            let summary = BankSummaryOut {
                root: dir.clone(),
                theme: m.theme_name.clone(),
                digest: b.digest_hex(),
                images: m.len(),
                warnings: m.warnings.iter().map(|w| w.message.clone()).collect(),
            };
            out.emit(&summary, || {
                let mut s = format!(
                    "ingested {} images into theme {:?}\ndigest {}\n",
                    summary.images, summary.theme, summary.digest
                );
                for w in &summary.warnings {
                    s.push_str(&format!("warning: {w}\n"));
                }
                s
            });
        }
        BankCommand::Index { dir, mock_backends } => {
            let mock = mock_backends.or(file.mock_backends).unwrap_or(false);
            let backend = embedder(mock)?;
            let b = ThemeBank::open(dir)?;
            let _lock = b.lock()?;
            let mut cache = EmbeddingCache::load(b.root(), backend.descriptor())?;
            let stats = build_cache(&b, backend.as_ref(), &mut cache)
                .map_err(dvp_core::error::EngineError::from)?;
            let path = cache.save(b.root())?;
            let value = json!({
                "cache": path,
                "backend": backend.descriptor().name,
                "embedded": stats.embedded,
                "reused": stats.reused,
                "pruned": stats.pruned,
            });
            out.emit(&value, || {
                format!(
                    "embedded {}, reused {}, pruned {}\ncache {}\n",
                    stats.embedded,
                    stats.reused,
                    stats.pruned,
                    path.display()
                )
            });
        }
        BankCommand::Verify { dir, mock_backends } => {
            let mock = mock_backends.or(file.mock_backends).unwrap_or(false);
            let backend = embedder(mock)?;
            let b = ThemeBank::open(dir)?;
            let cache = EmbeddingCache::load(b.root(), backend.descriptor())?;
            let report = verify_cache(&b, &cache);
            out.emit(&report, || {
                let short = |ids: &[ImageId]| ids.iter().map(|i| i.short()).collect::<Vec<_>>().join(" ");
                if report.clean {
                    format!("clean: {} images, all embedded\n", b.len())
                } else {
                    format!(
                        "stale: [{}]\nmissing: [{}]\norphaned: [{}]\n",
                        short(&report.stale),
                        short(&report.missing),
                        short(&report.orphaned)
                    )
                }
            });
            if !report.clean {
                return Err(CliError::domain(
                    "CacheDirty",
                    format!(
                        "{} stale, {} missing, {} orphaned",
                        report.stale.len(),
                        report.missing.len(),
                        report.orphaned.len()
                    ),
                ));
            }
        }
    }
    Ok(())
}

fn with_elements(mut config: EngineConfig, elements: Option<&str>) -> Result<EngineConfig> {
    if let Some(e) = elements {
        let list = split_list(e);
        if list.is_empty() {
            return Err(CliError::Usage("--elements needs at least one element".into()));
        }
        config.n = list.len();
        config.elements = Some(list);
    }
    Ok(config)
}

#[derive(Serialize)]
struct ArrangementLine {
    arrangement_id: usize,
    row_assignment: Vec<usize>,
    text_score: Option<f64>,
    image_score: Option<f64>,
    combined: Option<f64>,
    failure: Option<String>,
}

#[derive(Serialize)]
struct RunSummary {
    run_id: String,
    run_dir: PathBuf,
    status: dvp_core::engine::RunStatus,
    elements: Vec<String>,
    selected_arrangement: usize,
    selected_combined: f64,
    canvas_sha256: String,
    canvas: PathBuf,
    arrangements: Vec<ArrangementLine>,
}

impl RunSummary {
    fn new(o: &RunOutcome) -> Self {
        let sel = o.report.selected.arrangement_id;
        let canvas = o
            .report
            .arrangements
            .iter()
            .find(|a| a.arrangement_id == sel)
            .and_then(|a| a.files.canvas.as_ref())
            .map(|c| o.run_dir.join(c))
            .unwrap_or_default();
        Self {
            run_id: o.run_id.clone(),
            run_dir: o.run_dir.clone(),
            status: o.report.status,
            elements: o.report.elements.iter().map(|e| e.phrase.clone()).collect(),
            selected_arrangement: sel,
            selected_combined: o.report.selected.combined,
            canvas_sha256: o.selected.canvas_sha256(),
            canvas,
            arrangements: o
                .report
                .arrangements
                .iter()
                .map(|a| ArrangementLine {
                    arrangement_id: a.arrangement_id,
                    row_assignment: a.row_assignment.clone(),
                    text_score: a.scores.map(|s| s.text_score),
                    image_score: a.scores.map(|s| s.image_score),
                    combined: a.scores.map(|s| s.combined),
                    failure: a.failure.as_ref().map(|f| f.code.clone()),
                })
                .collect(),
        }
    }

    fn text(&self) -> String {
        let mut s = format!(
            "run {}\nelements: {}\n",
            self.run_id,
            self.elements.join(" | ")
        );
        for a in &self.arrangements {
            let mark = if a.arrangement_id == self.selected_arrangement { "*" } else { " " };
            match (a.combined, &a.failure) {
                (Some(c), _) => s.push_str(&format!(
                    "{mark} arrangement {} {:?}  text {:.4}  image {:.4}  combined {:.4}\n",
                    a.arrangement_id,
                    a.row_assignment,
                    a.text_score.unwrap_or_default(),
                    a.image_score.unwrap_or_default(),
                    c
                )),
                (None, f) => s.push_str(&format!(
                    "  arrangement {} {:?}  failed: {}\n",
                    a.arrangement_id,
                    a.row_assignment,
                    f.as_deref().unwrap_or("unknown")
                )),
            }
        }
        s.push_str(&format!(
            "selected arrangement {} (combined {:.4})\ncanvas {}\n",
            self.selected_arrangement,
            self.selected_combined,
            self.canvas.display()
        ));
        s
    }
}

fn generate(args: &GenerateArgs, file: &FileConfig, out: &Output) -> Result<()> {
    let config = with_elements(args.engine.engine_config(file)?, args.elements.as_deref())?;
    let backends = backends(args.engine.mock(file))?;
    let runs = args.runs_dir.clone().or_else(|| file.runs_dir.clone()).unwrap_or_else(|| DEFAULT_RUNS_DIR.into());
    let bank = open_or_ingest(&args.bank)?;
    let engine = Engine::new(backends, runs);
    let outcome = engine.generate(&bank, &args.prompt, &config)?;
    let summary = RunSummary::new(&outcome);
    out.emit(&summary, || summary.text());
    Ok(())
}

fn sessions_dir(dirs: &SessionDirs, file: &FileConfig) -> PathBuf {
    dirs.sessions_dir
        .clone()
        .or_else(|| file.sessions_dir.clone())
        .unwrap_or_else(|| DEFAULT_SESSIONS_DIR.into())
}

fn runs_dir(dirs: &SessionDirs, file: &FileConfig) -> PathBuf {
    dirs.runs_dir.clone().or_else(|| file.runs_dir.clone()).unwrap_or_else(|| DEFAULT_RUNS_DIR.into())
}

#[derive(Serialize)]
struct SessionOut<'a> {
    session_id: &'a str,
    prompt: &'a str,
    elements: Vec<&'a str>,
    /// Per element: (image id, score), best first.
    candidates: Vec<Vec<(String, f64)>>,
    pins: Vec<(Cell, String)>,
    runs: Vec<RunLine<'a>>,
}

#[derive(Serialize)]
struct RunLine<'a> {
    run_id: &'a str,
    selected: usize,
    user_selected: Option<usize>,
}

impl<'a> SessionOut<'a> {
    fn new(s: &'a Session) -> Self {
        Self {
            session_id: &s.session_id,
            prompt: &s.prompt,
            elements: s.elements.iter().map(|e| e.phrase.as_str()).collect(),
            candidates: s
                .table
                .rows()
                .iter()
                .map(|r| r.iter().map(|m| (m.image_id.to_hex(), m.score)).collect())
                .collect(),
            pins: s.pins.iter().map(|(c, id)| (*c, id.to_hex())).collect(),
            runs: s
                .history
                .iter()
                .map(|h| RunLine {
                    run_id: &h.run_id,
                    selected: h.selected,
                    user_selected: h.user_selected,
                })
                .collect(),
        }
    }

    fn text(&self) -> String {
        let mut s = format!("session {}\nprompt: {}\n", self.session_id, self.prompt);
        for (e, row) in self.elements.iter().zip(&self.candidates) {
            let ids: Vec<String> = row.iter().map(|(id, sc)| format!("{} ({sc:.3})", &id[..12])).collect();
            s.push_str(&format!("  {e}: {}\n", ids.join(", ")));
        }
        for (c, id) in &self.pins {
            s.push_str(&format!("  pin {},{} = {}\n", c.row, c.col, &id[..12]));
        }
        for r in &self.runs {
            let user = r.user_selected.map(|u| format!(", user chose {u}")).unwrap_or_default();
            s.push_str(&format!("  {}: selected {}{user}\n", r.run_id, r.selected));
        }
        s
    }
}

/// Resolves a full image id or a unique hex prefix against the bank.
fn find_image(bank: &ThemeBank, s: &str) -> Result<ImageId> {
    let s = s.trim().to_ascii_lowercase();
    let hits: Vec<ImageId> = bank.manifest().ids().filter(|id| id.to_hex().starts_with(&s)).collect();
    match hits[..] {
        [one] if !s.is_empty() => Ok(one),
        [] => Err(CliError::domain("UnknownImage", format!("no bank image matches {s:?}"))),
        _ => Err(CliError::Usage(format!("image prefix {s:?} is ambiguous"))),
    }
}

fn parse_cell(s: &str) -> Result<Cell> {
    s.parse().map_err(CliError::Usage)
}

fn refine(cmd: &RefineCommand, file: &FileConfig, out: &Output) -> Result<()> {
    match cmd {
        RefineCommand::New {
            bank,
            prompt,
            elements,
            dirs,
            engine,
        } => {
            let config = with_elements(engine.engine_config(file)?, elements.as_deref())?;
            let store = SessionStore::open(sessions_dir(dirs, file))?;
            let bank = open_or_ingest(bank)?;
            let eng = Engine::new(backends(engine.mock(file))?, runs_dir(dirs, file));
            let session = eng.open_session(&store, &bank, prompt, config)?;
            let view = SessionOut::new(&session);
            out.emit(&view, || view.text());
        }
        RefineCommand::Run {
            session,
            pins,
            unpins,
            prompt,
            weights,
            seed,
            dirs,
            mock_backends,
        } => {
            let store = SessionStore::open(sessions_dir(dirs, file))?;
            let mut s = store.load(session)?;
            let bank = ThemeBank::open(&s.bank_root)?;
            for u in unpins {
                s.unpin(parse_cell(u)?);
            }
            for p in pins {
                let (cell, id) = p
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("--pin {p:?} must look like ROW,COL=IMAGE_ID")))?;
                let id = find_image(&bank, id)?;
                s.pin(parse_cell(cell)?, id, &bank)?;
            }
            if let Some(seed) = seed {
                s.config.seed = *seed;
            }
            let weights = weights
                .as_deref()
                .map(ScoreWeights::parse)
                .transpose()
                .map_err(CliError::Usage)?;
            let mock = mock_backends.or(file.mock_backends).unwrap_or(false);
            let eng = Engine::new(backends(mock)?, runs_dir(dirs, file));
            let run_id = format!("{}-{:03}", s.session_id, s.history.len() + 1);
            let req = RefineRequest {
                pins: None,
                new_prompt: prompt.clone(),
                weights,
            };
            let outcome = eng.refine(&mut s, &bank, req, &run_id)?;
            store.save(&s)?;
            let summary = RunSummary::new(&outcome);
            out.emit(&summary, || summary.text());
        }
        RefineCommand::Select {
            session,
            run,
            arrangement,
            dirs,
        } => {
            let store = SessionStore::open(sessions_dir(dirs, file))?;
            let mut s = store.load(session)?;
            s.select(run, *arrangement)?;
            store.save(&s)?;
            let view = SessionOut::new(&s);
            out.emit(&view, || view.text());
        }
        RefineCommand::Show { session, dirs } => {
            let store = SessionStore::open(sessions_dir(dirs, file))?;
            let s = store.load(session)?;
            let view = SessionOut::new(&s);
            out.emit(&view, || view.text());
        }
    }
    Ok(())
}

fn evaluate(args: &EvaluateArgs, file: &FileConfig, out: &Output) -> Result<()> {
    let config = args.engine.engine_config(file)?;
    let seeds: Vec<u64> = split_list(args.seeds.as_deref().unwrap_or("0,1"))
        .iter()
        .map(|s| s.parse().map_err(|e| CliError::Usage(format!("seed {s:?}: {e}"))))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    let mut themes = Vec::new();
    for t in &args.themes {
        let (dir, prompts) = t
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--theme {t:?} must look like DIR=PROMPTS")))?;
        let text = std::fs::read_to_string(prompts)
            .map_err(|e| CliError::Usage(format!("cannot read prompts {prompts}: {e}")))?;
        let prompts: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        themes.push(ProtocolTheme {
            bank: open_or_ingest(Path::new(dir))?,
            prompts,
        });
    }
    let runs = args.runs_dir.clone().or_else(|| file.runs_dir.clone()).unwrap_or_else(|| DEFAULT_RUNS_DIR.into());
    let engine = Engine::new(backends(args.engine.mock(file))?, runs);
    let report = engine.run_protocol(&themes, &seeds, &config)?;
    if let Some(path) = &args.out {
        let mut bytes = serde_json::to_vec_pretty(&report).expect("serializable");
        bytes.push(b'\n');
        dvp_core::fsutil::write_atomic(path, &bytes)?;
    }
    out.emit(&report, || {
        let mut s = String::new();
        for t in &report.themes {
            s.push_str(&format!(
                "{:<16} images {:>3}  image_similarity {:.6}  text_similarity {:.6}\n",
                t.theme, t.scores.generated, t.scores.image_similarity, t.scores.text_similarity
            ));
        }
        s.push_str(&format!(
            "{:<16} images {:>3}  image_similarity {:.6}  text_similarity {:.6}\n",
            "overall", report.total_images, report.overall.image_similarity, report.overall.text_similarity
        ));
        s
    });
    Ok(())
}

fn serve(args: &ServeArgs, file: &FileConfig, out: &Output) -> Result<()> {
    let addr = args
        .addr
        .clone()
        .or_else(|| file.addr.clone())
        .unwrap_or_else(|| dvp_service::DEFAULT_ADDR.into());
    let addr: std::net::SocketAddr = addr
        .parse()
        .map_err(|e| CliError::Usage(format!("--addr {addr:?}: {e}")))?;
    let config = dvp_service::ServiceConfig {
        data_dir: args.data_dir.clone().or_else(|| file.data_dir.clone()).unwrap_or_else(|| "dvp-data".into()),
        max_concurrent_runs: args
            .max_concurrent_runs
            .or(file.max_concurrent_runs)
            .unwrap_or(dvp_service::DEFAULT_MAX_CONCURRENT_RUNS),
        cors_origin: args.cors_origin.clone().or_else(|| file.cors_origin.clone()),
        defaults: args.engine.engine_config(file)?,
    };
    let state = dvp_service::AppState::open(config, backends(args.engine.mock(file))?)
        .map_err(|e| CliError::Domain(crate::ErrorReport { code: e.code, message: e.message, retryable: e.retryable }))?;
    let listening = json!({ "listening": addr.to_string(), "data_dir": state.config().data_dir });
    out.emit(&listening, || format!("listening on http://{addr}\n"));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(dvp_service::serve(addr, state))?;
    Ok(())
}
