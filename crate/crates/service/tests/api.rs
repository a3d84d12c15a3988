use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use dvp_core::engine::{Backends, EngineConfig};
use dvp_core::error::BackendError;
use dvp_core::layout::GridSpec;
use dvp_core::raster::RasterImage;
use dvp_core::similarity::{EmbeddingBackend, EmbeddingBackendDescriptor, EmbeddingVector, MockJointEmbedder};
use dvp_service::{router, AppState, ServiceConfig};

fn write_bank(dir: &Path, count: u32) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let mut img = RasterImage::filled(64, 64, [(30 + i * 17) as u8, (220 - i * 13) as u8, (60 + i * 29) as u8]);
        for y in 0..20 {
            for x in 0..20 {
                img.put_pixel((i * 3 + x) % 64, (i * 5 + y) % 64, [(i * 61 % 256) as u8, 10, 200]);
            }
        }
        img.save_png(&dir.join(format!("img{i:02}.png"))).unwrap();
    }
}

fn config(data: &Path) -> ServiceConfig {
    ServiceConfig {
        defaults: EngineConfig {
            grid: GridSpec::default_grid_px(32),
            seed: 7,
            ..EngineConfig::default()
        },
        ..ServiceConfig::new(data)
    }
}

fn app(data: &Path, backends: Backends) -> Router {
    router(AppState::open(config(data), backends).unwrap())
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|_| panic!("not JSON: {:?}", String::from_utf8_lossy(&self.bytes)))
    }

    fn code(&self) -> String {
        self.json()["code"].as_str().unwrap().to_string()
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply { status, headers, bytes }
}

async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Method::GET, uri, None).await
}

async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    call(app, Method::POST, uri, Some(body)).await
}

async fn wait_run(app: &Router, run_id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        let r = get(app, &format!("/v1/runs/{run_id}")).await;
        assert_eq!(r.status, StatusCode::OK);
        let v = r.json();
        if v["status"] == "done" || v["status"] == "failed" {
            return v;
        }
        assert!(Instant::now() < deadline, "run {run_id} did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn conformance() {
    let tmp = tempfile::tempdir().unwrap();
    let bank_dir = tmp.path().join("tintin");
    write_bank(&bank_dir, 12);
    let data = tmp.path().join("data");
    let app = app(&data, Backends::mock());

    let h = get(&app, "/v1/health").await;
    assert_eq!(h.status, StatusCode::OK);
    assert_eq!(h.json()["inpainter"], "mock-meanfill");

    // banks
    let b = post(&app, "/v1/banks", json!({"dir": bank_dir, "theme": "tintin"})).await;
    assert_eq!(b.status, StatusCode::OK);
    let bank = b.json();
    assert_eq!(bank["image_count"], 12);
    let bank_id = bank["bank_id"].as_str().unwrap().to_string();
    let image_id = bank["images"][0]["image_id"].as_str().unwrap().to_string();
    let other_image = bank["images"][5]["image_id"].as_str().unwrap().to_string();
    assert_eq!(get(&app, &format!("/v1/banks/{bank_id}")).await.json(), bank);

    let img = get(&app, bank["images"][0]["url"].as_str().unwrap()).await;
    assert_eq!(img.status, StatusCode::OK);
    assert_eq!(img.headers[header::CONTENT_TYPE], "image/png");
    let decoded = RasterImage::decode_png(&img.bytes).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (64, 64));

    let missing = post(&app, "/v1/banks", json!({"dir": tmp.path().join("nope"), "theme": "x"})).await;
    assert_eq!((missing.status, missing.code()), (StatusCode::BAD_REQUEST, "UnreadableDirectory".into()));
    let malformed = post(&app, "/v1/banks", json!({"directory": "x"})).await;
    assert_eq!((malformed.status, malformed.code()), (StatusCode::BAD_REQUEST, "BadRequest".into()));
    let r = get(&app, "/v1/banks/b-000000000000").await;
    assert_eq!((r.status, r.code()), (StatusCode::NOT_FOUND, "UnknownBank".into()));
    let r = get(&app, &format!("/v1/banks/{bank_id}/images/{}", "ab".repeat(32))).await;
    assert_eq!((r.status, r.code()), (StatusCode::NOT_FOUND, "UnknownImage".into()));
    let r = get(&app, &format!("/v1/banks/{bank_id}/images/zz")).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    // sessions
    let s = post(
        &app,
        "/v1/sessions",
        json!({"bank_id": bank_id, "prompt": "Tintin and Snowy board the rocket", "elements": ["Tintin", "Snowy", "rocket"]}),
    )
    .await;
    assert_eq!(s.status, StatusCode::OK);
    let session = s.json();
    let sid = session["session_id"].as_str().unwrap().to_string();
    assert_eq!(session["elements"].as_array().unwrap().len(), 3);
    assert_eq!(session["candidates"].as_array().unwrap().len(), 3);
    assert_eq!(session["candidates"][0].as_array().unwrap().len(), 3);
    assert_eq!(session["grid"]["reference_cells"].as_array().unwrap().len(), 8);
    assert_eq!(session["grid"]["stars"], json!([[1, 0], [1, 2]]));
    assert!(session["candidates"][0][0]["thumbnail_url"].as_str().unwrap().starts_with("/v1/banks/"));

    let r = post(&app, "/v1/sessions", json!({"bank_id": "b-missing", "prompt": "x"})).await;
    assert_eq!((r.status, r.code()), (StatusCode::NOT_FOUND, "UnknownBank".into()));
    let r = post(&app, "/v1/sessions", json!({"bank_id": bank_id, "prompt": "  "})).await;
    assert_eq!((r.status, r.code()), (StatusCode::BAD_REQUEST, "EmptyPrompt".into()));
    let r = post(&app, "/v1/sessions", json!({"bank_id": bank_id, "prompt": "x", "k": 50})).await;
    assert_eq!((r.status, r.code()), (StatusCode::BAD_REQUEST, "KTooLarge".into()));
    let r = get(&app, "/v1/sessions/s-424242").await;
    assert_eq!((r.status, r.code()), (StatusCode::NOT_FOUND, "UnknownSession".into()));

    // pins
    let pins = format!("/v1/sessions/{sid}/pins");
    let r = post(&app, &pins, json!({"cell": [0, 0], "image_id": image_id})).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["pins"], json!([{"cell": [0, 0], "image_id": image_id}]));
    let r = post(&app, &pins, json!({"cell": [1, 1], "image_id": image_id})).await;
    assert_eq!((r.status, r.code()), (StatusCode::BAD_REQUEST, "PinOnCanvas".into()));
    let r = post(&app, &pins, json!({"cell": [5, 0], "image_id": image_id})).await;
    assert_eq!((r.status, r.code()), (StatusCode::BAD_REQUEST, "PinOutOfBounds".into()));
    let r = post(&app, &pins, json!({"cell": [0, 1], "image_id": "cd".repeat(32)})).await;
    assert_eq!((r.status, r.code()), (StatusCode::NOT_FOUND, "UnknownImage".into()));
    let r = post(&app, "/v1/sessions/s-999999/pins", json!({"cell": [0, 1], "image_id": image_id})).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    // runs
    let r = post(&app, &format!("/v1/sessions/{sid}/runs"), json!({})).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let run_id = r.json()["run_id"].as_str().unwrap().to_string();
    let run = wait_run(&app, &run_id).await;
    assert_eq!(run["status"], "done", "{run}");
    let arrangements = run["result"]["arrangements"].as_array().unwrap();
    assert_eq!(arrangements.len(), 6);
    for a in arrangements {
        assert!(a["scores"]["combined"].is_f64());
        let pinned = a["slots"].as_array().unwrap().iter().find(|s| s["cell"] == json!([0, 0])).unwrap();
        assert_eq!(pinned["image_id"], image_id);
        for kind in ["composite", "mask", "result", "canvas"] {
            let url = a["artifacts"][kind].as_str().unwrap();
            let art = get(&app, url).await;
            assert_eq!(art.status, StatusCode::OK, "{url}");
            assert!(art.headers[header::CACHE_CONTROL].to_str().unwrap().contains("immutable"));
        }
    }
    let r = get(&app, &format!("/v1/artifacts/{}.png", "0".repeat(64))).await;
    assert_eq!((r.status, r.code()), (StatusCode::NOT_FOUND, "UnknownArtifact".into()));
    let r = get(&app, "/v1/artifacts/../../etc/passwd").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = get(&app, "/v1/runs/run-999999").await;
    assert_eq!((r.status, r.code()), (StatusCode::NOT_FOUND, "UnknownJob".into()));

    let bad = post(&app, &format!("/v1/sessions/{sid}/runs"), json!({"weights": {"w_text": 0, "w_image": 0, "w_quality": 0}})).await;
    assert_eq!((bad.status, bad.code()), (StatusCode::BAD_REQUEST, "InvalidWeights".into()));
    let bad = post(&app, &format!("/v1/sessions/{sid}/runs"), json!({"params": {"steps": 0}})).await;
    assert_eq!((bad.status, bad.code()), (StatusCode::BAD_REQUEST, "InvalidParams".into()));
    let bad = post(&app, &format!("/v1/sessions/{sid}/runs"), json!({"pins": [{"cell": [1, 1], "image_id": image_id}]})).await;
    assert_eq!((bad.status, bad.code()), (StatusCode::BAD_REQUEST, "PinOnCanvas".into()));

    // unpin, rerun with a different pin supplied in the request
    let r = call(&app, Method::DELETE, &pins, Some(json!({"cell": [0, 0]}))).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["pins"], json!([]));
    let r = post(
        &app,
        &format!("/v1/sessions/{sid}/runs"),
        json!({"pins": [{"cell": [2, 2], "image_id": other_image}], "weights": {"w_text": 1.0, "w_image": 0.0, "w_quality": 0.0}}),
    )
    .await;
    let second = wait_run(&app, r.json()["run_id"].as_str().unwrap()).await;
    assert_eq!(second["status"], "done");
    assert_eq!(second["result"]["weights"]["w_text"], 1.0);

    // selection
    let sel = format!("/v1/sessions/{sid}/select");
    let r = post(&app, &sel, json!({"run_id": run_id, "arrangement_id": 3})).await;
    assert_eq!(r.status, StatusCode::OK);
    let hist = r.json()["history"].clone();
    assert_eq!(hist.as_array().unwrap().len(), 2);
    assert_eq!(hist[0]["user_selected"], 3);
    assert_eq!(hist[1]["pins"], json!([{"cell": [2, 2], "image_id": other_image}]));
    let r = post(&app, &sel, json!({"run_id": run_id, "arrangement_id": 9})).await;
    assert_eq!((r.status, r.code()), (StatusCode::BAD_REQUEST, "InvalidSelection".into()));
    let r = post(&app, &sel, json!({"run_id": "run-nope", "arrangement_id": 0})).await;
    assert_eq!((r.status, r.code()), (StatusCode::NOT_FOUND, "UnknownJob".into()));

    // a restarted service over the same store answers identically
    let session_before = get(&app, &format!("/v1/sessions/{sid}")).await.bytes;
    let run_before = get(&app, &format!("/v1/runs/{run_id}")).await.bytes;
    let restarted = self::app(&data, Backends::mock());
    assert_eq!(get(&restarted, &format!("/v1/sessions/{sid}")).await.bytes, session_before);
    assert_eq!(get(&restarted, &format!("/v1/runs/{run_id}")).await.bytes, run_before);
    assert_eq!(get(&restarted, &format!("/v1/banks/{bank_id}")).await.json(), bank);

    // locked bank
    std::fs::write(bank_dir.join("bank.lock"), b"1").unwrap();
    let r = post(&app, "/v1/banks", json!({"dir": bank_dir, "theme": "tintin"})).await;
    assert_eq!((r.status, r.code()), (StatusCode::CONFLICT, "BankLocked".into()));
    assert_eq!(r.json()["retryable"], true);
    std::fs::remove_file(bank_dir.join("bank.lock")).unwrap();

    let r = get(&app, "/v1/nowhere").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

struct Offline;

impl EmbeddingBackend for Offline {
    fn descriptor(&self) -> EmbeddingBackendDescriptor {
        MockJointEmbedder::default().descriptor()
    }
    fn embed_texts(&self, _: &[&str]) -> Result<Vec<EmbeddingVector>, BackendError> {
        Err(BackendError::Unavailable("connection refused".into()))
    }
    fn embed_images(&self, _: &[&RasterImage]) -> Result<Vec<EmbeddingVector>, BackendError> {
        Err(BackendError::Unavailable("connection refused".into()))
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn backend_outage_is_503_and_retryable() {
    let tmp = tempfile::tempdir().unwrap();
    let bank_dir = tmp.path().join("bank");
    write_bank(&bank_dir, 6);
    let app = app(
        &tmp.path().join("data"),
        Backends {
            embedder: Arc::new(Offline),
            ..Backends::mock()
        },
    );
    let r = post(&app, "/v1/banks", json!({"dir": bank_dir, "theme": "t"})).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(r.code(), "BackendUnavailable");
    assert_eq!(r.json()["retryable"], true);
}

struct DownInpainter;

impl dvp_core::generation::InpaintBackend for DownInpainter {
    fn name(&self) -> &str {
        "down"
    }
    fn inpaint(
        &self,
        _: &dvp_core::composer::VisualPrompt,
        _: &dvp_core::generation::GenerationParams,
    ) -> Result<RasterImage, dvp_core::error::GenerationError> {
        Err(BackendError::Unavailable("gpu pool drained".into()).into())
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn failed_runs_report_the_cause() {
    let tmp = tempfile::tempdir().unwrap();
    let bank_dir = tmp.path().join("bank");
    write_bank(&bank_dir, 12);
    let app = app(
        &tmp.path().join("data"),
        Backends {
            inpainter: Arc::new(DownInpainter),
            ..Backends::mock()
        },
    );
    let bank = post(&app, "/v1/banks", json!({"dir": bank_dir, "theme": "t"})).await.json();
    let s = post(&app, "/v1/sessions", json!({"bank_id": bank["bank_id"], "prompt": "a cat on a mat"})).await.json();
    let sid = s["session_id"].as_str().unwrap();
    let r = post(&app, &format!("/v1/sessions/{sid}/runs"), json!({})).await;
    let run = wait_run(&app, r.json()["run_id"].as_str().unwrap()).await;
    assert_eq!(run["status"], "failed");
    assert_eq!(run["error"]["code"], "AllArrangementsFailed");
    assert_eq!(run["error"]["retryable"], true);
    let session = get(&app, &format!("/v1/sessions/{sid}")).await.json();
    assert_eq!(session["history"], json!([]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn quick_endpoints_answer_within_100ms() {
    let tmp = tempfile::tempdir().unwrap();
    let bank_dir = tmp.path().join("bank");
    write_bank(&bank_dir, 12);
    let app = app(&tmp.path().join("data"), Backends::mock());
    let bank = post(&app, "/v1/banks", json!({"dir": bank_dir, "theme": "t"})).await.json();
    let bank_id = bank["bank_id"].as_str().unwrap();
    let s = post(&app, "/v1/sessions", json!({"bank_id": bank_id, "prompt": "a cat on a mat"})).await.json();
    let sid = s["session_id"].as_str().unwrap();
    let image = bank["images"][0]["image_id"].as_str().unwrap();

    let t = Instant::now();
    let r = post(&app, &format!("/v1/sessions/{sid}/runs"), json!({})).await;
    assert!(t.elapsed() < Duration::from_millis(100), "run submission took {:?}", t.elapsed());
    let run_id = r.json()["run_id"].as_str().unwrap().to_string();
    // pinning stays responsive while the run executes
    for uri in [
        format!("/v1/sessions/{sid}"),
        format!("/v1/banks/{bank_id}"),
        format!("/v1/runs/{run_id}"),
    ] {
        let t = Instant::now();
        assert_eq!(get(&app, &uri).await.status, StatusCode::OK);
        assert!(t.elapsed() < Duration::from_millis(100), "{uri} took {:?}", t.elapsed());
    }
    let t = Instant::now();
    let r = post(&app, &format!("/v1/sessions/{sid}/pins"), json!({"cell": [0, 0], "image_id": image})).await;
    assert_eq!(r.status, StatusCode::OK);
    assert!(t.elapsed() < Duration::from_millis(100), "pin took {:?}", t.elapsed());
    let run = wait_run(&app, &run_id).await;
    assert_eq!(run["status"], "done");
    // the pin added mid-run survives the run's merge
    let session = get(&app, &format!("/v1/sessions/{sid}")).await.json();
    assert_eq!(session["pins"].as_array().unwrap().len(), 1);
    assert_eq!(session["history"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn cors_preflight_is_allowed() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), Backends::mock());
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/v1/sessions")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

fn recombine(scores: &Value, w: [f64; 3]) -> f64 {
    w[0] * scores["text_score"].as_f64().unwrap()
        + w[1] * scores["image_score"].as_f64().unwrap()
        + w[2] * scores["quality_score"].as_f64().unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn clients_can_recombine_scores_with_new_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let bank_dir = tmp.path().join("bank");
    write_bank(&bank_dir, 12);
    let app = app(&tmp.path().join("data"), Backends::mock());
    let bank = post(&app, "/v1/banks", json!({"dir": bank_dir, "theme": "t"})).await.json();
    let s = post(&app, "/v1/sessions", json!({"bank_id": bank["bank_id"], "prompt": "a cat on a mat"})).await.json();
    let runs = format!("/v1/sessions/{}/runs", s["session_id"].as_str().unwrap());

    let first = post(&app, &runs, json!({})).await.json();
    let first = wait_run(&app, first["run_id"].as_str().unwrap()).await;
    let w = &first["result"]["weights"];
    let default = [w["w_text"].as_f64().unwrap(), w["w_image"].as_f64().unwrap(), w["w_quality"].as_f64().unwrap()];
    let reweighted = [0.2, 0.8, 0.0];
    let second = post(&app, &runs, json!({"weights": {"w_text": 0.2, "w_image": 0.8, "w_quality": 0.0}})).await.json();
    let second = wait_run(&app, second["run_id"].as_str().unwrap()).await;

    let a = first["result"]["arrangements"].as_array().unwrap();
    let b = second["result"]["arrangements"].as_array().unwrap();
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(b) {
        let combined = x["scores"]["combined"].as_f64().unwrap();
        assert!((recombine(&x["scores"], default) - combined).abs() < 1e-6);
        let server = y["scores"]["combined"].as_f64().unwrap();
        assert!((recombine(&x["scores"], reweighted) - server).abs() < 1e-6);
    }
}
