//! Inpainting backends: the contract, a deterministic mean-fill mock, a
//! remote client, and an async job queue on top of either.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::composer::{cell_rect, VisualPrompt};
use crate::error::{BackendError, GenerationError};
use crate::http::{build_client, post_json, Endpoint, RetryPolicy};
use crate::raster::{Mask, RasterImage};

pub const DEFAULT_GUIDANCE_SCALE: f64 = 30.0;
pub const DEFAULT_STEPS: u32 = 50;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 2;
/// Mean absolute difference (in 8-bit units) tolerated on unmasked pixels.
pub const UNMASKED_TOLERANCE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub guidance_scale: f64,
    pub steps: u32,
    pub seed: u64,
    pub prompt: String,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            steps: DEFAULT_STEPS,
            seed: 0,
            prompt: String::new(),
        }
    }
}

impl GenerationParams {
    pub fn new(prompt: impl Into<String>, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.steps == 0 {
            return Err(GenerationError::InvalidParams("steps must be at least 1".into()));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(GenerationError::InvalidParams(format!(
                "guidance_scale {} must be a non-negative number",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

pub trait InpaintBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Returns a full-size raster; pixels outside the mask should match the
    /// composite.
    fn inpaint(&self, vp: &VisualPrompt, params: &GenerationParams)
        -> Result<RasterImage, GenerationError>;
}

/// Fills the canvas with the per-pixel mean of the reference cells plus
/// seeded noise in `[-amplitude, amplitude]`. Everything outside the mask
/// is copied verbatim.
#[derive(Debug, Clone)]
pub struct MockInpainter {
    noise_amplitude: u8,
}

impl MockInpainter {
    pub const NAME: &'static str = "mock-meanfill";

    pub fn new() -> Self {
        Self { noise_amplitude: 2 }
    }

    pub fn noise_free() -> Self {
        Self { noise_amplitude: 0 }
    }

    pub fn with_noise(amplitude: u8) -> Self {
        Self {
            noise_amplitude: amplitude,
        }
    }

    pub fn noise_amplitude(&self) -> u8 {
        self.noise_amplitude
    }
}

impl Default for MockInpainter {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-pixel rounded mean over every reference cell, in cell-local
/// coordinates. Returns a `cell_px`² tile.
pub fn reference_mean(vp: &VisualPrompt) -> RasterImage {
    let grid = &vp.grid;
    let p = grid.cell_px();
    let cells = grid.reference_cells();
    let n = cells.len() as u32;
    let mut sums = vec![0u32; (p * p * 3) as usize];
    for cell in &cells {
        let (x0, y0, _, _) = cell_rect(grid, *cell);
        for y in 0..p {
            for x in 0..p {
                let px = vp.composite.pixel(x0 + x, y0 + y);
                let i = ((y * p + x) * 3) as usize;
                for c in 0..3 {
                    sums[i + c] += px[c] as u32;
                }
            }
        }
    }
    let pixels = sums.into_iter().map(|s| ((s + n / 2) / n) as u8).collect();
    RasterImage::new(p, p, pixels).expect("sized buffer")
}

impl InpaintBackend for MockInpainter {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn inpaint(
        &self,
        vp: &VisualPrompt,
        params: &GenerationParams,
    ) -> Result<RasterImage, GenerationError> {
        params.validate()?;
        let mean = reference_mean(vp);
        let p = vp.grid.cell_px();
        let mut out = vp.composite.clone();
        let (cx, cy, cw, ch) = vp.grid.canvas_px();

        let mut h = Sha256::new();
        h.update(vp.digest_hex().as_bytes());
        h.update(params.seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let a = self.noise_amplitude as i16;

        for y in 0..ch {
            for x in 0..cw {
                let base = mean.pixel(x % p, y % p);
                let mut rgb = [0u8; 3];
                for c in 0..3 {
                    let noise = if a > 0 { rng.gen_range(-a..=a) } else { 0 };
                    rgb[c] = (base[c] as i16 + noise).clamp(0, 255) as u8;
                }
                out.put_pixel(cx + x, cy + y, rgb);
            }
        }
        Ok(out)
    }
}

/// Mean absolute per-channel difference over pixels where the mask keeps
/// the composite.
pub fn unmasked_mad(composite: &RasterImage, mask: &Mask, result: &RasterImage) -> Option<f64> {
    if (composite.width(), composite.height()) != (result.width(), result.height())
        || (mask.width(), mask.height()) != (result.width(), result.height())
    {
        return None;
    }
    let mut total = 0u64;
    let mut count = 0u64;
    for (i, m) in mask.values().iter().enumerate() {
        if *m == Mask::KEEP {
            for c in 0..3 {
                total += composite.pixels()[i * 3 + c].abs_diff(result.pixels()[i * 3 + c]) as u64;
            }
            count += 3;
        }
    }
    Some(if count == 0 { 0.0 } else { total as f64 / count as f64 })
}

/// Counting semaphore bounding in-flight remote jobs.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InpaintWireRequest {
    pub composite_png: String,
    pub mask_png: String,
    pub prompt: String,
    pub guidance_scale: f64,
    pub steps: u32,
    pub seed: u64,
}

impl InpaintWireRequest {
    pub fn new(vp: &VisualPrompt, params: &GenerationParams) -> Result<Self, GenerationError> {
        Ok(Self {
            composite_png: B64.encode(vp.composite.encode_png()?),
            mask_png: B64.encode(vp.mask.encode_png()?),
            prompt: params.prompt.clone(),
            guidance_scale: params.guidance_scale,
            steps: params.steps,
            seed: params.seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InpaintWireResponse {
    pub image_png: String,
}

/// Client for a fill-style diffusion service.
pub struct HttpInpaintBackend {
    endpoint: Endpoint,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    gate: Semaphore,
}

impl HttpInpaintBackend {
    pub const NAME: &'static str = "remote-inpaint";
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

    pub fn new(endpoint: Endpoint) -> Result<Self, BackendError> {
        Ok(Self {
            client: build_client(endpoint.timeout)?,
            endpoint,
            retry: RetryPolicy::default(),
            gate: Semaphore::new(DEFAULT_MAX_IN_FLIGHT),
        })
    }

    /// Reads `DVP_GEN_URL`, `DVP_GEN_TOKEN` and `DVP_GEN_TIMEOUT_S`.
    pub fn from_env() -> Result<Self, BackendError> {
        let url = std::env::var("DVP_GEN_URL")
            .map_err(|_| BackendError::Unavailable("DVP_GEN_URL is not set".into()))?;
        let timeout = std::env::var("DVP_GEN_TIMEOUT_S")
            .ok()
            .and_then(|s| s.parse::<f64>().ok())
            .map(Duration::from_secs_f64)
            .unwrap_or(Self::DEFAULT_TIMEOUT);
        Self::new(Endpoint {
            url,
            token: std::env::var("DVP_GEN_TOKEN").ok(),
            timeout,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.gate = Semaphore::new(n);
        self
    }
}

impl InpaintBackend for HttpInpaintBackend {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn inpaint(
        &self,
        vp: &VisualPrompt,
        params: &GenerationParams,
    ) -> Result<RasterImage, GenerationError> {
        params.validate()?;
        let body = InpaintWireRequest::new(vp, params)?;
        let resp: InpaintWireResponse = {
            let _permit = self.gate.acquire();
            self.retry
                .run(|| post_json(&self.client, &self.endpoint, &body))?
        };
        let bytes = B64
            .decode(resp.image_png.as_bytes())
            .map_err(|e| BackendError::Protocol(format!("image_png is not base64: {e}")))?;
        let img = RasterImage::decode_png(&bytes)
            .map_err(|e| BackendError::Protocol(format!("image_png is not a PNG: {e}")))?;
        if (img.width(), img.height()) != (vp.composite.width(), vp.composite.height()) {
            return Err(BackendError::Protocol(format!(
                "result is {}x{}, composite is {}x{}",
                img.width(),
                img.height(),
                vp.composite.width(),
                vp.composite.height()
            ))
            .into());
        }
        if let Some(mad) = unmasked_mad(&vp.composite, &vp.mask, &img) {
            if mad > UNMASKED_TOLERANCE {
                warn!(mad, "backend altered unmasked pixels beyond tolerance");
            }
        }
        Ok(img)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone)]
pub struct GenerationJob {
    pub id: String,
    pub visual_prompt: Arc<VisualPrompt>,
    pub params: GenerationParams,
    pub status: JobStatus,
    pub result: Option<RasterImage>,
    pub error: Option<String>,
}

/// Runs inpainting jobs on background threads.
pub struct JobQueue {
    backend: Arc<dyn InpaintBackend>,
    jobs: Arc<Mutex<HashMap<String, GenerationJob>>>,
    done: Arc<Condvar>,
    next: AtomicU64,
}

impl JobQueue {
    pub fn new(backend: Arc<dyn InpaintBackend>) -> Self {
        Self {
            backend,
            jobs: Arc::default(),
            done: Arc::new(Condvar::new()),
            next: AtomicU64::new(1),
        }
    }

    pub fn submit_async(&self, vp: VisualPrompt, params: GenerationParams) -> String {
        let id = format!("job-{}", self.next.fetch_add(1, Ordering::Relaxed));
        let vp = Arc::new(vp);
        self.jobs.lock().unwrap().insert(
            id.clone(),
            GenerationJob {
                id: id.clone(),
                visual_prompt: vp.clone(),
                params: params.clone(),
                status: JobStatus::Pending,
                result: None,
                error: None,
            },
        );
        let (jobs, done, backend, job_id) =
            (self.jobs.clone(), self.done.clone(), self.backend.clone(), id.clone());
        thread::spawn(move || {
            set_status(&jobs, &job_id, |j| j.status = JobStatus::Running);
            let outcome = backend.inpaint(&vp, &params);
            set_status(&jobs, &job_id, |j| match outcome {
                Ok(img) => {
                    j.result = Some(img);
                    j.status = JobStatus::Done;
                }
                Err(e) => {
                    j.error = Some(e.to_string());
                    j.status = JobStatus::Failed;
                }
            });
            done.notify_all();
        });
        id
    }

    pub fn poll(&self, id: &str) -> Result<GenerationJob, GenerationError> {
        self.jobs
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| GenerationError::UnknownJob(id.to_string()))
    }

    /// Blocks until the job is done or failed, or `timeout` elapses.
    pub fn wait(&self, id: &str, timeout: Duration) -> Result<GenerationJob, GenerationError> {
        let deadline = Instant::now() + timeout;
        let mut jobs = self.jobs.lock().unwrap();
        loop {
            let job = jobs
                .get(id)
                .ok_or_else(|| GenerationError::UnknownJob(id.to_string()))?;
            let now = Instant::now();
            if job.status.is_terminal() || now >= deadline {
                return Ok(job.clone());
            }
            jobs = self.done.wait_timeout(jobs, deadline - now).unwrap().0;
        }
    }
}

fn set_status(
    jobs: &Mutex<HashMap<String, GenerationJob>>,
    id: &str,
    f: impl FnOnce(&mut GenerationJob),
) {
    if let Some(j) = jobs.lock().unwrap().get_mut(id) {
        f(j);
    }
}
