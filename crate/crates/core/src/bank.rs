//! Theme image collections: content-addressed ingest, the JSON manifest, and
//! the binary embedding cache.
//!
//! A bank directory holds the user's images plus three files owned by this
//! module:
//!
//! - `bank.manifest.json`: the versioned manifest,
//! - `bank.<backend>.emb`: one embedding cache per backend,
//! - `bank.lock`: present while a writer holds the bank.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use image::{DynamicImage, ImageDecoder, ImageReader};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

use crate::error::{BackendError, BankError};
use crate::fsutil::{write_atomic, LockFile};
use crate::raster::RasterImage;
use crate::similarity::{EmbeddingBackend, EmbeddingBackendDescriptor, EmbeddingVector};

pub const MANIFEST_FILE: &str = "bank.manifest.json";
pub const LOCK_FILE: &str = "bank.lock";
pub const MANIFEST_VERSION: u32 = 1;
pub const CACHE_MAGIC: &[u8; 4] = b"DVPE";
pub const CACHE_VERSION: u32 = 1;
/// Banks smaller than this still work but get a warning.
pub const RECOMMENDED_MIN_IMAGES: usize = 15;

/// SHA-256 of an image's canonical pixels.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ImageId([u8; 32]);

impl ImageId {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Hash of the canonical form: width and height (u32 LE) followed by
    /// 8-bit RGB pixels in row-major order.
    pub fn of_raster(img: &RasterImage) -> Self {
        Self(img.digest())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        self.to_hex()[..12].to_string()
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageId({})", self.short())
    }
}

impl FromStr for ImageId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|e| format!("invalid image id {s:?}: {e}"))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| format!("image id {s:?} must be 64 hex characters"))?;
        Ok(Self(arr))
    }
}

impl Serialize for ImageId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ImageId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub image_id: ImageId,
    /// Relative to the bank root, `/`-separated.
    pub path: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestWarning {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub version: u32,
    pub theme_name: String,
    pub created_at: DateTime<Utc>,
    pub entries: Vec<BankEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<IngestWarning>,
}

impl BankManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: &ImageId) -> Option<&BankEntry> {
        self.entries.iter().find(|e| &e.image_id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.entries.iter().map(|e| e.image_id)
    }

    /// Digest of the theme name and the sorted image ids. Paths, tags and
    /// timestamps do not contribute.
    pub fn digest_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.theme_name.as_bytes());
        h.update([0]);
        let ids: BTreeSet<ImageId> = self.ids().collect();
        for id in ids {
            h.update(id.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<Vec<u8>, BankError> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    fn validate(&self) -> Result<(), BankError> {
        if self.version != MANIFEST_VERSION {
            return Err(BankError::CacheFormat(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id) {
                return Err(BankError::CacheFormat(format!(
                    "duplicate image id {}",
                    e.image_id
                )));
            }
        }
        Ok(())
    }
}

fn is_reserved(name: &str) -> bool {
    name.starts_with('.') || name.starts_with("bank.")
}

/// Decodes any supported container, applies orientation metadata, and
/// converts to 8-bit RGB.
pub fn load_canonical(path: &Path) -> Result<RasterImage, BankError> {
    let decoder = ImageReader::open(path)?
        .with_guessed_format()?
        .into_decoder()
        .map_err(crate::error::RasterError::from)?;
    let mut decoder = decoder;
    let orientation = decoder
        .orientation()
        .map_err(crate::error::RasterError::from)?;
    let mut img = DynamicImage::from_decoder(decoder).map_err(crate::error::RasterError::from)?;
    img.apply_orientation(orientation);
    Ok(RasterImage::from_rgb_image(img.to_rgb8()))
}

/// Scans the top level of `directory` and hashes every decodable image.
///
/// Entries are ordered by file name. Files that fail to decode and exact
/// duplicates are skipped with a warning. Nothing is written to disk.
pub fn ingest(directory: &Path, theme_name: &str) -> Result<BankManifest, BankError> {
    let read = fs::read_dir(directory).map_err(|source| BankError::UnreadableDirectory {
        path: directory.to_path_buf(),
        source,
    })?;
    let mut names = Vec::new();
    for entry in read {
        let entry = entry.map_err(|source| BankError::UnreadableDirectory {
            path: directory.to_path_buf(),
            source,
        })?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let Some(name) = entry.file_name().to_str().map(str::to_owned) else {
            continue;
        };
        if is_reserved(&name) {
            continue;
        }
        names.push(name);
    }
    names.sort();

    let mut entries: Vec<BankEntry> = Vec::new();
    let mut warnings = Vec::new();
    let mut seen: BTreeMap<ImageId, String> = BTreeMap::new();
    for name in names {
        let img = match load_canonical(&directory.join(&name)) {
            Ok(img) => img,
            Err(e) => {
                debug!(file = %name, error = %e, "skipping undecodable file");
                warnings.push(IngestWarning {
                    path: Some(name),
                    message: "not a decodable image; skipped".into(),
                });
                continue;
            }
        };
        let image_id = ImageId::of_raster(&img);
        if let Some(first) = seen.get(&image_id) {
            warnings.push(IngestWarning {
                path: Some(name),
                message: format!("identical pixels to {first}; skipped"),
            });
            continue;
        }
        seen.insert(image_id, name.clone());
        entries.push(BankEntry {
            image_id,
            path: name,
            width: img.width(),
            height: img.height(),
            tags: Vec::new(),
        });
    }

    if entries.is_empty() {
        return Err(BankError::EmptyBank(directory.to_path_buf()));
    }
    if entries.len() < RECOMMENDED_MIN_IMAGES {
        warnings.push(IngestWarning {
            path: None,
            message: format!(
                "bank has {} image(s); {} or more diverse images are recommended",
                entries.len(),
                RECOMMENDED_MIN_IMAGES
            ),
        });
    }

    Ok(BankManifest {
        version: MANIFEST_VERSION,
        theme_name: theme_name.to_string(),
        created_at: Utc::now(),
        entries,
        warnings,
    })
}

/// A bank directory together with its manifest.
#[derive(Debug, Clone)]
pub struct ThemeBank {
    root: PathBuf,
    manifest: BankManifest,
}

impl ThemeBank {
    /// Ingests `dir` and writes the manifest, keeping tags from any previous
    /// manifest for images that are still present.
    pub fn create(dir: &Path, theme_name: &str) -> Result<Self, BankError> {
        let _lock = Self::lock_dir(dir)?;
        let mut manifest = ingest(dir, theme_name)?;
        if let Ok(previous) = Self::read_manifest(dir) {
            for e in &mut manifest.entries {
                if let Some(old) = previous.entry(&e.image_id) {
                    e.tags = old.tags.clone();
                }
            }
        }
        let bank = Self {
            root: dir.to_path_buf(),
            manifest,
        };
        bank.write_manifest()?;
        Ok(bank)
    }

    pub fn open(dir: &Path) -> Result<Self, BankError> {
        Ok(Self {
            root: dir.to_path_buf(),
            manifest: Self::read_manifest(dir)?,
        })
    }

    fn read_manifest(dir: &Path) -> Result<BankManifest, BankError> {
        let bytes = fs::read(dir.join(MANIFEST_FILE))?;
        let manifest: BankManifest = serde_json::from_slice(&bytes)?;
        manifest.validate()?;
        Ok(manifest)
    }

    fn write_manifest(&self) -> Result<(), BankError> {
        write_atomic(&self.root.join(MANIFEST_FILE), &self.manifest.to_json()?)?;
        Ok(())
    }

    fn lock_dir(dir: &Path) -> Result<LockFile, BankError> {
        let path = dir.join(LOCK_FILE);
        LockFile::acquire(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                BankError::Locked(path)
            } else {
                BankError::UnreadableDirectory {
                    path: dir.to_path_buf(),
                    source: e,
                }
            }
        })
    }

    /// Exclusive writer lock on this bank.
    pub fn lock(&self) -> Result<LockFile, BankError> {
        Self::lock_dir(&self.root)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &BankManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn digest_hex(&self) -> String {
        self.manifest.digest_hex()
    }

    /// Replaces the free-text tags on one image and persists the manifest.
    pub fn set_tags(&mut self, id: &ImageId, tags: Vec<String>) -> Result<(), BankError> {
        let _lock = self.lock()?;
        let entry = self
            .manifest
            .entries
            .iter_mut()
            .find(|e| &e.image_id == id)
            .ok_or(BankError::UnknownImage(*id))?;
        entry.tags = tags;
        self.write_manifest()
    }

    pub fn load_image(&self, id: &ImageId) -> Result<RasterImage, BankError> {
        let entry = self.manifest.entry(id).ok_or(BankError::UnknownImage(*id))?;
        load_canonical(&self.root.join(&entry.path))
    }

    /// Loads the canonical pixels of several images.
    pub fn load_images(
        &self,
        ids: impl IntoIterator<Item = ImageId>,
    ) -> Result<BTreeMap<ImageId, RasterImage>, BankError> {
        ids.into_iter()
            .map(|id| Ok((id, self.load_image(&id)?)))
            .collect()
    }

    pub fn cache_path(&self, backend_name: &str) -> PathBuf {
        cache_path(&self.root, backend_name)
    }
}

pub fn cache_path(root: &Path, backend_name: &str) -> PathBuf {
    let safe: String = backend_name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    root.join(format!("bank.{safe}.emb"))
}

/// Unit-normalized image embeddings for one backend.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    backend: EmbeddingBackendDescriptor,
    records: BTreeMap<ImageId, EmbeddingVector>,
}

impl EmbeddingCache {
    pub fn new(backend: EmbeddingBackendDescriptor) -> Self {
        Self {
            backend,
            records: BTreeMap::new(),
        }
    }

    pub fn backend(&self) -> &EmbeddingBackendDescriptor {
        &self.backend
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &ImageId) -> Option<&EmbeddingVector> {
        self.records.get(id)
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.records.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &ImageId> {
        self.records.keys()
    }

    pub fn insert(&mut self, id: ImageId, v: EmbeddingVector) -> Result<(), BankError> {
        if v.dim() != self.backend.dim {
            return Err(BankError::DimensionMismatch {
                expected: self.backend.dim,
                actual: v.dim(),
            });
        }
        self.records.insert(id, v);
        Ok(())
    }

    pub fn remove(&mut self, id: &ImageId) -> Option<EmbeddingVector> {
        self.records.remove(id)
    }

    /// `(id, vector)` pairs in manifest order; errors on the first gap.
    pub fn vectors_for(
        &self,
        manifest: &BankManifest,
    ) -> Result<Vec<(ImageId, EmbeddingVector)>, BankError> {
        let missing: Vec<ImageId> = manifest.ids().filter(|id| !self.contains(id)).collect();
        if !missing.is_empty() {
            return Err(BankError::PartialCache { missing });
        }
        Ok(manifest
            .ids()
            .map(|id| (id, self.records[&id].clone()))
            .collect())
    }

    /// Header `{"DVPE", version, dim, count}` (u32 LE) then, per record in
    /// id order, the 32 hash bytes and `dim` little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dim = self.backend.dim;
        let mut out = Vec::with_capacity(16 + self.records.len() * (32 + 4 * dim));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (id, v) in &self.records {
            out.extend_from_slice(id.as_bytes());
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(backend: EmbeddingBackendDescriptor, bytes: &[u8]) -> Result<Self, BankError> {
        let bad = |m: &str| BankError::CacheFormat(m.to_string());
        if bytes.len() < 16 {
            return Err(bad("truncated header"));
        }
        if &bytes[0..4] != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != CACHE_VERSION {
            return Err(bad("unsupported version"));
        }
        let dim = word(8) as usize;
        let count = word(12) as usize;
        if dim != backend.dim {
            return Err(BankError::DimensionMismatch {
                expected: backend.dim,
                actual: dim,
            });
        }
        let record = 32 + 4 * dim;
        if bytes.len() != 16 + count * record {
            return Err(bad("length does not match header"));
        }
        let mut records = BTreeMap::new();
        for r in bytes[16..].chunks_exact(record) {
            let id = ImageId::from_bytes(r[..32].try_into().unwrap());
            let values = r[32..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let v = EmbeddingVector::new(values).map_err(|e| bad(&e.to_string()))?;
            if records.insert(id, v).is_some() {
                return Err(bad("duplicate record"));
            }
        }
        Ok(Self { backend, records })
    }

    /// Loads the cache file for `backend`, or an empty cache if none exists.
    pub fn load(root: &Path, backend: EmbeddingBackendDescriptor) -> Result<Self, BankError> {
        let path = cache_path(root, &backend.name);
        match fs::read(&path) {
            Ok(bytes) => Self::from_bytes(backend, &bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new(backend)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, root: &Path) -> Result<PathBuf, BankError> {
        let path = cache_path(root, &self.backend.name);
        write_atomic(&path, &self.to_bytes())?;
        Ok(path)
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheBuildStats {
    pub embedded: usize,
    pub reused: usize,
    pub pruned: usize,
}

/// Embeds every manifest image missing from `cache`, one backend call per
/// image, and drops records for images no longer in the manifest.
///
/// Progress is kept in `cache` even when some images fail.
pub fn build_cache(
    bank: &ThemeBank,
    backend: &dyn EmbeddingBackend,
    cache: &mut EmbeddingCache,
) -> Result<CacheBuildStats, BankError> {
    let descriptor = backend.descriptor();
    if descriptor != *cache.backend() {
        return Err(BankError::CacheFormat(format!(
            "cache belongs to backend {:?}, not {:?}",
            cache.backend().name,
            descriptor.name
        )));
    }
    let mut stats = CacheBuildStats::default();
    let live: BTreeSet<ImageId> = bank.manifest().ids().collect();
    let orphans: Vec<ImageId> = cache.ids().filter(|id| !live.contains(id)).copied().collect();
    for id in orphans {
        cache.remove(&id);
        stats.pruned += 1;
    }

    let mut missing = Vec::new();
    let mut last_backend_error: Option<BackendError> = None;
    for entry in &bank.manifest().entries {
        if cache.contains(&entry.image_id) {
            stats.reused += 1;
            continue;
        }
        let img = bank.load_image(&entry.image_id)?;
        let embedded = backend.embed_image(&img).and_then(|v| {
            v.normalized()
                .map_err(|e| BackendError::Protocol(format!("unusable embedding: {e}")))
        });
        match embedded {
            Ok(v) => {
                cache.insert(entry.image_id, v)?;
                stats.embedded += 1;
            }
            Err(e) => {
                warn!(image = %entry.image_id.short(), error = %e, "embedding failed");
                missing.push(entry.image_id);
                last_backend_error = Some(e);
            }
        }
    }
    if missing.is_empty() {
        return Ok(stats);
    }
    if stats.embedded == 0 && stats.reused == 0 {
        if let Some(e) = last_backend_error {
            return Err(BankError::BackendUnavailable(e));
        }
    }
    Err(BankError::PartialCache { missing })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheReport {
    /// Manifest entries whose file no longer hashes to the recorded id.
    pub stale: Vec<ImageId>,
    /// Manifest entries without a cache record.
    pub missing: Vec<ImageId>,
    /// Cache records for ids absent from the manifest.
    pub orphaned: Vec<ImageId>,
    pub clean: bool,
}

pub fn verify_cache(bank: &ThemeBank, cache: &EmbeddingCache) -> CacheReport {
    let mut report = CacheReport::default();
    for entry in &bank.manifest().entries {
        let current = load_canonical(&bank.root().join(&entry.path)).map(|img| ImageId::of_raster(&img));
        if current.ok() != Some(entry.image_id) {
            report.stale.push(entry.image_id);
        }
        if !cache.contains(&entry.image_id) {
            report.missing.push(entry.image_id);
        }
    }
    let live: BTreeSet<ImageId> = bank.manifest().ids().collect();
    report.orphaned = cache.ids().filter(|id| !live.contains(id)).copied().collect();
    report.clean = report.stale.is_empty() && report.missing.is_empty() && report.orphaned.is_empty();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::HashEmbedder;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn write_png(dir: &Path, name: &str, w: u32, h: u32, seed: u8) {
        let mut img = RasterImage::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x, y, [seed, (x as u8).wrapping_mul(seed), y as u8]);
            }
        }
        img.save_png(&dir.join(name)).unwrap();
    }

    fn fixture(n: u8) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..n {
            write_png(dir.path(), &format!("img{i:02}.png"), 8 + i as u32, 6, i + 1);
        }
        dir
    }

    struct Counting {
        inner: HashEmbedder,
        calls: AtomicUsize,
    }

    impl EmbeddingBackend for Counting {
        fn descriptor(&self) -> EmbeddingBackendDescriptor {
            self.inner.descriptor()
        }
        fn embed_texts(&self, t: &[&str]) -> Result<Vec<EmbeddingVector>, BackendError> {
            self.inner.embed_texts(t)
        }
        fn embed_images(&self, i: &[&RasterImage]) -> Result<Vec<EmbeddingVector>, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.embed_images(i)
        }
    }

    struct Down;

    impl EmbeddingBackend for Down {
        fn descriptor(&self) -> EmbeddingBackendDescriptor {
            HashEmbedder::new(8, 0).descriptor()
        }
        fn embed_texts(&self, _: &[&str]) -> Result<Vec<EmbeddingVector>, BackendError> {
            Err(BackendError::Unavailable("down".into()))
        }
        fn embed_images(&self, _: &[&RasterImage]) -> Result<Vec<EmbeddingVector>, BackendError> {
            Err(BackendError::Unavailable("down".into()))
        }
    }

    #[test]
    fn image_id_round_trips_as_hex() {
        let id = ImageId::from_bytes([0xab; 32]);
        assert_eq!(id.to_hex().len(), 64);
        assert_eq!(id.to_hex().parse::<ImageId>().unwrap(), id);
        assert!("abc".parse::<ImageId>().is_err());
        let json = serde_json::to_string(&id).unwrap();
        assert_eq!(serde_json::from_str::<ImageId>(&json).unwrap(), id);
    }

    #[test]
    fn ingest_counts_and_warns() {
        let dir = fixture(3);
        fs::write(dir.path().join("notes.txt"), b"hello").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        let m = ingest(dir.path(), "tintin").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries[0].path, "img00.png");
        assert_eq!((m.entries[0].width, m.entries[0].height), (8, 6));
        assert!(m.warnings.iter().any(|w| w.path.as_deref() == Some("notes.txt")));
        assert!(m.warnings.iter().any(|w| w.path.is_none()));
    }

    #[test]
    fn single_image_bank() {
        let dir = fixture(1);
        assert_eq!(ingest(dir.path(), "t").unwrap().len(), 1);
    }

    #[test]
    fn empty_and_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x.txt"), b"no").unwrap();
        assert!(matches!(ingest(dir.path(), "t"), Err(BankError::EmptyBank(_))));
        assert!(matches!(
            ingest(&dir.path().join("nope"), "t"),
            Err(BankError::UnreadableDirectory { .. })
        ));
    }

    #[test]
    fn reingest_is_identical_except_timestamp() {
        let dir = fixture(4);
        let a = ThemeBank::create(dir.path(), "t").unwrap();
        let b = ThemeBank::create(dir.path(), "t").unwrap();
        let mut ma = a.manifest().clone();
        ma.created_at = b.manifest().created_at;
        assert_eq!(ma.to_json().unwrap(), b.manifest().to_json().unwrap());
        assert_eq!(a.digest_hex(), b.digest_hex());
    }

    #[test]
    fn identity_survives_rename_and_reencode() {
        let dir = fixture(2);
        let before = ingest(dir.path(), "t").unwrap();
        fs::rename(dir.path().join("img00.png"), dir.path().join("zz.png")).unwrap();
        let img = load_canonical(&dir.path().join("img01.png")).unwrap();
        img.to_rgb_image()
            .save_with_format(dir.path().join("img01.bmp"), image::ImageFormat::Bmp)
            .unwrap();
        fs::remove_file(dir.path().join("img01.png")).unwrap();
        let after = ingest(dir.path(), "t").unwrap();
        let ids = |m: &BankManifest| m.ids().collect::<BTreeSet<_>>();
        assert_eq!(ids(&before), ids(&after));
        assert!(after.entries.iter().any(|e| e.path == "zz.png"));
    }

    #[test]
    fn duplicates_are_skipped() {
        let dir = fixture(2);
        fs::copy(dir.path().join("img00.png"), dir.path().join("copy.png")).unwrap();
        let m = ingest(dir.path(), "t").unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.warnings.iter().any(|w| w.path.as_deref() == Some("img00.png")
            || w.path.as_deref() == Some("copy.png")));
    }

    #[test]
    fn cache_builds_incrementally() {
        let dir = fixture(5);
        let bank = ThemeBank::create(dir.path(), "t").unwrap();
        let backend = Counting {
            inner: HashEmbedder::new(8, 1),
            calls: AtomicUsize::new(0),
        };
        let mut cache = EmbeddingCache::new(backend.descriptor());
        build_cache(&bank, &backend, &mut cache).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 5);

        let ids: Vec<_> = bank.manifest().ids().collect();
        cache.remove(&ids[0]);
        cache.remove(&ids[3]);
        backend.calls.store(0, Ordering::SeqCst);
        let stats = build_cache(&bank, &backend, &mut cache).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
        assert_eq!(stats.reused, 3);
    }

    #[test]
    fn cache_bytes_are_reproducible_and_sound() {
        let dir = fixture(3);
        let bank = ThemeBank::create(dir.path(), "t").unwrap();
        let e = HashEmbedder::new(6, 9);
        let mut a = EmbeddingCache::new(e.descriptor());
        let mut b = EmbeddingCache::new(e.descriptor());
        build_cache(&bank, &e, &mut a).unwrap();
        build_cache(&bank, &e, &mut b).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        for id in bank.manifest().ids() {
            let again = e.embed_image(&bank.load_image(&id).unwrap()).unwrap().normalized().unwrap();
            assert_eq!(a.get(&id).unwrap(), &again);
        }
        a.save(bank.root()).unwrap();
        let loaded = EmbeddingCache::load(bank.root(), e.descriptor()).unwrap();
        assert_eq!(loaded, a);
    }

    #[test]
    fn cache_file_layout_is_exact() {
        let d = EmbeddingBackendDescriptor {
            name: "x".into(),
            dim: 2,
            modality: crate::similarity::Modality::Joint,
        };
        let mut c = EmbeddingCache::new(d.clone());
        c.insert(ImageId::from_bytes([7; 32]), EmbeddingVector::new(vec![1.0, -0.5]).unwrap())
            .unwrap();
        let bytes = c.to_bytes();
        let mut expected = b"DVPE".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&[7; 32]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert!(EmbeddingCache::from_bytes(d.clone(), &bytes[..20]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(EmbeddingCache::from_bytes(d, &wrong).is_err());
    }

    #[test]
    fn backend_down_is_reported() {
        let dir = fixture(2);
        let bank = ThemeBank::create(dir.path(), "t").unwrap();
        let mut cache = EmbeddingCache::new(Down.descriptor());
        assert!(matches!(
            build_cache(&bank, &Down, &mut cache),
            Err(BankError::BackendUnavailable(_))
        ));
    }

    #[test]
    fn verify_detects_stale_missing_orphan() {
        let dir = fixture(3);
        let bank = ThemeBank::create(dir.path(), "t").unwrap();
        let e = HashEmbedder::new(4, 0);
        let mut cache = EmbeddingCache::new(e.descriptor());
        build_cache(&bank, &e, &mut cache).unwrap();
        assert!(verify_cache(&bank, &cache).clean);

        write_png(dir.path(), "img01.png", 9, 6, 99);
        let r = verify_cache(&bank, &cache);
        assert_eq!(r.stale.len(), 1);
        assert!(!r.clean);
        write_png(dir.path(), "img01.png", 9, 6, 2);
        assert!(verify_cache(&bank, &cache).clean);

        let orphan = ImageId::from_bytes([1; 32]);
        cache
            .insert(orphan, EmbeddingVector::new(vec![1.0; 4]).unwrap())
            .unwrap();
        let first = bank.manifest().entries[0].image_id;
        cache.remove(&first);
        let r = verify_cache(&bank, &cache);
        assert_eq!(r.orphaned, vec![orphan]);
        assert_eq!(r.missing, vec![first]);
    }

    #[test]
    fn lock_excludes_second_writer() {
        let dir = fixture(1);
        let bank = ThemeBank::create(dir.path(), "t").unwrap();
        let _held = bank.lock().unwrap();
        assert!(matches!(
            ThemeBank::create(dir.path(), "t"),
            Err(BankError::Locked(_))
        ));
    }

    #[test]
    fn tags_persist_across_reingest() {
        let dir = fixture(2);
        let mut bank = ThemeBank::create(dir.path(), "t").unwrap();
        let id = bank.manifest().entries[1].image_id;
        bank.set_tags(&id, vec!["side pose".into()]).unwrap();
        let again = ThemeBank::create(dir.path(), "t").unwrap();
        assert_eq!(again.manifest().entry(&id).unwrap().tags, vec!["side pose"]);
    }
}
