//! On-disk archive of extracted tensors.
//!
//! Layout of a store root:
//!
//! ```text
//! manifest.json            records + backend identity
//! payloads/<checksum>.dft  content-named tensor payloads
//! .lock                    advisory writer lock
//! ```
//!
//! Payload format: magic `DFT1`, u8 dtype code (1 = f32, 2 = f64), u8 ndim,
//! `ndim` little-endian u64 dims, then row-major little-endian elements. The
//! checksum is the first 8 bytes of the SHA-256 of the whole payload file, as
//! hex.
//!
//! Writers take an exclusive lock on `.lock`, reload the manifest, write the
//! payload to a temp file and rename it into place, then replace the manifest
//! the same way. A killed writer can leave an orphan payload but never a
//! record pointing at a missing or partial one. Readers see whole manifests.

use std::cmp::Ordering;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use chrono::{DateTime, Utc};
use ndarray::{Array4, Ix3};
use serde::{Deserialize, Serialize};

use crate::array::{DynArray, Dtype, Element};
use crate::backbone::{AttentionLayer, BlockAddress, CrossAttnStack, FeatureTensor, Provenance};
use crate::error::{Error, Result};
use crate::hashing::hex16;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DFT1";
const MANIFEST: &str = "manifest.json";
const PAYLOADS: &str = "payloads";
const LOCK: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Feature,
    Attention,
}

/// Identity of a stored tensor. For attention records `block` is the layer id
/// (e.g. `U-L1-R1-B0`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordKey {
    pub image_id: String,
    pub block: String,
    pub timestep: usize,
    pub guidance_scale: f64,
    pub prompt_hash: String,
    pub seed: u64,
    pub kind: RecordKind,
}

impl RecordKey {
    pub fn feature(p: &Provenance) -> Self {
        Self {
            image_id: p.image_id.clone(),
            block: p.block.to_string(),
            timestep: p.timestep,
            guidance_scale: p.guidance_scale,
            prompt_hash: p.prompt_hash.clone(),
            seed: p.seed,
            kind: RecordKind::Feature,
        }
    }

    pub fn attention(stack: &CrossAttnStack, layer_id: &str) -> Self {
        Self {
            image_id: stack.image_id.clone(),
            block: layer_id.to_string(),
            timestep: stack.timestep,
            // Attention is always captured on the conditional pass.
            guidance_scale: 1.0,
            prompt_hash: stack.prompt_hash.clone(),
            seed: stack.seed,
            kind: RecordKind::Attention,
        }
    }

    fn cmp_key(&self, other: &Self) -> Ordering {
        (&self.image_id, &self.block, self.timestep)
            .cmp(&(&other.image_id, &other.block, other.timestep))
            .then(self.guidance_scale.total_cmp(&other.guidance_scale))
            .then_with(|| (&self.prompt_hash, self.seed, self.kind).cmp(&(&other.prompt_hash, other.seed, other.kind)))
    }
}

impl PartialEq for RecordKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp_key(other) == Ordering::Equal
    }
}

impl Eq for RecordKey {}

impl PartialOrd for RecordKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for RecordKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_key(other)
    }
}

impl std::fmt::Display for RecordKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/t{}/s{}/{}/seed{}/{:?}",
            self.image_id, self.block, self.timestep, self.guidance_scale, self.prompt_hash, self.seed, self.kind
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub key: RecordKey,
    /// Relative to the store root.
    pub payload_path: String,
    pub checksum: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Real-token mask for attention records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub records: Vec<TensorRecord>,
    pub created_at: DateTime<Utc>,
    pub backend_id: String,
}

/// Partial key; `None` fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordFilter {
    pub image_id: Option<String>,
    pub block: Option<String>,
    pub timestep: Option<usize>,
    pub guidance_scale: Option<f64>,
    pub prompt_hash: Option<String>,
    pub seed: Option<u64>,
    pub kind: Option<RecordKind>,
}

impl RecordFilter {
    pub fn matches(&self, k: &RecordKey) -> bool {
        self.image_id.as_ref().is_none_or(|v| *v == k.image_id)
            && self.block.as_ref().is_none_or(|v| *v == k.block)
            && self.timestep.is_none_or(|v| v == k.timestep)
            && self.guidance_scale.is_none_or(|v| v.total_cmp(&k.guidance_scale) == Ordering::Equal)
            && self.prompt_hash.as_ref().is_none_or(|v| *v == k.prompt_hash)
            && self.seed.is_none_or(|v| v == k.seed)
            && self.kind.is_none_or(|v| v == k.kind)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checked: usize,
    pub missing: Vec<String>,
    pub corrupt: Vec<String>,
    /// Payload files no record references.
    pub orphans: Vec<String>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty() && self.corrupt.is_empty()
    }
}

pub fn encode_payload(values: &DynArray) -> Vec<u8> {
    let shape = values.shape();
    let mut out = Vec::with_capacity(6 + 8 * shape.len() + shape.iter().product::<usize>() * values.dtype().size());
    out.extend_from_slice(MAGIC);
    out.push(values.dtype().code());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&values.to_le_bytes());
    out
}

pub fn decode_payload(bytes: &[u8], path: &Path) -> Result<DynArray> {
    let bad = |reason: &str| Error::MalformedPayload {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing DFT1 magic"));
    }
    let dtype = Dtype::from_code(bytes[4]).ok_or_else(|| bad("unknown dtype code"))?;
    let ndim = bytes[5] as usize;
    let header = 6 + 8 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    DynArray::from_le_bytes(dtype, &shape, &bytes[header..]).ok_or_else(|| bad("data length does not match shape"))
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to `dest` via a temp file in the same directory and a rename.
/// On failure the temp file is removed.
pub fn write_atomic(dest: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic_with(dest, |f| f.write_all(bytes))
}

fn write_atomic_with(dest: &Path, fill: impl FnOnce(&mut File) -> std::io::Result<()>) -> Result<()> {
    let dir = dest.parent().unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, AtomicOrdering::Relaxed)
    ));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        fill(&mut f)?;
        f.sync_all()?;
        fs::rename(&tmp, dest)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(format!("writing {}", dest.display()), e));
    }
    Ok(())
}

pub struct FeatureStore {
    root: PathBuf,
    manifest: Manifest,
}

/// A tensor read back from the store.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub values: DynArray,
    pub record: TensorRecord,
}

impl FeatureStore {
    /// Opens an existing store or creates an empty one for `backend_id`.
    pub fn open_or_create(root: impl Into<PathBuf>, backend_id: &str) -> Result<Self> {
        let root = root.into();
        if root.join(MANIFEST).exists() {
            let store = Self::open(root)?;
            if store.manifest.backend_id != backend_id {
                return Err(Error::Config(format!(
                    "store {} holds features from backend `{}`, not `{backend_id}`",
                    store.root.display(),
                    store.manifest.backend_id
                )));
            }
            return Ok(store);
        }
        fs::create_dir_all(root.join(PAYLOADS)).map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            records: Vec::new(),
            created_at: Utc::now(),
            backend_id: backend_id.to_string(),
        };
        let store = Self { root, manifest };
        let _lock = store.lock()?;
        if store.root.join(MANIFEST).exists() {
            // Lost a creation race; use what the other writer made.
            drop(_lock);
            return Self::open_or_create(store.root, backend_id);
        }
        store.write_manifest()?;
        Ok(store)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = Self::read_manifest(&root)?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    fn read_manifest(root: &Path) -> Result<Manifest> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported format version {}",
                path.display(),
                m.format_version
            )));
        }
        Ok(m)
    }

    /// Picks up records written by other handles.
    pub fn refresh(&mut self) -> Result<()> {
        self.manifest = Self::read_manifest(&self.root)?;
        Ok(())
    }

    fn lock(&self) -> Result<File> {
        let path = self.root.join(LOCK);
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        f.lock().map_err(|e| Error::io(format!("locking {}", path.display()), e))?;
        Ok(f)
    }

    fn write_manifest(&self) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_atomic(&self.root.join(MANIFEST), text.as_bytes())
    }

    fn payload_rel(checksum: &str) -> String {
        format!("{PAYLOADS}/{checksum}.dft")
    }

    pub fn put(&mut self, key: RecordKey, values: &DynArray, overwrite: bool) -> Result<TensorRecord> {
        self.put_with_mask(key, values, None, overwrite)
    }

    fn put_with_mask(
        &mut self,
        key: RecordKey,
        values: &DynArray,
        token_mask: Option<Vec<bool>>,
        overwrite: bool,
    ) -> Result<TensorRecord> {
        if !values.all_finite() {
            return Err(Error::InvalidArgument(format!("non-finite values for {key}")));
        }
        let _lock = self.lock()?;
        self.refresh()?;
        let existing = self.manifest.records.binary_search_by(|r| r.key.cmp(&key));
        if existing.is_ok() && !overwrite {
            return Err(Error::DuplicateKey(key.to_string()));
        }
        let bytes = encode_payload(values);
        let checksum = hex16(&bytes);
        let rel = Self::payload_rel(&checksum);
        let dest = self.root.join(&rel);
        if !dest.exists() {
            write_atomic(&dest, &bytes)?;
        }
        let record = TensorRecord {
            key,
            payload_path: rel,
            checksum,
            dtype: values.dtype(),
            shape: values.shape().to_vec(),
            token_mask,
        };
        match existing {
            Ok(i) => self.manifest.records[i] = record.clone(),
            Err(i) => self.manifest.records.insert(i, record.clone()),
        }
        self.write_manifest()?;
        Ok(record)
    }

    pub fn put_feature<T: Element>(&mut self, f: &FeatureTensor<T>, overwrite: bool) -> Result<TensorRecord> {
        self.put(RecordKey::feature(&f.provenance), &T::wrap(f.values.clone().into_dyn()), overwrite)
    }

    /// One record per layer of the stack.
    pub fn put_attention(&mut self, stack: &CrossAttnStack, overwrite: bool) -> Result<Vec<TensorRecord>> {
        stack
            .layers
            .iter()
            .map(|l| {
                self.put_with_mask(
                    RecordKey::attention(stack, &l.id),
                    &DynArray::F32(l.probs.clone().into_dyn()),
                    Some(stack.token_mask.clone()),
                    overwrite,
                )
            })
            .collect()
    }

    pub fn record(&self, key: &RecordKey) -> Option<&TensorRecord> {
        self.manifest
            .records
            .binary_search_by(|r| r.key.cmp(key))
            .ok()
            .map(|i| &self.manifest.records[i])
    }

    pub fn get(&self, key: &RecordKey) -> Result<StoredTensor> {
        let record = self.record(key).ok_or_else(|| Error::MissingKey(key.to_string()))?;
        let values = self.read_payload(record)?;
        Ok(StoredTensor {
            values,
            record: record.clone(),
        })
    }

    fn read_payload(&self, record: &TensorRecord) -> Result<DynArray> {
        let path = self.root.join(&record.payload_path);
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let actual = hex16(&bytes);
        if actual != record.checksum {
            return Err(Error::ChecksumMismatch {
                path,
                expected: record.checksum.clone(),
                actual,
            });
        }
        let values = decode_payload(&bytes, &path)?;
        if values.shape() != record.shape.as_slice() || values.dtype() != record.dtype {
            return Err(Error::MalformedPayload {
                path,
                reason: "header disagrees with manifest".into(),
            });
        }
        Ok(values)
    }

    /// Reads a feature record back as a [`FeatureTensor`] in its stored dtype.
    pub fn get_feature<T: Element>(&self, key: &RecordKey) -> Result<FeatureTensor<T>> {
        if key.kind != RecordKind::Feature {
            return Err(Error::InvalidArgument(format!("{key} is not a feature record")));
        }
        let stored = self.get(key)?;
        let dtype = stored.values.dtype();
        let values = T::unwrap(stored.values)
            .ok_or_else(|| Error::InvalidArgument(format!("{key} is stored as {dtype:?}")))?
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        let block: BlockAddress = key.block.parse()?;
        FeatureTensor::new(
            values,
            Provenance {
                image_id: key.image_id.clone(),
                block,
                timestep: key.timestep,
                guidance_scale: key.guidance_scale,
                prompt_hash: key.prompt_hash.clone(),
                seed: key.seed,
            },
        )
    }

    /// Reassembles the attention stack stored for (image, prompt, timestep, seed).
    pub fn get_attention(&self, image_id: &str, prompt_hash: &str, timestep: usize, seed: u64) -> Result<CrossAttnStack> {
        let filter = RecordFilter {
            image_id: Some(image_id.into()),
            prompt_hash: Some(prompt_hash.into()),
            timestep: Some(timestep),
            seed: Some(seed),
            kind: Some(RecordKind::Attention),
            ..Default::default()
        };
        let records = self.query(&filter);
        if records.is_empty() {
            return Err(Error::MissingKey(format!(
                "attention {image_id}/{prompt_hash}/t{timestep}/seed{seed}"
            )));
        }
        let mut layers = Vec::with_capacity(records.len());
        let mut token_mask = Vec::new();
        for r in records {
            let probs: Array4<f32> = match self.read_payload(r)? {
                DynArray::F32(a) => a.into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?,
                DynArray::F64(_) => return Err(Error::InvalidArgument(format!("{} is not f32", r.key))),
            };
            token_mask = r.token_mask.clone().unwrap_or_default();
            layers.push(AttentionLayer {
                id: r.key.block.clone(),
                probs,
            });
        }
        Ok(CrossAttnStack {
            image_id: image_id.into(),
            prompt_hash: prompt_hash.into(),
            timestep,
            seed,
            token_mask,
            layers,
        })
    }

    /// Records matching every set field of `filter`, in key order.
    pub fn query(&self, filter: &RecordFilter) -> Vec<&TensorRecord> {
        self.manifest.records.iter().filter(|r| filter.matches(&r.key)).collect()
    }

    /// Re-hashes every payload and lists orphans.
    pub fn verify(&self) -> Result<VerifyReport> {
        let mut report = VerifyReport::default();
        for r in &self.manifest.records {
            report.checked += 1;
            let path = self.root.join(&r.payload_path);
            if !path.exists() {
                report.missing.push(r.key.to_string());
                continue;
            }
            match self.read_payload(r) {
                Ok(_) => {}
                Err(Error::ChecksumMismatch { .. } | Error::MalformedPayload { .. }) => {
                    report.corrupt.push(r.key.to_string())
                }
                Err(e) => return Err(e),
            }
        }
        report.orphans = self.orphans()?;
        Ok(report)
    }

    fn orphans(&self) -> Result<Vec<String>> {
        let referenced: std::collections::HashSet<&str> =
            self.manifest.records.iter().map(|r| r.payload_path.as_str()).collect();
        let dir = self.root.join(PAYLOADS);
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))? {
            let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
            let rel = format!("{PAYLOADS}/{}", entry.file_name().to_string_lossy());
            if !referenced.contains(rel.as_str()) {
                out.push(rel);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Deletes unreferenced payloads and stale temp files. Returns the removed paths.
    pub fn compact(&mut self) -> Result<Vec<String>> {
        let _lock = self.lock()?;
        self.refresh()?;
        let orphans = self.orphans()?;
        for rel in &orphans {
            let p = self.root.join(rel);
            fs::remove_file(&p).map_err(|e| Error::io(format!("removing {}", p.display()), e))?;
        }
        Ok(orphans)
    }

    /// Removes a record (its payload becomes an orphan until [`Self::compact`]).
    pub fn remove(&mut self, key: &RecordKey) -> Result<TensorRecord> {
        let _lock = self.lock()?;
        self.refresh()?;
        let i = self
            .manifest
            .records
            .binary_search_by(|r| r.key.cmp(key))
            .map_err(|_| Error::MissingKey(key.to_string()))?;
        let r = self.manifest.records.remove(i);
        self.write_manifest()?;
        Ok(r)
    }
}
