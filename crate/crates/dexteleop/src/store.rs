//! Structured episode store: a binary columnar telemetry file, JSON
//! metadata/camera documents, procedural frame files, and a checksummed
//! manifest tying them together.
//!
//! Layout per episode directory:
//!
//! ```text
//! <episode>/
//!   telemetry.bin      magic `OTDXTEL1` + JSON header line + LE column blocks
//!   metadata.json
//!   camera_info.json
//!   manifest.json      { "version": 1, "files": [ { path, bytes, fnv1a64 } ] }
//!   frames/<camera>/<index>.ppm
//! ```
//!
//! All JSON is emitted with sorted keys and a trailing newline so identical
//! inputs always produce identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collection::EpisodeBuffer;
use crate::timesync::{
    avg_error_ms_from_rows, percentile_error_ms_from_rows, success_rate_from_rows, SyncPolicy,
};

pub const TELEMETRY_MAGIC: &[u8; 8] = b"OTDXTEL1";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty episode buffer")]
    EmptyBuffer,
    #[error("metadata declares {metadata} timesteps but buffer holds {buffer}")]
    TimestepMismatch { metadata: usize, buffer: usize },
    #[error("bad telemetry magic")]
    BadMagic,
    #[error("malformed telemetry header: {0}")]
    BadHeader(String),
    #[error("manifest version {0} is not supported")]
    VersionMismatch(u32),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error("file listed in manifest is missing: {0}")]
    MissingFile(String),
    #[error("file on disk not listed in manifest: {0}")]
    UnlistedFile(String),
    #[error("dataset root missing: {0}")]
    RootMissing(PathBuf),
    #[error("invalid camera intrinsics for `{0}`")]
    BadCameraInfo(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// 64-bit FNV-1a. Integrity-only, not cryptographic.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Canonical JSON bytes: sorted keys, pretty-printed, newline-terminated.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<Vec<u8>, StoreError> {
    // Round-tripping through Value sorts object keys (its map is a BTreeMap).
    let v: serde_json::Value = serde_json::to_value(value)?;
    let mut bytes = serde_json::to_vec_pretty(&v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

// ---------------------------------------------------------------------------
// Session metadata
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetadata {
    pub task_name: String,
    pub episode_id: String,
    pub session_id: String,
    pub duration_sec: f64,
    pub timesteps: usize,
    pub hardware_preset: String,
    pub arm_type: String,
    pub hand_type: String,
    pub total_dof: usize,
    pub camera_preset: String,
    pub camera_type: String,
    pub resolution: String,
    pub fps: f64,
    pub control_freq_hz: f64,
    pub dt: f64,
    pub data_format: String,
    pub qpos_dim: usize,
    pub camera_streams: Vec<String>,
    pub tactile_sensors: Vec<String>,
    pub sync_policy: SyncPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraInfo {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: String,
}

impl CameraInfo {
    pub fn validate(&self, name: &str) -> Result<(), StoreError> {
        if self.fx > 0.0
            && self.fy > 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64
        {
            Ok(())
        } else {
            Err(StoreError::BadCameraInfo(name.to_string()))
        }
    }
}

// ---------------------------------------------------------------------------
// Telemetry table
// ---------------------------------------------------------------------------

/// Columnar telemetry for one episode. Matrix columns are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryTable {
    pub rows: usize,
    pub dof: usize,
    pub sources: Vec<String>,
    pub qpos: Vec<f64>,
    pub qvel: Vec<f64>,
    pub action: Vec<f64>,
    pub timestamps: Vec<f64>,
    pub sync_valid: Vec<bool>,
    pub sync_max_diff: Vec<f64>,
}

impl TelemetryTable {
    pub fn from_buffer(buffer: &EpisodeBuffer) -> Result<Self, StoreError> {
        let first = buffer.observations.first().ok_or(StoreError::EmptyBuffer)?;
        let dof = first.qpos.len();
        let sources: Vec<String> = first.sync.timestamps.entries.keys().cloned().collect();
        let rows = buffer.observations.len();
        let mut table = Self {
            rows,
            dof,
            sources: sources.clone(),
            qpos: Vec::with_capacity(rows * dof),
            qvel: Vec::with_capacity(rows * dof),
            action: Vec::with_capacity(rows * dof),
            timestamps: Vec::with_capacity(rows * sources.len()),
            sync_valid: Vec::with_capacity(rows),
            sync_max_diff: Vec::with_capacity(rows),
        };
        for obs in &buffer.observations {
            table.qpos.extend_from_slice(&obs.qpos);
            table.qvel.extend_from_slice(&obs.qvel);
            table.action.extend_from_slice(&obs.action);
            for s in &sources {
                table.timestamps.push(obs.sync.timestamps.entries[s]);
            }
            table.sync_valid.push(obs.sync.is_valid);
            table.sync_max_diff.push(obs.sync.max_diff);
        }
        Ok(table)
    }

    pub fn sync_rows(&self) -> Vec<(bool, f64)> {
        self.sync_valid
            .iter()
            .copied()
            .zip(self.sync_max_diff.iter().copied())
            .collect()
    }

    fn encode(&self) -> Result<Vec<u8>, StoreError> {
        let header = serde_json::json!({
            "columns": [
                { "name": "qpos", "dtype": "f64", "shape": [self.rows, self.dof] },
                { "name": "qvel", "dtype": "f64", "shape": [self.rows, self.dof] },
                { "name": "action", "dtype": "f64", "shape": [self.rows, self.dof] },
                { "name": "timestamps", "dtype": "f64", "shape": [self.rows, self.sources.len()] },
                { "name": "sync_validation_is_valid", "dtype": "u8", "shape": [self.rows] },
                { "name": "sync_max_diff", "dtype": "f64", "shape": [self.rows] },
            ],
            "rows": self.rows,
            "sources": self.sources,
        });
        let mut out = Vec::new();
        out.extend_from_slice(TELEMETRY_MAGIC);
        out.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
        out.push(b'\n');
        for col in [&self.qpos, &self.qvel, &self.action, &self.timestamps] {
            for v in col.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend(self.sync_valid.iter().map(|v| *v as u8));
        for v in &self.sync_max_diff {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < 8 || &bytes[..8] != TELEMETRY_MAGIC {
            return Err(StoreError::BadMagic);
        }
        let rest = &bytes[8..];
        let newline = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| StoreError::BadHeader("missing header line".into()))?;
        let header: serde_json::Value = serde_json::from_slice(&rest[..newline])?;
        let rows = header["rows"]
            .as_u64()
            .ok_or_else(|| StoreError::BadHeader("missing rows".into()))? as usize;
        let sources: Vec<String> = header["sources"]
            .as_array()
            .ok_or_else(|| StoreError::BadHeader("missing sources".into()))?
            .iter()
            .filter_map(|v| v.as_str().map(String::from))
            .collect();
        let columns = header["columns"]
            .as_array()
            .ok_or_else(|| StoreError::BadHeader("missing columns".into()))?;
        let dof = columns
            .first()
            .and_then(|c| c["shape"].as_array())
            .and_then(|s| s.get(1))
            .and_then(|v| v.as_u64())
            .ok_or_else(|| StoreError::BadHeader("missing qpos shape".into()))?
            as usize;

        let mut cursor = &rest[newline + 1..];
        let mut read_f64 = |count: usize| -> Result<Vec<f64>, StoreError> {
            if cursor.len() < count * 8 {
                return Err(StoreError::BadHeader("truncated column block".into()));
            }
            let vals = cursor[..count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cursor = &cursor[count * 8..];
            Ok(vals)
        };
        let qpos = read_f64(rows * dof)?;
        let qvel = read_f64(rows * dof)?;
        let action = read_f64(rows * dof)?;
        let timestamps = read_f64(rows * sources.len())?;
        if cursor.len() < rows {
            return Err(StoreError::BadHeader("truncated flag block".into()));
        }
        let sync_valid: Vec<bool> = cursor[..rows].iter().map(|b| *b != 0).collect();
        cursor = &cursor[rows..];
        let sync_max_diff = {
            if cursor.len() != rows * 8 {
                return Err(StoreError::BadHeader("trailing bytes".into()));
            }
            cursor
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        Ok(Self {
            rows,
            dof,
            sources,
            qpos,
            qvel,
            action,
            timestamps,
            sync_valid,
            sync_max_diff,
        })
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub fnv1a64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub version: u32,
    pub files: Vec<ManifestEntry>,
}

// ---------------------------------------------------------------------------
// Frames
// ---------------------------------------------------------------------------

/// Procedural binary PPM frame; the frame index is embedded in the first
/// pixels so alignment survives a round-trip.
pub fn render_frame(camera: &str, index: u64, width: u32, height: u32) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    let tag = fnv1a64(camera.as_bytes());
    let index_bytes = index.to_le_bytes();
    for y in 0..height {
        for x in 0..width {
            let pixel = (y * width + x) as usize;
            if pixel < 8 {
                out.extend_from_slice(&[index_bytes[pixel], 0, 255]);
            } else {
                let r = ((x as u64 * 7 + index * 13 + tag) % 256) as u8;
                let g = ((y as u64 * 11 + index * 5) % 256) as u8;
                let b = (((x + y) as u64 + index) % 256) as u8;
                out.extend_from_slice(&[r, g, b]);
            }
        }
    }
    out
}

/// Recover the embedded frame index from PPM bytes.
pub fn frame_index_from_ppm(bytes: &[u8]) -> Option<u64> {
    let mut fields = 0;
    let mut pos = 0;
    // Skip "P6", width, height, maxval tokens and the single following
    // whitespace byte.
    while pos < bytes.len() && fields < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields += 1;
    }
    pos += 1;
    let mut idx = [0u8; 8];
    for (k, slot) in idx.iter_mut().enumerate() {
        *slot = *bytes.get(pos + 3 * k)?;
    }
    Some(u64::from_le_bytes(idx))
}

// ---------------------------------------------------------------------------
// Write / read
// ---------------------------------------------------------------------------

/// Serialize one episode into `dir`. Returns the manifest. Writing the same
/// inputs twice produces byte-identical files.
pub fn write_episode(
    buffer: &EpisodeBuffer,
    metadata: &SessionMetadata,
    cameras: &BTreeMap<String, CameraInfo>,
    dir: &Path,
) -> Result<EpisodeManifest, StoreError> {
    let table = TelemetryTable::from_buffer(buffer)?;
    if metadata.timesteps != table.rows {
        return Err(StoreError::TimestepMismatch {
            metadata: metadata.timesteps,
            buffer: table.rows,
        });
    }
    for (name, info) in cameras {
        info.validate(name)?;
    }

    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    files.insert("telemetry.bin".into(), table.encode()?);
    files.insert("metadata.json".into(), canonical_json(metadata)?);
    files.insert("camera_info.json".into(), canonical_json(cameras)?);

    // One frame file per distinct delivered frame index per camera.
    let mut max_index: BTreeMap<&str, u64> = BTreeMap::new();
    for obs in &buffer.observations {
        for (cam, frame) in &obs.frames {
            let entry = max_index.entry(cam.as_str()).or_insert(0);
            *entry = (*entry).max(frame.index);
        }
    }
    for (cam, max) in &max_index {
        let (w, h) = cameras
            .get(*cam)
            .map(|c| (c.width, c.height))
            .unwrap_or((64, 48));
        for index in 0..=*max {
            files.insert(
                format!("frames/{cam}/{index:06}.ppm"),
                render_frame(cam, index, w, h),
            );
        }
    }

    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::new();
    for (rel, bytes) in &files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(bytes).map_err(io_err(&path))?;
        entries.push(ManifestEntry {
            path: rel.clone(),
            bytes: bytes.len() as u64,
            fnv1a64: format!("{:016x}", fnv1a64(bytes)),
        });
    }
    let manifest = EpisodeManifest {
        version: MANIFEST_VERSION,
        files: entries,
    };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, canonical_json(&manifest)?).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

fn walk_files(dir: &Path, base: &Path, out: &mut BTreeSet<String>) -> Result<(), StoreError> {
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_dir() {
            walk_files(&path, base, out)?;
        } else {
            let rel = path
                .strip_prefix(base)
                .expect("walk stays under base")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.insert(rel);
        }
    }
    Ok(())
}

/// Verify the manifest and read an episode back. Telemetry floats round-trip
/// bit-exactly.
pub fn read_episode(
    dir: &Path,
) -> Result<(TelemetryTable, SessionMetadata, BTreeMap<String, CameraInfo>), StoreError> {
    let manifest_path = dir.join("manifest.json");
    let manifest_bytes = std::fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: EpisodeManifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(StoreError::VersionMismatch(manifest.version));
    }

    let mut on_disk = BTreeSet::new();
    walk_files(dir, dir, &mut on_disk)?;
    on_disk.remove("manifest.json");
    let listed: BTreeSet<String> = manifest.files.iter().map(|e| e.path.clone()).collect();
    if let Some(missing) = listed.difference(&on_disk).next() {
        return Err(StoreError::MissingFile(missing.clone()));
    }
    if let Some(extra) = on_disk.difference(&listed).next() {
        return Err(StoreError::UnlistedFile(extra.clone()));
    }
    for entry in &manifest.files {
        let path = dir.join(&entry.path);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() as u64 != entry.bytes
            || format!("{:016x}", fnv1a64(&bytes)) != entry.fnv1a64
        {
            return Err(StoreError::ChecksumMismatch(entry.path.clone()));
        }
    }

    let telemetry = std::fs::read(dir.join("telemetry.bin")).map_err(io_err(dir))?;
    let table = TelemetryTable::decode(&telemetry)?;
    let metadata: SessionMetadata =
        serde_json::from_slice(&std::fs::read(dir.join("metadata.json")).map_err(io_err(dir))?)?;
    let cameras: BTreeMap<String, CameraInfo> =
        serde_json::from_slice(&std::fs::read(dir.join("camera_info.json")).map_err(io_err(dir))?)?;
    Ok((table, metadata, cameras))
}

// ---------------------------------------------------------------------------
// Filtering and dataset validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncFilterMode {
    DropInvalid,
    WeightByMaxDiff,
}

#[derive(Debug, Clone)]
pub enum SyncFilterResult {
    Filtered(TelemetryTable),
    Weighted(Vec<f64>),
}

/// Drop rows flagged invalid, or compute per-row training weights
/// `clamp(1 - max_diff / tolerance, 0, 1)`.
pub fn filter_by_sync(
    table: &TelemetryTable,
    mode: SyncFilterMode,
    tolerance: f64,
) -> SyncFilterResult {
    match mode {
        SyncFilterMode::WeightByMaxDiff => SyncFilterResult::Weighted(
            table
                .sync_max_diff
                .iter()
                .map(|d| (1.0 - d / tolerance).clamp(0.0, 1.0))
                .collect(),
        ),
        SyncFilterMode::DropInvalid => {
            let keep: Vec<usize> = (0..table.rows).filter(|r| table.sync_valid[*r]).collect();
            let take = |col: &[f64], width: usize| -> Vec<f64> {
                keep.iter()
                    .flat_map(|r| col[r * width..(r + 1) * width].iter().copied())
                    .collect()
            };
            SyncFilterResult::Filtered(TelemetryTable {
                rows: keep.len(),
                dof: table.dof,
                sources: table.sources.clone(),
                qpos: take(&table.qpos, table.dof),
                qvel: take(&table.qvel, table.dof),
                action: take(&table.action, table.dof),
                timestamps: take(&table.timestamps, table.sources.len()),
                sync_valid: keep.iter().map(|r| table.sync_valid[*r]).collect(),
                sync_max_diff: keep.iter().map(|r| table.sync_max_diff[*r]).collect(),
            })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetReport {
    pub episodes: usize,
    pub total_timesteps: usize,
    pub sync_success_rate: f64,
    pub avg_sync_error_ms: f64,
    pub tp99_ms: f64,
    pub failures: Vec<String>,
}

fn find_episode_dirs(root: &Path, out: &mut Vec<PathBuf>) -> Result<(), StoreError> {
    if root.join("manifest.json").is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    for entry in std::fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        if entry.path().is_dir() {
            find_episode_dirs(&entry.path(), out)?;
        }
    }
    Ok(())
}

/// Aggregate sync metrics across every episode under `root`. Structural
/// failures are reported per episode without aborting the rest.
pub fn validate_dataset(root: &Path) -> Result<DatasetReport, StoreError> {
    if !root.is_dir() {
        return Err(StoreError::RootMissing(root.to_path_buf()));
    }
    let mut dirs = Vec::new();
    find_episode_dirs(root, &mut dirs)?;
    dirs.sort();

    let mut episodes = 0;
    let mut rows: Vec<(bool, f64)> = Vec::new();
    let mut failures = Vec::new();
    for dir in &dirs {
        match read_episode(dir) {
            Ok((table, _, _)) => {
                episodes += 1;
                rows.extend(table.sync_rows());
            }
            Err(e) => failures.push(format!("{}: {e}", dir.display())),
        }
    }
    Ok(DatasetReport {
        episodes,
        total_timesteps: rows.len(),
        sync_success_rate: success_rate_from_rows(&rows).unwrap_or(0.0),
        avg_sync_error_ms: avg_error_ms_from_rows(&rows).unwrap_or(0.0),
        tp99_ms: percentile_error_ms_from_rows(&rows, 99.0).unwrap_or(0.0),
        failures,
    })
}
