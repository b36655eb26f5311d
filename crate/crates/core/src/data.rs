//! Identities, videos, manifests and the `LMK1` landmark container.
//!
//! A manifest is a JSON document:
//!
//! ```text
//! {
//!   "format": "dynid-manifest",
//!   "version": 1,
//!   "identities": [
//!     { "id": "id00", "split": "train",
//!       "neutral": { "path": "neutral/id00.lmk", "frame": 0 } }
//!   ],
//!   "videos": [
//!     { "video_id": "self_id00_0", "driving_id": "id00", "target_id": "id00",
//!       "kind": "self_reenactment", "landmark_path": "landmarks/self_id00_0.lmk",
//!       "frame_count": 240, "fps": 30.0 }
//!   ]
//! }
//! ```
//!
//! `kind` is one of `original`, `self_reenactment`, `cross_reenactment`. All
//! paths are relative to the directory holding the manifest.
//!
//! Landmark files (`LMK1`) are little-endian: the 4 magic bytes, then `u32`
//! frame count, `u32` landmark count (126) and `u32` coordinate dims (2),
//! followed by `frame_count * 126 * 2` `f32` values in frame-major order.
//! Landmark indices are opaque; any detector ordering that is consistent
//! across a dataset works.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io_util::{self, push_f32s, read_f32s, read_u32, write_atomic};

pub const NUM_LANDMARKS: usize = 126;
pub const LANDMARK_MAGIC: &[u8; 4] = b"LMK1";
pub const MANIFEST_FORMAT: &str = "dynid-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityId(String);

impl IdentityId {
    pub fn new(id: impl Into<String>) -> Self {
        IdentityId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for IdentityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoKind {
    Original,
    SelfReenactment,
    CrossReenactment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub driving_id: IdentityId,
    pub target_id: IdentityId,
    pub kind: VideoKind,
    pub landmark_path: PathBuf,
    pub frame_count: usize,
    pub fps: f64,
}

impl VideoRecord {
    pub fn is_synthetic(&self) -> bool {
        self.kind != VideoKind::Original
    }
}

/// One frame of 126 image-plane landmarks in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkFrame {
    points: Vec<[f32; 2]>,
}

impl LandmarkFrame {
    pub fn new(points: Vec<[f32; 2]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::Shape(format!(
                "frame has {} landmarks, expected {NUM_LANDMARKS}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("landmark coordinate".into()));
        }
        Ok(LandmarkFrame { points })
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.points
    }

    /// Width and height of the tight axis-aligned bounding box.
    pub fn bbox_extent(&self) -> (f64, f64) {
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            let (x, y) = (p[0] as f64, p[1] as f64);
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
        (max_x - min_x, max_y - min_y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSequence {
    pub video_id: String,
    pub frames: Vec<LandmarkFrame>,
}

impl LandmarkSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Location of an identity's neutral-pose, neutral-expression frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeutralRef {
    pub path: PathBuf,
    #[serde(default)]
    pub frame: usize,
}

pub type NeutralFrameRegistry = BTreeMap<IdentityId, LandmarkFrame>;

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
    pub identities: Vec<IdentityId>,
    pub videos: Vec<VideoRecord>,
    pub neutral_refs: BTreeMap<IdentityId, NeutralRef>,
    pub neutral_registry: NeutralFrameRegistry,
    pub split: BTreeMap<IdentityId, Split>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format: String,
    version: u32,
    identities: Vec<IdentityEntry>,
    videos: Vec<VideoRecord>,
}

#[derive(Serialize, Deserialize)]
struct IdentityEntry {
    id: IdentityId,
    split: Split,
    neutral: NeutralRef,
}

impl DatasetManifest {
    pub fn split_of(&self, id: &IdentityId) -> Option<Split> {
        self.split.get(id).copied()
    }

    pub fn identities_in(&self, split: Split) -> Vec<IdentityId> {
        self.identities
            .iter()
            .filter(|id| self.split_of(id) == Some(split))
            .cloned()
            .collect()
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    /// Videos whose driving and target identities both belong to `split`.
    pub fn videos_in(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.videos.iter().filter(move |v| {
            self.split_of(&v.driving_id) == Some(split) && self.split_of(&v.target_id) == Some(split)
        })
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Checks every in-memory invariant; does not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in &self.identities {
            if id.as_str().is_empty() {
                return Err(Error::Validation("empty identity id".into()));
            }
            if !seen.insert(id) {
                return Err(Error::Validation(format!("duplicate identity `{id}`")));
            }
            if !self.split.contains_key(id) {
                return Err(Error::Validation(format!("identity `{id}` has no split")));
            }
            let neutral = self.neutral_registry.get(id).ok_or_else(|| {
                Error::Validation(format!("missing neutral frame for identity `{id}`"))
            })?;
            let (w, h) = neutral.bbox_extent();
            if !(w > 0.0 && h > 0.0) {
                return Err(Error::Validation(format!(
                    "neutral frame for identity `{id}` has zero-area bounding box"
                )));
            }
        }
        let mut video_ids = BTreeSet::new();
        for v in &self.videos {
            if !video_ids.insert(v.video_id.as_str()) {
                return Err(Error::Validation(format!("duplicate video `{}`", v.video_id)));
            }
            for id in [&v.driving_id, &v.target_id] {
                if !seen.contains(id) {
                    return Err(Error::Validation(format!(
                        "video `{}` references unknown identity `{id}`",
                        v.video_id
                    )));
                }
            }
            if v.frame_count == 0 {
                return Err(Error::Validation(format!("video `{}` has no frames", v.video_id)));
            }
            if !(v.fps.is_finite() && v.fps > 0.0) {
                return Err(Error::Validation(format!("video `{}` has invalid fps", v.video_id)));
            }
            let same = v.driving_id == v.target_id;
            match v.kind {
                VideoKind::Original | VideoKind::SelfReenactment if !same => {
                    return Err(Error::Validation(format!(
                        "video `{}`: {:?} requires driving_id = target_id",
                        v.video_id, v.kind
                    )));
                }
                VideoKind::CrossReenactment if same => {
                    return Err(Error::Validation(format!(
                        "video `{}`: cross-reenactment requires driving_id != target_id",
                        v.video_id
                    )));
                }
                _ => {}
            }
            if v.is_synthetic() && self.split_of(&v.driving_id) != self.split_of(&v.target_id) {
                return Err(Error::Validation(format!(
                    "cross-set reenactment: video `{}` is driven by `{}` ({}) but targets `{}` ({})",
                    v.video_id,
                    v.driving_id,
                    self.split[&v.driving_id],
                    v.target_id,
                    self.split[&v.target_id],
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over the identity/split assignment and the video records.
    pub fn fingerprint(&self) -> String {
        let file = self.to_file();
        let bytes = serde_json::to_vec(&(&file.identities, &file.videos))
            .expect("manifest serializes");
        io_util::hex(&Sha256::digest(&bytes))
    }

    fn to_file(&self) -> ManifestFile {
        ManifestFile {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            identities: self
                .identities
                .iter()
                .map(|id| IdentityEntry {
                    id: id.clone(),
                    split: self.split[id],
                    neutral: self.neutral_refs.get(id).cloned().unwrap_or(NeutralRef {
                        path: PathBuf::new(),
                        frame: 0,
                    }),
                })
                .collect(),
            videos: self.videos.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("manifest serializes")
    }

    /// Writes the manifest document into `root/manifest.json`.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        write_atomic(&path, self.to_json().as_bytes())?;
        Ok(path)
    }
}

/// Accepts either a manifest file or a directory containing `manifest.json`.
pub fn resolve_manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        return path.join(MANIFEST_FILE);
    }
    if !path.exists() {
        let with_ext = path.with_extension("json");
        if with_ext.exists() {
            return with_ext;
        }
    }
    path.to_path_buf()
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = resolve_manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if file.format != MANIFEST_FORMAT {
        return Err(Error::Parse(format!("unexpected format tag `{}`", file.format)));
    }
    if file.version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: file.version,
            expected: MANIFEST_VERSION,
        });
    }
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut identities = Vec::with_capacity(file.identities.len());
    let mut split = BTreeMap::new();
    let mut neutral_refs = BTreeMap::new();
    let mut neutral_registry = BTreeMap::new();
    for entry in file.identities {
        let neutral_path = root.join(&entry.neutral.path);
        if !neutral_path.exists() {
            return Err(Error::Validation(format!(
                "missing neutral frame file for identity `{}`: {}",
                entry.id,
                neutral_path.display()
            )));
        }
        let frames = read_landmarks(&neutral_path)?;
        let frame = frames.into_iter().nth(entry.neutral.frame).ok_or_else(|| {
            Error::Validation(format!(
                "neutral frame index {} out of range for identity `{}`",
                entry.neutral.frame, entry.id
            ))
        })?;
        identities.push(entry.id.clone());
        split.insert(entry.id.clone(), entry.split);
        neutral_registry.insert(entry.id.clone(), frame);
        neutral_refs.insert(entry.id, entry.neutral);
    }
    let manifest = DatasetManifest {
        root,
        identities,
        videos: file.videos,
        neutral_refs,
        neutral_registry,
        split,
    };
    manifest.validate()?;
    for v in &manifest.videos {
        let p = manifest.resolve(&v.landmark_path);
        if !p.is_file() {
            return Err(Error::Validation(format!(
                "landmark file for video `{}` not found: {}",
                v.video_id,
                p.display()
            )));
        }
    }
    Ok(manifest)
}

pub fn encode_landmarks(frames: &[LandmarkFrame]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + frames.len() * NUM_LANDMARKS * 8);
    out.extend_from_slice(LANDMARK_MAGIC);
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    out.extend_from_slice(&(NUM_LANDMARKS as u32).to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    for f in frames {
        let flat: Vec<f32> = f.points.iter().flatten().copied().collect();
        push_f32s(&mut out, &flat);
    }
    out
}

pub fn decode_landmarks(bytes: &[u8]) -> Result<Vec<LandmarkFrame>> {
    if bytes.len() < 16 || &bytes[..4] != LANDMARK_MAGIC {
        return Err(Error::Parse("missing LMK1 magic".into()));
    }
    let mut off = 4;
    let frame_count = read_u32(bytes, &mut off).unwrap() as usize;
    let landmark_count = read_u32(bytes, &mut off).unwrap() as usize;
    let dims = read_u32(bytes, &mut off).unwrap() as usize;
    if landmark_count != NUM_LANDMARKS {
        return Err(Error::Shape(format!(
            "{landmark_count} landmarks per frame, expected {NUM_LANDMARKS}"
        )));
    }
    if dims != 2 {
        return Err(Error::Shape(format!("{dims}-D coordinates, expected 2-D")));
    }
    let expected = frame_count * NUM_LANDMARKS * 2;
    if bytes.len() - off != expected * 4 {
        return Err(Error::Shape(format!(
            "payload holds {} values, header implies {expected}",
            (bytes.len() - off) / 4
        )));
    }
    let values = read_f32s(bytes, &mut off, expected).unwrap();
    values
        .chunks_exact(NUM_LANDMARKS * 2)
        .map(|chunk| {
            LandmarkFrame::new(chunk.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
        })
        .collect()
}

pub fn write_landmarks(path: &Path, frames: &[LandmarkFrame]) -> Result<()> {
    write_atomic(path, &encode_landmarks(frames))
}

pub fn read_landmarks(path: &Path) -> Result<Vec<LandmarkFrame>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_landmarks(&bytes)
}

pub fn load_landmarks(manifest: &DatasetManifest, record: &VideoRecord) -> Result<LandmarkSequence> {
    let frames = read_landmarks(&manifest.resolve(&record.landmark_path))?;
    if frames.len() != record.frame_count {
        return Err(Error::Validation(format!(
            "video `{}`: file has {} frames, manifest says {}",
            record.video_id,
            frames.len(),
            record.frame_count
        )));
    }
    Ok(LandmarkSequence {
        video_id: record.video_id.clone(),
        frames,
    })
}

#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub manifest: DatasetManifest,
    /// Synthetic records removed because driver and target landed in different splits.
    pub dropped: usize,
}

/// Number of identities per split by largest-remainder rounding.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut remaining = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    for (i, (&size, &frac)) in sizes.iter().zip(&fractions).enumerate() {
        if frac > 0.0 && size == 0 {
            return Err(Error::EmptySplit {
                split: [Split::Train, Split::Val, Split::Test][i].to_string(),
            });
        }
    }
    Ok(sizes)
}

/// Assigns identities to train/val/test by seeded shuffle and drops synthetic
/// records whose driver and target end up in different splits.
pub fn split_identities(
    manifest: &DatasetManifest,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitOutcome> {
    let sizes = split_sizes(manifest.identities.len(), fractions)?;
    let mut order = manifest.identities.clone();
    order.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut split = BTreeMap::new();
    let labels = [Split::Train, Split::Val, Split::Test];
    let mut it = order.into_iter();
    for (label, size) in labels.iter().zip(sizes) {
        for id in it.by_ref().take(size) {
            split.insert(id, *label);
        }
    }

    let mut out = manifest.clone();
    out.split = split;
    let before = out.videos.len();
    out.videos
        .retain(|v| !v.is_synthetic() || out.split[&v.driving_id] == out.split[&v.target_id]);
    let dropped = before - out.videos.len();
    Ok(SplitOutcome {
        manifest: out,
        dropped,
    })
}
