//! Per-frame normalized pairwise landmark distances and F-frame clip features.
//!
//! Pair `(i, j)` with `i < j` maps to flat index in lexicographic order, so
//! `(0,1), (0,2), ..., (0,125), (1,2), ...`. Distances are computed in `f64`
//! and stored as `f32`.
//!
//! The optional `FTR1` cache uses the `LMK1` container layout with a different
//! magic: `u32` frame count, `u32` feature count (7875), `u32` 1, then
//! `frame_count * 7875` little-endian `f32` values, frame-major.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_landmarks, DatasetManifest, IdentityId, LandmarkFrame, LandmarkSequence, Split,
    VideoRecord, NUM_LANDMARKS,
};
use crate::error::{Error, Result};
use crate::io_util::{push_f32s, read_f32s, read_u32, write_atomic};

pub const FEATURE_DIM: usize = NUM_LANDMARKS * (NUM_LANDMARKS - 1) / 2;
pub const FEATURE_MAGIC: &[u8; 4] = b"FTR1";

/// Flat index of the pair `(i, j)`, `i < j`.
pub fn pair_index(i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < NUM_LANDMARKS);
    i * (2 * NUM_LANDMARKS - i - 1) / 2 + (j - i - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct NormScale(f64);

impl NormScale {
    pub fn new(scale: f64) -> Result<Self> {
        if scale.is_finite() && scale > 0.0 {
            Ok(NormScale(scale))
        } else {
            Err(Error::DegenerateFace)
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Square root of the neutral frame's landmark bounding-box area.
pub fn neutral_scale(neutral: &LandmarkFrame) -> Result<NormScale> {
    let (w, h) = neutral.bbox_extent();
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::DegenerateFace);
    }
    NormScale::new((w * h).sqrt())
}

/// Whose neutral scale normalizes a video's distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeBy {
    /// The identity whose face appears in the video.
    #[default]
    Target,
    Driver,
}

impl std::str::FromStr for NormalizeBy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "target" => Ok(NormalizeBy::Target),
            "driver" => Ok(NormalizeBy::Driver),
            _ => Err(format!("expected `target` or `driver`, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeature {
    pub values: Vec<f32>,
}

pub fn frame_feature(frame: &LandmarkFrame, norm: NormScale) -> FrameFeature {
    let mut values = vec![0.0f32; FEATURE_DIM];
    frame_feature_into(frame, norm, &mut values);
    FrameFeature { values }
}

pub(crate) fn frame_feature_into(frame: &LandmarkFrame, norm: NormScale, out: &mut [f32]) {
    debug_assert_eq!(out.len(), FEATURE_DIM);
    let pts = frame.points();
    let mut xs = [0f64; NUM_LANDMARKS];
    let mut ys = [0f64; NUM_LANDMARKS];
    for (k, p) in pts.iter().enumerate() {
        xs[k] = p[0] as f64;
        ys[k] = p[1] as f64;
    }
    let inv = 1.0 / norm.value();
    let mut idx = 0;
    for i in 0..NUM_LANDMARKS {
        let (xi, yi) = (xs[i], ys[i]);
        let n = NUM_LANDMARKS - i - 1;
        let row = &mut out[idx..idx + n];
        for (o, (xj, yj)) in row.iter_mut().zip(xs[i + 1..].iter().zip(&ys[i + 1..])) {
            let dx = xi - xj;
            let dy = yi - yj;
            *o = ((dx * dx + dy * dy).sqrt() * inv) as f32;
        }
        idx += n;
    }
}

/// A `7875 x frames` feature matrix, channel-major (`data[c * frames + j]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeature {
    pub data: Vec<f32>,
    pub frames: usize,
    pub source_video: String,
    pub start_frame: usize,
}

impl ClipFeature {
    pub fn dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..FEATURE_DIM).map(|c| self.data[c * self.frames + j]).collect()
    }
}

/// Landmark coordinates of one window, landmark-major (`xs[l * len + t]`).
pub(crate) struct WindowCoords {
    xs: Vec<f64>,
    ys: Vec<f64>,
    inv_scale: f64,
}

fn window_coords(
    seq: &LandmarkSequence,
    norm: NormScale,
    start: usize,
    len: usize,
) -> Result<WindowCoords> {
    if start + len > seq.len() {
        return Err(Error::TooShort {
            frames: seq.len(),
            needed: start + len,
        });
    }
    let mut xs = vec![0f64; NUM_LANDMARKS * len];
    let mut ys = vec![0f64; NUM_LANDMARKS * len];
    for (t, frame) in seq.frames[start..start + len].iter().enumerate() {
        for (l, p) in frame.points().iter().enumerate() {
            xs[l * len + t] = p[0] as f64;
            ys[l * len + t] = p[1] as f64;
        }
    }
    Ok(WindowCoords {
        xs,
        ys,
        inv_scale: 1.0 / norm.value(),
    })
}

fn pairs() -> &'static [(usize, usize)] {
    static PAIRS: OnceLock<Vec<(usize, usize)>> = OnceLock::new();
    PAIRS.get_or_init(|| {
        (0..NUM_LANDMARKS)
            .flat_map(|i| (i + 1..NUM_LANDMARKS).map(move |j| (i, j)))
            .collect()
    })
}

/// Features of several equal-length windows as `[FEATURE_DIM, windows, len]`.
/// Same arithmetic as [`frame_feature`], so values agree bit for bit.
pub(crate) fn fill_windows(windows: &[WindowCoords], len: usize, data: &mut Vec<f32>) {
    const BLOCK: usize = 128;
    let row = windows.len() * len;
    data.clear();
    data.resize(FEATURE_DIM * row, 0.0);
    if row == 0 {
        return;
    }
    data.par_chunks_mut(BLOCK * row)
        .enumerate()
        .for_each(|(b, chunk)| {
            for (k, out) in chunk.chunks_exact_mut(row).enumerate() {
                let (i, j) = pairs()[b * BLOCK + k];
                for (w, o) in windows.iter().zip(out.chunks_exact_mut(len)) {
                    let (xi, xj) = (&w.xs[i * len..][..len], &w.xs[j * len..][..len]);
                    let (yi, yj) = (&w.ys[i * len..][..len], &w.ys[j * len..][..len]);
                    for t in 0..len {
                        let dx = xi[t] - xj[t];
                        let dy = yi[t] - yj[t];
                        o[t] = ((dx * dx + dy * dy).sqrt() * w.inv_scale) as f32;
                    }
                }
            }
        });
}

/// Features of `frames[start..start + len]` as a channel-major matrix.
pub fn window_features(
    seq: &LandmarkSequence,
    norm: NormScale,
    start: usize,
    len: usize,
) -> Result<ClipFeature> {
    let coords = window_coords(seq, norm, start, len)?;
    let mut data = Vec::new();
    fill_windows(&[coords], len, &mut data);
    Ok(ClipFeature {
        data,
        frames: len,
        source_video: seq.video_id.clone(),
        start_frame: start,
    })
}

/// F-frame clips starting at `0, stride, 2*stride, ...`.
pub fn clip_features(
    seq: &LandmarkSequence,
    norm: NormScale,
    clip_frames: usize,
    stride: usize,
) -> Result<Vec<ClipFeature>> {
    if clip_frames == 0 || stride == 0 {
        return Err(Error::Validation("clip length and stride must be positive".into()));
    }
    if seq.len() < clip_frames {
        return Err(Error::TooShort {
            frames: seq.len(),
            needed: clip_frames,
        });
    }
    let all = window_features(seq, norm, 0, seq.len())?;
    let starts: Vec<usize> = (0..=seq.len() - clip_frames).step_by(stride).collect();
    Ok(starts
        .into_iter()
        .map(|t| {
            let mut data = Vec::with_capacity(FEATURE_DIM * clip_frames);
            for c in 0..FEATURE_DIM {
                let row = &all.data[c * all.frames..(c + 1) * all.frames];
                data.extend_from_slice(&row[t..t + clip_frames]);
            }
            ClipFeature {
                data,
                frames: clip_frames,
                source_video: seq.video_id.clone(),
                start_frame: t,
            }
        })
        .collect())
}

pub fn encode_feature_cache(seq: &LandmarkSequence, norm: NormScale) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + seq.len() * FEATURE_DIM * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());
    let mut buf = vec![0f32; FEATURE_DIM];
    for f in &seq.frames {
        frame_feature_into(f, norm, &mut buf);
        push_f32s(&mut out, &buf);
    }
    out
}

/// Decodes an `FTR1` cache into per-frame feature vectors.
pub fn decode_feature_cache(bytes: &[u8]) -> Result<Vec<FrameFeature>> {
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Parse("missing FTR1 magic".into()));
    }
    let mut off = 4;
    let frames = read_u32(bytes, &mut off).unwrap() as usize;
    let dim = read_u32(bytes, &mut off).unwrap() as usize;
    let one = read_u32(bytes, &mut off).unwrap();
    if dim != FEATURE_DIM || one != 1 {
        return Err(Error::Shape(format!("feature cache has dim {dim}x{one}")));
    }
    if bytes.len() - off != frames * FEATURE_DIM * 4 {
        return Err(Error::Shape("feature cache payload length mismatch".into()));
    }
    let values = read_f32s(bytes, &mut off, frames * FEATURE_DIM).unwrap();
    Ok(values
        .chunks_exact(FEATURE_DIM)
        .map(|c| FrameFeature { values: c.to_vec() })
        .collect())
}

pub fn write_feature_cache(path: &Path, seq: &LandmarkSequence, norm: NormScale) -> Result<()> {
    write_atomic(path, &encode_feature_cache(seq, norm))
}

pub fn read_feature_cache(path: &Path) -> Result<Vec<FrameFeature>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_cache(&bytes)
}

/// The neutral scale used to featurize `record`.
pub fn scale_for(
    manifest: &DatasetManifest,
    record: &VideoRecord,
    by: NormalizeBy,
) -> Result<NormScale> {
    let id = match by {
        NormalizeBy::Target => &record.target_id,
        NormalizeBy::Driver => &record.driving_id,
    };
    let neutral = manifest.neutral_registry.get(id).ok_or_else(|| {
        Error::Validation(format!("missing neutral frame for identity `{id}`"))
    })?;
    neutral_scale(neutral)
}

/// Landmark sequences of one split held in memory, featurized on demand.
pub struct FeatureStore {
    records: HashMap<String, VideoRecord>,
    sequences: HashMap<String, Arc<LandmarkSequence>>,
    scales: HashMap<String, NormScale>,
}

impl FeatureStore {
    /// Loads every video whose driver and target both belong to `split`.
    pub fn load(manifest: &DatasetManifest, split: Split, by: NormalizeBy) -> Result<Self> {
        let records: Vec<&VideoRecord> = manifest.videos_in(split).collect();
        Self::load_records(manifest, &records, by)
    }

    pub fn load_records(
        manifest: &DatasetManifest,
        records: &[&VideoRecord],
        by: NormalizeBy,
    ) -> Result<Self> {
        let loaded: Vec<(VideoRecord, LandmarkSequence, NormScale)> = records
            .par_iter()
            .map(|r| {
                let seq = load_landmarks(manifest, r)?;
                let scale = scale_for(manifest, r, by)?;
                Ok(((*r).clone(), seq, scale))
            })
            .collect::<Result<_>>()?;
        let mut store = FeatureStore {
            records: HashMap::new(),
            sequences: HashMap::new(),
            scales: HashMap::new(),
        };
        for (r, seq, scale) in loaded {
            store.scales.insert(r.video_id.clone(), scale);
            store.sequences.insert(r.video_id.clone(), Arc::new(seq));
            store.records.insert(r.video_id.clone(), r);
        }
        Ok(store)
    }

    pub fn contains(&self, video_id: &str) -> bool {
        self.sequences.contains_key(video_id)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn record(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.get(video_id)
    }

    pub fn sequence(&self, video_id: &str) -> Result<&Arc<LandmarkSequence>> {
        self.sequences
            .get(video_id)
            .ok_or_else(|| Error::Validation(format!("video `{video_id}` not loaded")))
    }

    pub fn window(&self, video_id: &str, start: usize, len: usize) -> Result<ClipFeature> {
        let seq = self.sequence(video_id)?;
        window_features(seq, self.scales[video_id], start, len)
    }

    /// `len`-frame windows at `(video_id, start)` as `[FEATURE_DIM, windows, len]`.
    pub fn windows(&self, specs: &[(&str, usize)], len: usize) -> Result<Vec<f32>> {
        let mut data = Vec::new();
        self.windows_into(specs, len, &mut data)?;
        Ok(data)
    }

    /// [`FeatureStore::windows`] into an existing allocation.
    pub fn windows_into(&self, specs: &[(&str, usize)], len: usize, out: &mut Vec<f32>) -> Result<()> {
        let coords = specs
            .par_iter()
            .map(|(v, start)| window_coords(self.sequence(v)?, self.scales[*v], *start, len))
            .collect::<Result<Vec<_>>>()?;
        fill_windows(&coords, len, out);
        Ok(())
    }

    pub fn video(&self, video_id: &str) -> Result<ClipFeature> {
        let seq = self.sequence(video_id)?;
        window_features(seq, self.scales[video_id], 0, seq.len())
    }

    pub fn identities(&self) -> Vec<IdentityId> {
        let mut ids: Vec<IdentityId> = self
            .records
            .values()
            .flat_map(|r| [r.driving_id.clone(), r.target_id.clone()])
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}
