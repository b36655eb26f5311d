//! Training batch composition.
//!
//! A batch holds `identities` distinct driving identities. Each one pulls
//! `self_pull` self-reenactment windows and `cross_pull` windows of
//! cross-reenactments it drove, and pushes `push_per_other` windows from each
//! of the other batch identities. Push windows are the other identity's
//! self-reenactment pull windows, so every window is embedded once per step.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, IdentityId, Split, VideoKind, VideoRecord};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::features::{FeatureStore, FEATURE_DIM};
use crate::loss::{LossBatch, LossGroup, LossLayout};
use crate::network::WINDOW_EXTRA;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchShape {
    pub identities: usize,
    pub self_pull: usize,
    pub cross_pull: usize,
    pub push_per_other: usize,
}

impl Default for BatchShape {
    fn default() -> Self {
        BatchShape {
            identities: 8,
            self_pull: 8,
            cross_pull: 8,
            push_per_other: 8,
        }
    }
}

impl BatchShape {
    pub fn pull_per_identity(&self) -> usize {
        self.self_pull + self.cross_pull
    }

    pub fn push_per_identity(&self) -> usize {
        (self.identities - 1) * self.push_per_other
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::Validation("a batch needs at least 2 identities".into()));
        }
        if self.self_pull == 0 || self.push_per_other == 0 {
            return Err(Error::Validation("batch window counts must be positive".into()));
        }
        if self.pull_per_identity() < 2 {
            return Err(Error::Validation("each identity needs at least 2 pull windows".into()));
        }
        if self.push_per_other > self.self_pull {
            return Err(Error::Validation(
                "push_per_other cannot exceed self_pull (push windows reuse self pulls)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    pub video_id: String,
    pub start_frame: usize,
    pub driving_id: IdentityId,
    pub kind: VideoKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityPlan {
    pub identity: IdentityId,
    pub pull: Vec<WindowSpec>,
    pub push: Vec<WindowSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub identities: Vec<IdentityPlan>,
    /// Frames per window (`F + 4`).
    pub window_frames: usize,
    pub rng_token: u64,
}

impl BatchPlan {
    pub fn distinct_windows(&self) -> Vec<&WindowSpec> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for spec in self.identities.iter().flat_map(|p| p.pull.iter().chain(&p.push)) {
            let key = (spec.video_id.as_str(), spec.start_frame);
            if seen.insert(key, ()).is_none() {
                out.push(spec);
            }
        }
        out
    }
}

struct Pools {
    selfs: Vec<VideoRecord>,
    cross: Vec<VideoRecord>,
}

/// Per-split candidate videos, built once and sampled every step.
pub struct BatchSampler {
    shape: BatchShape,
    window_frames: usize,
    ids: Vec<IdentityId>,
    pools: BTreeMap<IdentityId, Pools>,
}

impl BatchSampler {
    pub fn new(
        manifest: &DatasetManifest,
        split: Split,
        clip_frames: usize,
        shape: BatchShape,
    ) -> Result<Self> {
        shape.validate()?;
        let window_frames = clip_frames + WINDOW_EXTRA;
        let ids = manifest.identities_in(split);
        if ids.len() < shape.identities {
            return Err(Error::InsufficientData {
                identity: format!("<{split} split>"),
                category: format!(
                    "{} identities available, batch needs {}",
                    ids.len(),
                    shape.identities
                ),
            });
        }
        let mut pools = BTreeMap::new();
        for id in &ids {
            let usable = |v: &&VideoRecord| {
                v.driving_id == *id
                    && v.frame_count >= window_frames
                    && manifest.split_of(&v.target_id) == Some(split)
            };
            let selfs: Vec<VideoRecord> = manifest
                .videos
                .iter()
                .filter(|v| v.kind == VideoKind::SelfReenactment)
                .filter(usable)
                .cloned()
                .collect();
            let cross: Vec<VideoRecord> = manifest
                .videos
                .iter()
                .filter(|v| v.kind == VideoKind::CrossReenactment)
                .filter(usable)
                .cloned()
                .collect();
            if selfs.len() < shape.self_pull {
                return Err(Error::InsufficientData {
                    identity: id.to_string(),
                    category: format!(
                        "self-reenactment videos of >= {window_frames} frames: have {}, need {}",
                        selfs.len(),
                        shape.self_pull
                    ),
                });
            }
            if cross.len() < shape.cross_pull {
                warn!(
                    "identity {id}: {} cross-reenactments as driver, {} wanted; filling with self-reenactment windows",
                    cross.len(),
                    shape.cross_pull
                );
            }
            pools.insert(id.clone(), Pools { selfs, cross });
        }
        Ok(BatchSampler {
            shape,
            window_frames,
            ids,
            pools,
        })
    }

    pub fn shape(&self) -> BatchShape {
        self.shape
    }

    fn window<R: Rng + ?Sized>(&self, v: &VideoRecord, rng: &mut R) -> WindowSpec {
        let start = rng.random_range(0..=v.frame_count - self.window_frames);
        WindowSpec {
            video_id: v.video_id.clone(),
            start_frame: start,
            driving_id: v.driving_id.clone(),
            kind: v.kind,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, rng_token: u64) -> BatchPlan {
        let chosen: Vec<&IdentityId> =
            self.ids.choose_multiple(rng, self.shape.identities).collect();
        let mut plans: Vec<IdentityPlan> = chosen
            .iter()
            .map(|id| {
                let pools = &self.pools[*id];
                let mut pull: Vec<WindowSpec> = pools
                    .selfs
                    .choose_multiple(rng, self.shape.self_pull)
                    .map(|v| self.window(v, rng))
                    .collect();
                let n_cross = self.shape.cross_pull.min(pools.cross.len());
                let cross: Vec<&VideoRecord> = pools.cross.choose_multiple(rng, n_cross).collect();
                for v in cross {
                    let w = self.window(v, rng);
                    pull.push(w);
                }
                for _ in n_cross..self.shape.cross_pull {
                    let v = pools.selfs.choose(rng).expect("non-empty self pool");
                    let w = self.window(v, rng);
                    pull.push(w);
                }
                IdentityPlan {
                    identity: (*id).clone(),
                    pull,
                    push: Vec::new(),
                }
            })
            .collect();
        let pushes: Vec<Vec<WindowSpec>> = (0..plans.len())
            .map(|i| {
                plans
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .flat_map(|(_, other)| other.pull[..self.shape.push_per_other].iter().cloned())
                    .collect()
            })
            .collect();
        for (p, push) in plans.iter_mut().zip(pushes) {
            p.push = push;
        }
        BatchPlan {
            identities: plans,
            window_frames: self.window_frames,
            rng_token,
        }
    }
}

pub fn sample_batch<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    split: Split,
    clip_frames: usize,
    shape: BatchShape,
    rng: &mut R,
) -> Result<BatchPlan> {
    Ok(BatchSampler::new(manifest, split, clip_frames, shape)?.sample(rng, 0))
}

/// Featurizes every distinct window of `plan` once and lays out the loss groups.
pub fn realize_batch(plan: &BatchPlan, store: &FeatureStore) -> Result<LossBatch<f32>> {
    realize_batch_reusing(plan, store, Vec::new())
}

/// [`realize_batch`] writing the features into `buffer`'s allocation.
pub fn realize_batch_reusing(
    plan: &BatchPlan,
    store: &FeatureStore,
    mut buffer: Vec<f32>,
) -> Result<LossBatch<f32>> {
    let windows = plan.distinct_windows();
    if windows.is_empty() {
        return Err(Error::Validation("batch plan has no windows".into()));
    }
    let index: HashMap<(&str, usize), usize> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| ((w.video_id.as_str(), w.start_frame), i))
        .collect();
    let len = plan.window_frames;
    let specs: Vec<(&str, usize)> = windows
        .iter()
        .map(|w| (w.video_id.as_str(), w.start_frame))
        .collect();
    store.windows_into(&specs, len, &mut buffer)?;
    let data = buffer;
    let n = windows.len();
    let mut driving = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for w in &windows {
        let rec = store
            .record(&w.video_id)
            .ok_or_else(|| Error::Validation(format!("video `{}` not loaded", w.video_id)))?;
        driving.push(rec.driving_id.clone());
        target.push(rec.target_id.clone());
    }
    let lookup = |s: &WindowSpec| index[&(s.video_id.as_str(), s.start_frame)];
    let groups = plan
        .identities
        .iter()
        .map(|p| LossGroup {
            identity: p.identity.clone(),
            pull: dedup(p.pull.iter().map(lookup)),
            push: dedup(p.push.iter().map(lookup)),
        })
        .collect();
    Ok(LossBatch {
        input: Tensor::new(vec![FEATURE_DIM, n, len], data)?,
        layout: LossLayout {
            driving,
            target,
            groups,
        },
    })
}

/// Keeps first occurrences; a window drawn twice counts once.
fn dedup(it: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    it.filter(|i| seen.insert(*i)).collect()
}
