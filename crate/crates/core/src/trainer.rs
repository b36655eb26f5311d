//! The optimization loop: sample, featurize, loss, backward, Adam.
//!
//! Step `i` (1-based) draws its batch from a ChaCha stream keyed by
//! `(seed, i)`, so a run resumed from a checkpoint at step `k` replays
//! exactly the batches the uninterrupted run would have seen.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Split, VideoKind, VideoRecord};
use crate::engine::{adam_step, read_checkpoint, write_checkpoint, AdamConfig, ParamStore};
use crate::error::{Error, Result};
use crate::features::{FeatureStore, NormalizeBy};
use crate::loss::batch_loss;
use crate::network::{build_network, NetworkConfig, SUPPORTED_CLIP_FRAMES};
use crate::sampler::{realize_batch, realize_batch_reusing, BatchSampler, BatchShape};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Stream reserved for validation batches; training steps use streams `1..`.
const VAL_STREAM_BASE: u64 = 1 << 62;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr: f64,
    pub clip_frames: usize,
    pub width: usize,
    pub embedding_dim: usize,
    pub batch: BatchShape,
    pub checkpoint_every: u64,
    pub val_every: u64,
    pub val_batches: usize,
    pub seed: u64,
    pub normalize_by: NormalizeBy,
    pub l2_normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 100_000,
            lr: 1e-4,
            clip_frames: 51,
            width: 256,
            embedding_dim: 128,
            batch: BatchShape::default(),
            checkpoint_every: 1000,
            val_every: 1000,
            val_batches: 4,
            seed: 0,
            normalize_by: NormalizeBy::Target,
            l2_normalize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_CLIP_FRAMES.contains(&self.clip_frames) {
            return Err(Error::Validation(format!(
                "clip_frames {} not in {SUPPORTED_CLIP_FRAMES:?}",
                self.clip_frames
            )));
        }
        if self.iterations == 0
            || self.checkpoint_every == 0
            || self.val_every == 0
            || self.val_batches == 0
            || self.width == 0
            || self.embedding_dim == 0
        {
            return Err(Error::Validation("training counts must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Validation(format!("invalid learning rate {}", self.lr)));
        }
        self.batch.validate()
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let mut net = NetworkConfig::for_clip_frames(self.clip_frames)?.with_width(self.width);
        net.embedding_dim = self.embedding_dim;
        net.l2_normalize = self.l2_normalize;
        net.validate()?;
        Ok(net)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// JSON metadata stored inside every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Optimizer steps completed.
    pub iteration: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub manifest_fingerprint: String,
    /// Stream index of the next training step.
    pub rng_token: u64,
    pub best_val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: u64,
    /// Mean loss per (anchor, sub-clip) term.
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub millis: u64,
    pub rng_token: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub log_path: PathBuf,
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub records: Vec<TrainLogRecord>,
}

pub fn load_model(path: &Path) -> Result<(CheckpointMeta, ParamStore)> {
    let (meta, store) = read_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta)
        .map_err(|e| Error::Parse(format!("{}: checkpoint metadata: {e}", path.display())))?;
    Ok((meta, store))
}

fn save_model(path: &Path, meta: &CheckpointMeta, store: &ParamStore) -> Result<()> {
    let json = serde_json::to_string(meta).expect("metadata serializes");
    write_checkpoint(path, &json, store)
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn training_videos(manifest: &DatasetManifest, split: Split) -> Vec<&VideoRecord> {
    manifest
        .videos_in(split)
        .filter(|v| v.kind != VideoKind::Original)
        .collect()
}

/// Trains from a fresh initialization for `config.iterations` steps.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let network = config.network()?;
    let params = build_network(&network, config.seed)?;
    let meta = CheckpointMeta {
        iteration: 0,
        network,
        train: config.clone(),
        manifest_fingerprint: manifest.fingerprint(),
        rng_token: 1,
        best_val_loss: None,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    fs::write(&log_path, b"").map_err(|e| Error::io(&log_path, e))?;
    run(manifest, config, meta, params, out, None)
}

/// Continues a checkpointed run until `config.iterations` total steps.
pub fn resume(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    out: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (mut meta, params) = load_model(checkpoint)?;
    let found = manifest.fingerprint();
    if meta.manifest_fingerprint != found {
        return Err(Error::ManifestMismatch {
            expected: meta.manifest_fingerprint,
            found,
        });
    }
    if config.network()? != meta.network {
        return Err(Error::Validation(
            "network configuration differs from the checkpoint's".into(),
        ));
    }
    if config.seed != meta.train.seed || config.lr != meta.train.lr || config.batch != meta.train.batch
    {
        warn!("resuming with a different seed, learning rate or batch shape; the run will not match an uninterrupted one");
    }
    if meta.iteration > config.iterations {
        return Err(Error::Validation(format!(
            "checkpoint is at iteration {}, beyond the requested {}",
            meta.iteration, config.iterations
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    // drop log records written after the checkpoint by the interrupted run
    let log_path = out.join(LOG_FILE);
    let kept: Vec<String> = fs::read_to_string(&log_path)
        .unwrap_or_default()
        .lines()
        .filter(|l| {
            serde_json::from_str::<TrainLogRecord>(l)
                .map(|r| r.iteration <= meta.iteration)
                .unwrap_or(false)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&log_path, kept.concat()).map_err(|e| Error::io(&log_path, e))?;
    meta.train = config.clone();
    let last = checkpoint.display().to_string();
    run(manifest, config, meta, params, out, Some(last))
}

struct Validator {
    sampler: BatchSampler,
    store: FeatureStore,
}

impl Validator {
    fn new(manifest: &DatasetManifest, config: &TrainConfig) -> Result<Option<Self>> {
        let n = manifest.identities_in(Split::Val).len();
        if n < 2 {
            return Ok(None);
        }
        let shape = BatchShape {
            identities: config.batch.identities.min(n),
            ..config.batch
        };
        let sampler = BatchSampler::new(manifest, Split::Val, config.clip_frames, shape)?;
        let store = FeatureStore::load_records(
            manifest,
            &training_videos(manifest, Split::Val),
            config.normalize_by,
        )?;
        Ok(Some(Validator { sampler, store }))
    }

    fn loss(&self, net: &NetworkConfig, params: &ParamStore, config: &TrainConfig) -> Result<f64> {
        let weights = params.cast::<f32>();
        let mut sum = 0.0;
        for b in 0..config.val_batches {
            let stream = VAL_STREAM_BASE + b as u64;
            let plan = self.sampler.sample(&mut step_rng(config.seed, stream), stream);
            let batch = realize_batch(&plan, &self.store)?;
            let (loss, _) = batch_loss(net, &weights, &batch)?;
            sum += loss.mean_per_anchor();
        }
        Ok(sum / config.val_batches as f64)
    }
}

/// Mean validation loss of `params` over the seed-derived validation batches.
pub fn validate_params(
    manifest: &DatasetManifest,
    network: &NetworkConfig,
    params: &ParamStore,
    config: &TrainConfig,
) -> Result<f64> {
    let v = Validator::new(manifest, config)?.ok_or_else(|| Error::InsufficientData {
        identity: "<val split>".into(),
        category: "at least 2 validation identities".into(),
    })?;
    v.loss(network, params, config)
}

pub fn validate(checkpoint: &Path, manifest: &DatasetManifest, config: &TrainConfig) -> Result<f64> {
    let (meta, params) = load_model(checkpoint)?;
    validate_params(manifest, &meta.network, &params, config)
}

fn run(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    mut meta: CheckpointMeta,
    mut params: ParamStore,
    out: &Path,
    mut last_checkpoint: Option<String>,
) -> Result<TrainOutcome> {
    let network = meta.network.clone();
    let sampler = BatchSampler::new(manifest, Split::Train, config.clip_frames, config.batch)?;
    let store = FeatureStore::load_records(
        manifest,
        &training_videos(manifest, Split::Train),
        config.normalize_by,
    )?;
    let validator = Validator::new(manifest, config)?;
    if validator.is_none() {
        info!("fewer than 2 validation identities; validation loss is not tracked");
    }
    let adam = config.adam();
    let log_path = out.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut records = Vec::new();
    let mut best_checkpoint = None;
    let non_finite = |iteration: u64, last: &Option<String>| Error::NonFiniteLoss {
        iteration,
        last_checkpoint: last.clone().unwrap_or_else(|| "none".into()),
    };

    let start = meta.iteration + 1;
    // one input buffer for the whole run; fresh allocations of this size are slow
    let mut buffer = Vec::new();
    for iteration in start..=config.iterations {
        let clock = Instant::now();
        let plan = sampler.sample(&mut step_rng(config.seed, iteration), iteration);
        let batch = realize_batch_reusing(&plan, &store, std::mem::take(&mut buffer))?;
        let (loss, grads) = match batch_loss(&network, &params.params, &batch) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(non_finite(iteration, &last_checkpoint)),
            Err(e) => return Err(e),
        };
        if grads.values().any(|g| !g.all_finite()) {
            return Err(non_finite(iteration, &last_checkpoint));
        }
        buffer = batch.input.into_data();
        adam_step(&mut params, &grads, &adam)?;
        meta.iteration = iteration;
        meta.rng_token = iteration + 1;

        let val_loss = match &validator {
            Some(v) if iteration % config.val_every == 0 || iteration == config.iterations => {
                Some(v.loss(&network, &params, config)?)
            }
            _ => None,
        };
        if let Some(vl) = val_loss {
            if meta.best_val_loss.is_none_or(|b| vl < b) {
                meta.best_val_loss = Some(vl);
                let path = out.join(BEST_CHECKPOINT);
                save_model(&path, &meta, &params)?;
                best_checkpoint = Some(path);
            }
        }
        let record = TrainLogRecord {
            iteration,
            loss: loss.mean_per_anchor(),
            val_loss,
            millis: clock.elapsed().as_millis() as u64,
            rng_token: plan.rng_token,
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if iteration % 50 == 0 || iteration == start {
            info!(
                "iteration {iteration}: loss {:.5}{} ({} ms)",
                record.loss,
                val_loss.map(|v| format!(", val {v:.5}")).unwrap_or_default(),
                record.millis
            );
        }
        records.push(record);

        if iteration % config.checkpoint_every == 0 {
            let path = out.join(format!("ckpt_{iteration:06}.ckpt"));
            save_model(&path, &meta, &params)?;
            last_checkpoint = Some(path.display().to_string());
        }
    }
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    save_model(&final_checkpoint, &meta, &params)?;
    if best_checkpoint.is_none() && out.join(BEST_CHECKPOINT).exists() {
        best_checkpoint = Some(out.join(BEST_CHECKPOINT));
    }
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        log_path,
        meta,
        params,
        records,
    })
}

/// Reads a training log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}
