#![allow(dead_code)]

use std::path::Path;

use dynid::data::{DatasetManifest, IdentityId, Split};
use dynid::sampler::BatchShape;
use dynid::synth::{generate_dataset, SynthConfig};
use dynid::trainer::TrainConfig;

/// A short synthetic dataset written to `dir`.
pub fn small_dataset(dir: &Path, identities: usize, videos: usize, seed: u64) -> DatasetManifest {
    let config = SynthConfig {
        n_identities: identities,
        videos_per_identity: videos,
        frames_per_video: 120,
        cross_per_pair: 2,
        seed,
        ..SynthConfig::default()
    };
    generate_dataset(&config, dir).expect("synthetic dataset")
}

/// Relabels identities, drops reenactments that now cross splits, and rewrites
/// the manifest on disk.
pub fn assign_splits(manifest: &mut DatasetManifest, splits: &[(&str, Split)]) {
    for (id, split) in splits {
        manifest.split.insert(IdentityId::new(*id), *split);
    }
    let split = manifest.split.clone();
    manifest
        .videos
        .retain(|v| !v.is_synthetic() || split[&v.driving_id] == split[&v.target_id]);
    manifest.save().expect("manifest saved");
}

/// A tiny training setup that runs a step in well under a second.
pub fn tiny_train(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        lr: 1e-3,
        clip_frames: 31,
        width: 8,
        embedding_dim: 8,
        batch: BatchShape {
            identities: 2,
            self_pull: 2,
            cross_pull: 2,
            push_per_other: 2,
        },
        checkpoint_every: 5,
        val_every: 5,
        val_batches: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

/// Straight-line reference for the contrastive loss: for every anchor window,
/// sub-clip, and candidate window, the best sub-clip similarity is found by a
/// plain loop and the pull/push sums are accumulated directly.
pub fn reference_loss(emb: &[Vec<Vec<f64>>], groups: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let sim = |a: &[f64], b: &[f64]| -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d).exp()
    };
    let mut total = 0.0;
    for (pull, push) in groups {
        for &a in pull {
            for t in 0..emb[a].len() {
                let mut n = 0.0;
                for &w in pull {
                    if w == a {
                        continue;
                    }
                    let mut best = 0.0f64;
                    for sub in &emb[w] {
                        best = best.max(sim(&emb[a][t], sub));
                    }
                    n += best;
                }
                let mut q = 0.0;
                for &w in push {
                    let mut best = 0.0f64;
                    for sub in &emb[w] {
                        best = best.max(sim(&emb[a][t], sub));
                    }
                    q += best;
                }
                total += -(n / (n + q)).ln();
            }
        }
    }
    total
}
