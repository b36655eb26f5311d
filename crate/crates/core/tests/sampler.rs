mod common;

use std::collections::{BTreeMap, HashSet};

use dynid::data::{Split, VideoKind};
use dynid::features::{FeatureStore, NormalizeBy, FEATURE_DIM};
use dynid::sampler::{realize_batch, BatchSampler, BatchShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn dataset() -> (tempfile::TempDir, dynid::data::DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    let m = common::small_dataset(dir.path(), 8, 8, 11);
    (dir, m)
}

#[test]
fn default_batches_have_the_documented_composition() {
    let (dir, m) = dataset();
    let _keep = dir;
    let sampler = BatchSampler::new(&m, Split::Train, 31, BatchShape::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for step in 0..200 {
        let plan = sampler.sample(&mut rng, step);
        assert_eq!(plan.identities.len(), 8);
        let ids: HashSet<_> = plan.identities.iter().map(|p| p.identity.clone()).collect();
        assert_eq!(ids.len(), 8);
        for p in &plan.identities {
            assert_eq!(p.pull.len(), 16);
            assert_eq!(p.push.len(), 56);
            assert!(p.pull.iter().all(|w| w.driving_id == p.identity));
            assert!(p.push.iter().all(|w| w.driving_id != p.identity));
            let selfs = p.pull.iter().filter(|w| w.kind == VideoKind::SelfReenactment).count();
            let cross = p.pull.iter().filter(|w| w.kind == VideoKind::CrossReenactment).count();
            assert_eq!((selfs, cross), (8, 8));
            for w in p.pull.iter().chain(&p.push) {
                assert!(w.start_frame + plan.window_frames <= 120);
            }
        }
        assert_eq!(plan.distinct_windows().len(), 128);
    }
}

#[test]
fn same_seed_same_plan() {
    let (_dir, m) = dataset();
    let sampler = BatchSampler::new(&m, Split::Train, 51, BatchShape::default()).unwrap();
    let a = sampler.sample(&mut ChaCha8Rng::seed_from_u64(9), 4);
    let b = sampler.sample(&mut ChaCha8Rng::seed_from_u64(9), 4);
    let c = sampler.sample(&mut ChaCha8Rng::seed_from_u64(10), 4);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn window_starts_are_uniform() {
    let (_dir, m) = dataset();
    let sampler = BatchSampler::new(&m, Split::Train, 91, BatchShape::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // 120-frame videos, 95-frame windows: 26 possible starts
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    let mut total = 0.0;
    for step in 0..300 {
        for p in sampler.sample(&mut rng, step).identities {
            for w in p.pull {
                *counts.entry(w.start_frame).or_default() += 1.0;
                total += 1.0;
            }
        }
    }
    assert_eq!(counts.len(), 26);
    let expected = total / 26.0;
    let chi2: f64 = counts.values().map(|c| (c - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new(25.0).unwrap().inverse_cdf(0.999);
    assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
}

#[test]
fn too_few_identities_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::small_dataset(dir.path(), 3, 2, 1);
    let err = BatchSampler::new(&m, Split::Train, 31, BatchShape::default()).err().unwrap();
    assert!(matches!(err, dynid::Error::InsufficientData { .. }), "{err}");
}

#[test]
fn realized_batch_matches_plan() {
    let (_dir, m) = dataset();
    let shape = BatchShape {
        identities: 3,
        self_pull: 2,
        cross_pull: 2,
        push_per_other: 1,
    };
    let sampler = BatchSampler::new(&m, Split::Train, 31, shape).unwrap();
    let plan = sampler.sample(&mut ChaCha8Rng::seed_from_u64(5), 0);
    let store = FeatureStore::load(&m, Split::Train, NormalizeBy::Target).unwrap();
    let batch = realize_batch(&plan, &store).unwrap();
    let distinct = plan.distinct_windows();
    assert_eq!(batch.input.shape(), &[FEATURE_DIM, distinct.len(), 35]);
    batch.layout.validate().unwrap();
    for (g, p) in batch.layout.groups.iter().zip(&plan.identities) {
        assert_eq!(g.identity, p.identity);
        assert_eq!(g.pull.len(), 4);
        assert_eq!(g.push.len(), 2);
    }
    // column (window 0, frame 0) equals the stored window's first frame
    let w0 = distinct[0];
    let clip = store.window(&w0.video_id, w0.start_frame, 35).unwrap();
    let n = distinct.len();
    for f in (0..FEATURE_DIM).step_by(97) {
        assert_eq!(batch.input.data()[f * n * 35], clip.data[f * 35]);
    }
}
