//! Verification scoring: genuine and impostor distance pools per target
//! identity, ROC curves, AUC, and distance reports.
//!
//! For a target identity, genuine distances are taken between every pair of
//! distinct clips of its self-reenactments. Impostor distances pair each of
//! those clips with each clip of a cross-reenactment showing the target but
//! driven by someone else. A smaller distance means "same driver".

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{DatasetManifest, IdentityId, Split, VideoKind, VideoRecord};
use crate::engine::ParamStore;
use crate::error::{Error, Result};
use crate::features::{FeatureStore, NormalizeBy};
use crate::io_util::write_atomic;
use crate::network::{embed_sequence, ClipEmbedding, NetworkConfig};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePools {
    pub target_id: IdentityId,
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityRoc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub per_identity: BTreeMap<IdentityId, IdentityRoc>,
    pub mean_auc: f64,
    pub skipped: Vec<(IdentityId, String)>,
    pub clip_frames: usize,
    pub stride: usize,
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Pools from already-embedded clips of the target's self- and
/// cross-reenactments.
pub fn pools_from_clips(target: &IdentityId, selfs: &[&[f32]], cross: &[&[f32]]) -> ScorePools {
    let mut genuine = Vec::with_capacity(selfs.len() * selfs.len().saturating_sub(1) / 2);
    for (k, a) in selfs.iter().enumerate() {
        for b in &selfs[k + 1..] {
            genuine.push(euclidean(a, b));
        }
    }
    let mut impostor = Vec::with_capacity(selfs.len() * cross.len());
    for a in selfs {
        for b in cross {
            impostor.push(euclidean(a, b));
        }
    }
    ScorePools {
        target_id: target.clone(),
        genuine,
        impostor,
    }
}

/// ROC under "genuine iff distance <= threshold" and its area, where ties
/// between a genuine and an impostor distance count one half.
pub fn roc_auc(pools: &ScorePools) -> Result<IdentityRoc> {
    let (ng, ni) = (pools.genuine.len(), pools.impostor.len());
    if ng == 0 || ni == 0 {
        return Err(Error::InsufficientData {
            identity: pools.target_id.to_string(),
            category: "empty genuine or impostor pool".into(),
        });
    }
    if pools
        .genuine
        .iter()
        .chain(&pools.impostor)
        .any(|d| !d.is_finite() || *d < 0.0)
    {
        return Err(Error::NonFinite(format!("distances for {}", pools.target_id)));
    }
    let mut all: Vec<(f64, bool)> = pools
        .genuine
        .iter()
        .map(|d| (*d, true))
        .chain(pools.impostor.iter().map(|d| (*d, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut g_below, mut i_below) = (0u64, 0u64);
    // twice the Mann-Whitney count of (genuine < impostor) pairs, ties as 1
    let mut twice_u: u128 = 0;
    let mut k = 0;
    while k < all.len() {
        let v = all[k].0;
        let (mut g, mut i) = (0u64, 0u64);
        while k < all.len() && all[k].0 == v {
            if all[k].1 {
                g += 1;
            } else {
                i += 1;
            }
            k += 1;
        }
        twice_u += i as u128 * (2 * g_below + g) as u128;
        g_below += g;
        i_below += i;
        points.push(RocPoint {
            threshold: v,
            fpr: i_below as f64 / ni as f64,
            tpr: g_below as f64 / ng as f64,
        });
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    Ok(IdentityRoc {
        points,
        auc: twice_u as f64 / (2 * ng as u128 * ni as u128) as f64,
        n_genuine: ng,
        n_impostor: ni,
    })
}

/// Clip embeddings at offsets `0, stride, 2*stride, ...` of each video.
pub fn embed_videos(
    network: &NetworkConfig,
    params: &ParamStore,
    store: &FeatureStore,
    records: &[&VideoRecord],
    stride: usize,
) -> Result<BTreeMap<String, Vec<ClipEmbedding>>> {
    if stride == 0 {
        return Err(Error::Validation("stride must be positive".into()));
    }
    let f = network.clip_frames;
    let out: Vec<(String, Vec<ClipEmbedding>)> = records
        .par_iter()
        .map(|r| {
            let feats = store.video(&r.video_id)?;
            if feats.frames < f {
                return Ok((r.video_id.clone(), Vec::new()));
            }
            let all = embed_sequence(network, params, &feats)?;
            let clips = all
                .into_iter()
                .enumerate()
                .step_by(stride)
                .map(|(t, vector)| ClipEmbedding {
                    vector,
                    driving_id: r.driving_id.clone(),
                    target_id: r.target_id.clone(),
                    video_id: r.video_id.clone(),
                    t,
                })
                .collect();
            Ok((r.video_id.clone(), clips))
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().collect())
}

/// Self- and cross-reenactments whose driver and target are in `split`.
pub fn scoring_videos(manifest: &DatasetManifest, split: Split) -> Vec<&VideoRecord> {
    manifest
        .videos_in(split)
        .filter(|v| v.kind != VideoKind::Original)
        .collect()
}

fn pools_for(
    target: &IdentityId,
    records: &[&VideoRecord],
    clips: &BTreeMap<String, Vec<ClipEmbedding>>,
) -> Result<ScorePools> {
    let of_kind = |kind: VideoKind| -> Vec<&VideoRecord> {
        records
            .iter()
            .copied()
            .filter(|v| v.kind == kind && v.target_id == *target)
            .filter(|v| kind != VideoKind::CrossReenactment || v.driving_id != *target)
            .collect()
    };
    let selfs = of_kind(VideoKind::SelfReenactment);
    let cross = of_kind(VideoKind::CrossReenactment);
    if selfs.len() < 2 || cross.is_empty() {
        return Err(Error::InsufficientData {
            identity: target.to_string(),
            category: format!(
                "{} self-reenactments (need 2) and {} cross-reenactments as target (need 1)",
                selfs.len(),
                cross.len()
            ),
        });
    }
    let vectors = |vs: &[&VideoRecord]| -> Vec<Vec<f32>> {
        vs.iter()
            .flat_map(|v| clips.get(&v.video_id).into_iter().flatten())
            .map(|c| c.vector.clone())
            .collect()
    };
    let (s, c) = (vectors(&selfs), vectors(&cross));
    let s: Vec<&[f32]> = s.iter().map(|v| v.as_slice()).collect();
    let c: Vec<&[f32]> = c.iter().map(|v| v.as_slice()).collect();
    Ok(pools_from_clips(target, &s, &c))
}

/// Pools for one target identity of `split`, embedding only the videos needed.
pub fn build_pools(
    manifest: &DatasetManifest,
    network: &NetworkConfig,
    params: &ParamStore,
    target: &IdentityId,
    split: Split,
    stride: usize,
    by: NormalizeBy,
) -> Result<ScorePools> {
    let records: Vec<&VideoRecord> = scoring_videos(manifest, split)
        .into_iter()
        .filter(|v| v.target_id == *target)
        .collect();
    let store = FeatureStore::load_records(manifest, &records, by)?;
    let clips = embed_videos(network, params, &store, &records, stride)?;
    pools_for(target, &records, &clips)
}

/// One ROC per scoreable identity of `split` and the mean AUC.
pub fn evaluate(
    manifest: &DatasetManifest,
    network: &NetworkConfig,
    params: &ParamStore,
    split: Split,
    stride: usize,
    by: NormalizeBy,
) -> Result<RocReport> {
    let ids = manifest.identities_in(split);
    if ids.is_empty() {
        return Err(Error::EmptySplit {
            split: split.to_string(),
        });
    }
    let records = scoring_videos(manifest, split);
    let store = FeatureStore::load_records(manifest, &records, by)?;
    let clips = embed_videos(network, params, &store, &records, stride)?;
    report_from_clips(&ids, &records, &clips, network.clip_frames, stride)
}

pub fn report_from_clips(
    ids: &[IdentityId],
    records: &[&VideoRecord],
    clips: &BTreeMap<String, Vec<ClipEmbedding>>,
    clip_frames: usize,
    stride: usize,
) -> Result<RocReport> {
    let results: Vec<(IdentityId, Result<IdentityRoc>)> = ids
        .par_iter()
        .map(|id| (id.clone(), pools_for(id, records, clips).and_then(|p| roc_auc(&p))))
        .collect();
    let mut per_identity = BTreeMap::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(roc) => {
                per_identity.insert(id, roc);
            }
            Err(e @ Error::InsufficientData { .. }) => skipped.push((id, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if per_identity.is_empty() {
        return Err(Error::NoScoreableIdentity);
    }
    let mean_auc = per_identity.values().map(|r| r.auc).sum::<f64>() / per_identity.len() as f64;
    Ok(RocReport {
        per_identity,
        mean_auc,
        skipped,
        clip_frames,
        stride,
    })
}

fn csv_number(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

/// Writes `roc_<identity>.csv`, `summary.csv` and `report.json` into `dir`.
pub fn write_report(report: &RocReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (id, roc) in &report.per_identity {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &roc.points {
            writeln!(s, "{},{},{}", csv_number(p.threshold), p.fpr, p.tpr).unwrap();
        }
        let path = dir.join(format!("roc_{id}.csv"));
        write_atomic(&path, s.as_bytes())?;
        written.push(path);
    }
    let mut s = String::from("identity,auc,n_genuine,n_impostor\n");
    for (id, roc) in &report.per_identity {
        writeln!(s, "{id},{},{},{}", roc.auc, roc.n_genuine, roc.n_impostor).unwrap();
    }
    writeln!(s, "mean_auc,{},,", report.mean_auc).unwrap();
    let path = dir.join(SUMMARY_FILE);
    write_atomic(&path, s.as_bytes())?;
    written.push(path);

    let path = dir.join(REPORT_FILE);
    write_atomic(&path, report_json(report).as_bytes())?;
    written.push(path);
    Ok(written)
}

/// JSON has no infinities, so the sentinel thresholds are written as null.
fn report_json(report: &RocReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn read_report(path: &Path) -> Result<RocReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    // restore the sentinel thresholds written as null
    if let Some(ids) = value.get_mut("per_identity").and_then(|v| v.as_object_mut()) {
        for roc in ids.values_mut() {
            if let Some(points) = roc.get_mut("points").and_then(|v| v.as_array_mut()) {
                let n = points.len();
                for (k, p) in points.iter_mut().enumerate() {
                    if p["threshold"].is_null() {
                        p["threshold"] = if k + 1 == n { 1e308.into() } else { (-1e308).into() };
                    }
                }
            }
        }
    }
    let mut report: RocReport = serde_json::from_value(value)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    for roc in report.per_identity.values_mut() {
        if let Some(first) = roc.points.first_mut() {
            first.threshold = f64::NEG_INFINITY;
        }
        if let Some(last) = roc.points.last_mut() {
            last.threshold = f64::INFINITY;
        }
    }
    Ok(report)
}

/// Highest TPR reached at false-positive rate `x`, interpolating linearly
/// between consecutive operating points.
fn tpr_at(points: &[RocPoint], x: f64) -> f64 {
    let mut best: f64 = 0.0;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x < a.fpr || x > b.fpr {
            continue;
        }
        let y = if b.fpr > a.fpr {
            a.tpr + (b.tpr - a.tpr) * (x - a.fpr) / (b.fpr - a.fpr)
        } else {
            b.tpr
        };
        best = best.max(y);
    }
    best
}

/// The per-identity ROCs averaged vertically on a 101-point FPR grid.
pub fn mean_roc(report: &RocReport) -> Vec<(f64, f64)> {
    (0..=100)
        .map(|k| {
            let x = k as f64 / 100.0;
            let y = report
                .per_identity
                .values()
                .map(|r| tpr_at(&r.points, x))
                .sum::<f64>()
                / report.per_identity.len().max(1) as f64;
            (x, y)
        })
        .collect()
}

/// Mean ROC curve with the chance diagonal, as a standalone SVG document.
pub fn render_roc_svg(report: &RocReport) -> String {
    let (size, pad) = (400.0, 50.0);
    let px = |x: f64| pad + x * size;
    let py = |y: f64| pad + (1.0 - y) * size;
    let curve: Vec<String> = mean_roc(report)
        .iter()
        .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
        .collect();
    let mut s = String::new();
    let total = size + 2.0 * pad;
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{total}" height="{total}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for k in 1..5 {
        let v = k as f64 / 5.0;
        writeln!(
            s,
            r##"<line x1="{x}" y1="{y0}" x2="{x}" y2="{y1}" stroke="#ddd"/><line x1="{y0}" y1="{yy}" x2="{y1}" y2="{yy}" stroke="#ddd"/>"##,
            x = px(v),
            yy = py(v),
            y0 = pad,
            y1 = pad + size
        )
        .unwrap();
    }
    writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    )
    .unwrap();
    writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##,
        curve.join(" ")
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle">False positive rate</text>"#,
        pad + size / 2.0,
        total - 15.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="15" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle" transform="rotate(-90 15 {})">True positive rate</text>"#,
        pad + size / 2.0,
        pad + size / 2.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="14" text-anchor="end">mean AUC = {:.3} ({} identities)</text>"#,
        pad + size - 10.0,
        pad + size - 10.0,
        report.mean_auc,
        report.per_identity.len()
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeDistance {
    pub video_id: String,
    pub driving_id: IdentityId,
    pub target_id: IdentityId,
    pub mean_distance: f64,
    pub clips: usize,
}

/// Mean distance from each probe video's clips to every clip of the
/// reference identity's self-reenactments that are not probes.
pub fn reference_distance_report(
    manifest: &DatasetManifest,
    network: &NetworkConfig,
    params: &ParamStore,
    reference: &IdentityId,
    probes: &[String],
    stride: usize,
    by: NormalizeBy,
) -> Result<Vec<ProbeDistance>> {
    let held_out: Vec<&VideoRecord> = manifest
        .videos
        .iter()
        .filter(|v| {
            v.kind == VideoKind::SelfReenactment
                && v.driving_id == *reference
                && !probes.contains(&v.video_id)
        })
        .collect();
    if held_out.is_empty() {
        return Err(Error::InsufficientData {
            identity: reference.to_string(),
            category: "self-reenactments outside the probe set".into(),
        });
    }
    let probe_records: Vec<&VideoRecord> = probes
        .iter()
        .map(|p| {
            manifest
                .video(p)
                .ok_or_else(|| Error::Validation(format!("unknown probe video `{p}`")))
        })
        .collect::<Result<_>>()?;
    let all: Vec<&VideoRecord> = held_out.iter().chain(&probe_records).copied().collect();
    let store = FeatureStore::load_records(manifest, &all, by)?;
    let clips = embed_videos(network, params, &store, &all, stride)?;
    let reference_clips: Vec<&[f32]> = held_out
        .iter()
        .flat_map(|v| &clips[&v.video_id])
        .map(|c| c.vector.as_slice())
        .collect();
    if reference_clips.is_empty() {
        return Err(Error::InsufficientData {
            identity: reference.to_string(),
            category: "reference videos shorter than one clip".into(),
        });
    }
    probe_records
        .iter()
        .map(|r| {
            let pc = &clips[&r.video_id];
            if pc.is_empty() {
                return Err(Error::TooShort {
                    frames: r.frame_count,
                    needed: network.clip_frames,
                });
            }
            let dists: Vec<f64> = pc
                .iter()
                .flat_map(|c| reference_clips.iter().map(move |rc| euclidean(&c.vector, rc)))
                .collect();
            Ok(ProbeDistance {
                video_id: r.video_id.clone(),
                driving_id: r.driving_id.clone(),
                target_id: r.target_id.clone(),
                mean_distance: dists.iter().sum::<f64>() / dists.len() as f64,
                clips: pc.len(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTest {
    /// Count of (x, y) pairs with x < y, ties counting one half.
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for "x is stochastically smaller than y".
    pub p_value: f64,
    pub n_x: usize,
    pub n_y: usize,
}

/// One-sided Mann-Whitney test under the tie-corrected normal approximation.
pub fn rank_test_less(x: &[f64], y: &[f64]) -> Result<RankTest> {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::Validation("rank test needs two non-empty samples".into()));
    }
    let mut all: Vec<(f64, bool)> = x
        .iter()
        .map(|v| (*v, true))
        .chain(y.iter().map(|v| (*v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = (n1 + n2) as f64;
    let (mut rank_sum_y, mut tie_term) = (0.0, 0.0);
    let mut k = 0;
    while k < all.len() {
        let mut j = k;
        while j < all.len() && all[j].0 == all[k].0 {
            j += 1;
        }
        let avg_rank = (k + 1 + j) as f64 / 2.0;
        let t = (j - k) as f64;
        tie_term += t * t * t - t;
        rank_sum_y += all[k..j].iter().filter(|e| !e.1).count() as f64 * avg_rank;
        k = j;
    }
    let (f1, f2) = (n1 as f64, n2 as f64);
    let u = rank_sum_y - f2 * (f2 + 1.0) / 2.0;
    let mean = f1 * f2 / 2.0;
    let var = f1 * f2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let z = if var > 0.0 { (u - mean) / var.sqrt() } else { 0.0 };
    let p_value = 1.0 - Normal::new(0.0, 1.0).expect("unit normal").cdf(z);
    Ok(RankTest {
        u,
        z,
        p_value,
        n_x: n1,
        n_y: n2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceTest {
    pub same_driver: Vec<f64>,
    pub same_target: Vec<f64>,
    pub test: RankTest,
}

/// Compares same-driver/different-target clip distances against
/// different-driver/same-target ones, subsampling each group to at most
/// `max_pairs` pairs with a seeded generator.
pub fn appearance_test(
    clips: &BTreeMap<String, Vec<ClipEmbedding>>,
    max_pairs: usize,
    seed: u64,
) -> Result<AppearanceTest> {
    let flat: Vec<&ClipEmbedding> = clips.values().flatten().collect();
    let mut same_driver = Vec::new();
    let mut same_target = Vec::new();
    for (i, a) in flat.iter().enumerate() {
        for b in &flat[i + 1..] {
            if a.driving_id == b.driving_id && a.target_id != b.target_id {
                same_driver.push((i, *b));
            } else if a.driving_id != b.driving_id && a.target_id == b.target_id {
                same_target.push((i, *b));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut distances = |pairs: Vec<(usize, &ClipEmbedding)>| -> Vec<f64> {
        let pick: Vec<usize> = if pairs.len() > max_pairs {
            let mut idx = sample(&mut rng, pairs.len(), max_pairs).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..pairs.len()).collect()
        };
        pick.iter()
            .map(|&k| euclidean(&flat[pairs[k].0].vector, &pairs[k].1.vector))
            .collect()
    };
    let same_driver = distances(same_driver);
    let same_target = distances(same_target);
    let test = rank_test_less(&same_driver, &same_target)?;
    Ok(AppearanceTest {
        same_driver,
        same_target,
        test,
    })
}
