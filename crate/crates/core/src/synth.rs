//! Procedural landmark datasets with known driving and target identities.
//!
//! Every identity has a face shape (a perturbed 126-point template) and a
//! motion signature. Motion is a sum of six displacement fields (brow raise,
//! blink, smile, jaw open, nod, shake) switched on by Poisson events with
//! raised-cosine envelopes, plus continuous head motion built from a few
//! sinusoids whose weights are identity-specific. Reenactment transfers a
//! driver's displacement series onto a target's face.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    write_landmarks, DatasetManifest, IdentityId, LandmarkFrame, NeutralRef, Split, VideoKind,
    VideoRecord, NUM_LANDMARKS,
};
use crate::error::{Error, Result};
use crate::features::neutral_scale;

pub const NUM_PRIMITIVES: usize = 6;
pub const HEAD_FREQS_HZ: [f64; 4] = [0.4, 0.9, 1.6, 2.5];
/// Peak head displacement in template pixels for a unit spectral weight.
const HEAD_PX: f64 = 1.5;
const IMAGE_CENTER: [f64; 2] = [320.0, 240.0];

// Landmark index ranges of the canonical template.
const JAW: std::ops::Range<usize> = 0..33;
const BROW_L: std::ops::Range<usize> = 33..42;
const BROW_R: std::ops::Range<usize> = 42..51;
const NOSE: std::ops::Range<usize> = 51..66;
const EYE_L: std::ops::Range<usize> = 66..82;
const EYE_R: std::ops::Range<usize> = 82..98;
const MOUTH_OUT: std::ops::Range<usize> = 98..114;
const MOUTH_IN: std::ops::Range<usize> = 114..126;

const EYE_CENTER_Y: f64 = -22.0;
const MOUTH_CENTER_Y: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Primitive {
    BrowRaise,
    Blink,
    Smile,
    JawOpen,
    Nod,
    Shake,
}

impl Primitive {
    pub const ALL: [Primitive; NUM_PRIMITIVES] = [
        Primitive::BrowRaise,
        Primitive::Blink,
        Primitive::Smile,
        Primitive::JawOpen,
        Primitive::Nod,
        Primitive::Shake,
    ];

    /// Whether an event may move in either direction.
    fn signed(self) -> bool {
        matches!(self, Primitive::Nod | Primitive::Shake)
    }
}

/// The 126-point neutral face, centered on the origin, in pixels.
pub fn canonical_template() -> Vec<[f64; 2]> {
    let mut p = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..JAW.len() {
        let th = PI * i as f64 / (JAW.len() - 1) as f64;
        p.push([-80.0 * th.cos(), 10.0 + 90.0 * th.sin()]);
    }
    for side in [-1.0, 1.0] {
        for i in 0..BROW_L.len() {
            let u = i as f64 / (BROW_L.len() - 1) as f64;
            let x = if side < 0.0 { -65.0 + 50.0 * u } else { 15.0 + 50.0 * u };
            p.push([x, -45.0 - 8.0 * (PI * u).sin()]);
        }
    }
    for i in 0..6 {
        p.push([0.0, -30.0 + 9.0 * i as f64]);
    }
    for i in 0..9 {
        let x = -16.0 + 4.0 * i as f64;
        p.push([x, 22.0 + 3.0 * (1.0 - (x / 16.0).powi(2))]);
    }
    for cx in [-38.0, 38.0] {
        for i in 0..EYE_L.len() {
            let th = 2.0 * PI * i as f64 / EYE_L.len() as f64;
            p.push([cx + 16.0 * th.cos(), EYE_CENTER_Y + 7.0 * th.sin()]);
        }
    }
    for i in 0..MOUTH_OUT.len() {
        let th = 2.0 * PI * i as f64 / MOUTH_OUT.len() as f64;
        p.push([30.0 * th.cos(), MOUTH_CENTER_Y + 12.0 * th.sin()]);
    }
    for i in 0..MOUTH_IN.len() {
        let th = 2.0 * PI * i as f64 / MOUTH_IN.len() as f64;
        p.push([20.0 * th.cos(), MOUTH_CENTER_Y + 5.0 * th.sin()]);
    }
    debug_assert_eq!(p.len(), NUM_LANDMARKS);
    p
}

/// Neutral scale of the canonical template.
fn template_scale() -> f64 {
    let t = canonical_template();
    let (w, h) = extent(&t);
    (w * h).sqrt()
}

fn extent(points: &[[f64; 2]]) -> (f64, f64) {
    let fold = |k: usize| {
        points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[k]), hi.max(p[k])))
    };
    let ((x0, x1), (y0, y1)) = (fold(0), fold(1));
    (x1 - x0, y1 - y0)
}

/// Unit displacement field of a primitive over the template, in pixels.
pub fn primitive_field(p: Primitive) -> Vec<[f64; 2]> {
    let t = canonical_template();
    let mut f = vec![[0.0; 2]; NUM_LANDMARKS];
    match p {
        Primitive::BrowRaise => {
            for i in BROW_L.chain(BROW_R) {
                f[i] = [0.0, -6.0];
            }
            for i in EYE_L.chain(EYE_R) {
                if t[i][1] < EYE_CENTER_Y {
                    f[i] = [0.0, -1.5];
                }
            }
        }
        Primitive::Blink => {
            for (range, cx) in [(EYE_L, -38.0), (EYE_R, 38.0)] {
                for i in range {
                    let bulge = 1.0 - ((t[i][0] - cx) / 16.0).powi(2);
                    let dy = if t[i][1] < EYE_CENTER_Y { 5.0 } else { -1.5 };
                    f[i] = [0.0, dy * bulge.max(0.0)];
                }
            }
        }
        Primitive::Smile => {
            for (i, half) in MOUTH_OUT.map(|i| (i, 30.0)).chain(MOUTH_IN.map(|i| (i, 20.0))) {
                let u = t[i][0] / half;
                f[i] = [7.0 * u, -5.0 * u * u];
            }
        }
        Primitive::JawOpen => {
            for i in JAW {
                let w = ((t[i][1] - 10.0) / 90.0).clamp(0.0, 1.0);
                f[i] = [0.0, 12.0 * w * w];
            }
            for i in MOUTH_OUT.chain(MOUTH_IN) {
                if t[i][1] > MOUTH_CENTER_Y {
                    f[i] = [0.0, 10.0];
                } else if t[i][1] < MOUTH_CENTER_Y {
                    f[i] = [0.0, -1.0];
                }
            }
        }
        Primitive::Nod => {
            for (i, q) in t.iter().enumerate() {
                f[i] = [0.0, -8.0 * q[1] / 100.0];
            }
            for i in NOSE {
                f[i][1] += 2.0;
            }
        }
        Primitive::Shake => {
            for (i, q) in t.iter().enumerate() {
                f[i] = [8.0 * (1.0 - (q[0] / 80.0).powi(2)).max(0.0), 0.0];
            }
            for i in NOSE {
                f[i][0] += 3.0;
            }
        }
    }
    f
}

/// Weight of a landmark under a left/right asymmetry coefficient.
fn side_weight(x: f64, asymmetry: f64) -> f64 {
    if x < -1e-9 {
        1.0 + asymmetry
    } else if x > 1e-9 {
        1.0 - asymmetry
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveParams {
    /// Events per second.
    pub rate: f64,
    /// Multiplier on the primitive's unit field.
    pub amplitude: f64,
    /// Seconds.
    pub duration_mean: f64,
    pub duration_std: f64,
    /// In `[-1, 1]`; positive favours the left half of the face.
    pub asymmetry: f64,
}

impl PrimitiveParams {
    pub const ZERO: PrimitiveParams = PrimitiveParams {
        rate: 0.0,
        amplitude: 0.0,
        duration_mean: 0.3,
        duration_std: 0.0,
        asymmetry: 0.0,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSignature {
    pub primitives: [PrimitiveParams; NUM_PRIMITIVES],
    pub head_nod: [f64; 4],
    pub head_shake: [f64; 4],
}

impl MotionSignature {
    pub fn still() -> Self {
        MotionSignature {
            primitives: [PrimitiveParams::ZERO; NUM_PRIMITIVES],
            head_nod: [0.0; 4],
            head_shake: [0.0; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            if !(p.rate >= 0.0 && p.amplitude >= 0.0 && p.duration_mean > 0.0 && p.duration_std >= 0.0)
                || !(-1.0..=1.0).contains(&p.asymmetry)
            {
                return Err(Error::Validation(format!("invalid primitive parameters {p:?}")));
            }
        }
        if self.head_nod.iter().chain(&self.head_shake).any(|w| !(*w >= 0.0)) {
            return Err(Error::Validation("head weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Parameters rescaled to `[0, 1]` by their sampling ranges.
    pub fn normalized(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(NUM_PRIMITIVES * 5 + 8);
        for p in &self.primitives {
            v.push((p.rate - RATE.0) / (RATE.1 - RATE.0));
            v.push((p.amplitude - AMP.0) / (AMP.1 - AMP.0));
            v.push((p.duration_mean - DUR.0) / (DUR.1 - DUR.0));
            v.push((p.duration_std / p.duration_mean - DUR_CV.0) / (DUR_CV.1 - DUR_CV.0));
            v.push((p.asymmetry - ASYM.0) / (ASYM.1 - ASYM.0));
        }
        v.extend(self.head_nod.iter().chain(&self.head_shake));
        v
    }

    /// Number of normalized parameters differing by at least `margin`.
    pub fn params_apart(&self, other: &MotionSignature, margin: f64) -> usize {
        self.normalized()
            .iter()
            .zip(other.normalized())
            .filter(|(a, b)| (*a - b).abs() >= margin)
            .count()
    }
}

const RATE: (f64, f64) = (1.5, 4.0);
const AMP: (f64, f64) = (0.3, 2.0);
const DUR: (f64, f64) = (0.12, 0.5);
const DUR_CV: (f64, f64) = (0.05, 0.15);
const ASYM: (f64, f64) = (-0.9, 0.9);

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticIdentity {
    pub id: IdentityId,
    pub base_shape: Vec<[f64; 2]>,
    pub signature: MotionSignature,
}

impl SyntheticIdentity {
    pub fn neutral_frame(&self) -> LandmarkFrame {
        to_frame(&self.base_shape)
    }

    /// Neutral scale of the rest shape (as stored in float32).
    pub fn scale(&self) -> f64 {
        neutral_scale(&self.neutral_frame())
            .map(|s| s.value())
            .unwrap_or(0.0)
    }
}

fn to_frame(points: &[[f64; 2]]) -> LandmarkFrame {
    LandmarkFrame::new(points.iter().map(|p| [p[0] as f32, p[1] as f32]).collect())
        .expect("synthetic frames are finite and complete")
}

fn sample_signature<R: Rng + ?Sized>(rng: &mut R) -> MotionSignature {
    let mut primitives = [PrimitiveParams::ZERO; NUM_PRIMITIVES];
    for p in primitives.iter_mut() {
        let mean = rng.random_range(DUR.0..DUR.1);
        *p = PrimitiveParams {
            rate: rng.random_range(RATE.0..RATE.1),
            amplitude: rng.random_range(AMP.0..AMP.1),
            duration_mean: mean,
            duration_std: mean * rng.random_range(DUR_CV.0..DUR_CV.1),
            asymmetry: rng.random_range(ASYM.0..ASYM.1),
        };
    }
    let mut head = || -> [f64; 4] { std::array::from_fn(|_| rng.random_range(0.0..1.0)) };
    let head_nod = head();
    let head_shake = head();
    MotionSignature {
        primitives,
        head_nod,
        head_shake,
    }
}

fn sample_shape<R: Rng + ?Sized>(rng: &mut R) -> Vec<[f64; 2]> {
    let t = canonical_template();
    let scale = rng.random_range(0.85..1.2);
    let wx = rng.random_range(0.92..1.08);
    let hy = rng.random_range(0.94..1.06);
    let eye_shift = rng.random_range(-3.0..3.0);
    let mouth_w = rng.random_range(0.9..1.1);
    let brow_dy = rng.random_range(-3.0..3.0);
    let nose_len = rng.random_range(0.9..1.1);
    let jitter = Normal::new(0.0, 0.6).unwrap();
    let offset = [
        IMAGE_CENTER[0] + rng.random_range(-20.0..20.0),
        IMAGE_CENTER[1] + rng.random_range(-20.0..20.0),
    ];
    t.iter()
        .enumerate()
        .map(|(i, q)| {
            let (mut x, mut y) = (q[0], q[1]);
            if EYE_L.contains(&i) || BROW_L.contains(&i) {
                x -= eye_shift;
            } else if EYE_R.contains(&i) || BROW_R.contains(&i) {
                x += eye_shift;
            }
            if BROW_L.contains(&i) || BROW_R.contains(&i) {
                y += brow_dy;
            }
            if MOUTH_OUT.contains(&i) || MOUTH_IN.contains(&i) {
                x *= mouth_w;
            }
            if NOSE.contains(&i) {
                y = -30.0 + (y + 30.0) * nose_len;
            }
            x *= wx;
            y *= hy;
            [
                offset[0] + scale * x + jitter.sample(rng),
                offset[1] + scale * y + jitter.sample(rng),
            ]
        })
        .collect()
}

/// Draws one identity whose signature is at least `margin` apart from every
/// identity in `existing` on at least two normalized parameters.
pub fn generate_identity<R: Rng + ?Sized>(
    id: IdentityId,
    rng: &mut R,
    existing: &[SyntheticIdentity],
    margin: f64,
) -> Result<SyntheticIdentity> {
    const ATTEMPTS: usize = 1000;
    let base_shape = sample_shape(rng);
    for _ in 0..ATTEMPTS {
        let signature = sample_signature(rng);
        if existing
            .iter()
            .all(|o| o.signature.params_apart(&signature, margin) >= 2)
        {
            return Ok(SyntheticIdentity {
                id,
                base_shape,
                signature,
            });
        }
    }
    Err(Error::Margin { attempts: ATTEMPTS })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionEvent {
    pub primitive: Primitive,
    /// Seconds from the first frame; may be negative for events already underway.
    pub onset: f64,
    pub duration: f64,
    /// Signed per-event strength.
    pub gain: f64,
}

/// A displacement series in image pixels for one rendered performance.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub displacements: Vec<Vec<[f64; 2]>>,
    pub events: Vec<MotionEvent>,
    /// Neutral scale of the face the motion was rendered for.
    pub source_scale: f64,
    pub fps: f64,
}

fn raised_cosine(u: f64) -> f64 {
    if (0.0..=1.0).contains(&u) {
        0.5 * (1.0 - (2.0 * PI * u).cos())
    } else {
        0.0
    }
}

/// Renders the identity's motion for `frames` frames at `fps`.
pub fn render_motion<R: Rng + ?Sized>(
    identity: &SyntheticIdentity,
    frames: usize,
    fps: f64,
    rng: &mut R,
) -> MotionClip {
    let sig = &identity.signature;
    let lead_in = 2.0;
    let total = frames as f64 / fps;
    let mut events = Vec::new();
    for (k, prim) in Primitive::ALL.iter().enumerate() {
        let p = sig.primitives[k];
        if p.rate <= 0.0 {
            continue;
        }
        let gap = Exp::new(p.rate).unwrap();
        let dur = Normal::new(p.duration_mean, p.duration_std.max(1e-12)).unwrap();
        let mut t = -lead_in + gap.sample(rng);
        while t < total {
            let duration = dur.sample(rng).max(0.08);
            let mut gain = rng.random_range(0.85..1.15);
            if prim.signed() && rng.random_bool(0.5) {
                gain = -gain;
            }
            events.push(MotionEvent {
                primitive: *prim,
                onset: t,
                duration,
                gain,
            });
            t += gap.sample(rng);
        }
    }
    let phases: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let template = canonical_template();
    let size = identity.scale() / template_scale();
    let fields: Vec<Vec<[f64; 2]>> = Primitive::ALL
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let asym = sig.primitives[k].asymmetry;
            primitive_field(*p)
                .iter()
                .zip(&template)
                .map(|(f, q)| {
                    let w = side_weight(q[0], asym) * size;
                    [f[0] * w, f[1] * w]
                })
                .collect()
        })
        .collect();
    let nod = primitive_field(Primitive::Nod);
    let shake = primitive_field(Primitive::Shake);

    let mut displacements = Vec::with_capacity(frames);
    for f in 0..frames {
        let time = f as f64 / fps;
        let mut activation = [0.0; NUM_PRIMITIVES];
        for e in &events {
            let k = e.primitive as usize;
            activation[k] += e.gain * raised_cosine((time - e.onset) / e.duration);
        }
        let head = |w: &[f64; 4], ph: &[f64]| -> f64 {
            w.iter()
                .zip(HEAD_FREQS_HZ)
                .zip(ph)
                .map(|((w, hz), phi)| w * (2.0 * PI * hz * time + phi).sin())
                .sum::<f64>()
                * HEAD_PX
                / 8.0
        };
        let (h_nod, h_shake) = (head(&sig.head_nod, &phases[..4]), head(&sig.head_shake, &phases[4..]));
        let mut d = vec![[0.0; 2]; NUM_LANDMARKS];
        for k in 0..NUM_PRIMITIVES {
            let a = sig.primitives[k].amplitude * activation[k];
            if a == 0.0 {
                continue;
            }
            for (o, fv) in d.iter_mut().zip(&fields[k]) {
                o[0] += a * fv[0];
                o[1] += a * fv[1];
            }
        }
        if h_nod != 0.0 || h_shake != 0.0 {
            for l in 0..NUM_LANDMARKS {
                d[l][0] += size * (h_nod * nod[l][0] + h_shake * shake[l][0]);
                d[l][1] += size * (h_nod * nod[l][1] + h_shake * shake[l][1]);
            }
        }
        displacements.push(d);
    }
    MotionClip {
        displacements,
        events,
        source_scale: identity.scale(),
        fps,
    }
}

/// Animates `target`'s face with `motion`, scaled by the ratio of neutral
/// scales, plus isotropic Gaussian degradation noise of `sigma` pixels.
pub fn reenact<R: Rng + ?Sized>(
    motion: &MotionClip,
    target: &SyntheticIdentity,
    sigma: f64,
    rng: &mut R,
) -> Vec<LandmarkFrame> {
    reenact_points(motion, target, sigma, rng)
        .iter()
        .map(|f| to_frame(f))
        .collect()
}

fn reenact_points<R: Rng + ?Sized>(
    motion: &MotionClip,
    target: &SyntheticIdentity,
    sigma: f64,
    rng: &mut R,
) -> Vec<Vec<[f64; 2]>> {
    let ratio = target.scale() / motion.source_scale;
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).unwrap());
    motion
        .displacements
        .iter()
        .map(|d| {
            target
                .base_shape
                .iter()
                .zip(d)
                .map(|(b, dv)| {
                    let mut p = [b[0] + ratio * dv[0], b[1] + ratio * dv[1]];
                    if let Some(n) = &noise {
                        p[0] += n.sample(rng);
                        p[1] += n.sample(rng);
                    }
                    p
                })
                .collect()
        })
        .collect()
}

/// Adds per-coordinate Gaussian noise of `sigma` pixels.
fn jitter<R: Rng + ?Sized>(frames: Vec<LandmarkFrame>, sigma: f64, rng: &mut R) -> Vec<LandmarkFrame> {
    if sigma <= 0.0 {
        return frames;
    }
    let n = Normal::new(0.0, sigma).unwrap();
    frames
        .into_iter()
        .map(|f| {
            LandmarkFrame::new(
                f.points()
                    .iter()
                    .map(|p| [(p[0] as f64 + n.sample(rng)) as f32, (p[1] as f64 + n.sample(rng)) as f32])
                    .collect(),
            )
            .expect("finite")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_identities: usize,
    /// Index of the first identity drawn from the seed's identity stream, so
    /// that disjoint ranges of one stream can be generated separately.
    pub first_identity: usize,
    pub videos_per_identity: usize,
    pub frames_per_video: usize,
    pub fps: f64,
    pub landmark_noise: f64,
    pub degradation: f64,
    pub cross_per_pair: usize,
    /// Seed of the identity stream (shapes and signatures).
    pub seed: u64,
    /// Seed of the per-video streams; defaults to `seed`.
    pub video_seed: Option<u64>,
    pub split: Split,
    pub margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_identities: 8,
            first_identity: 0,
            videos_per_identity: 8,
            frames_per_video: 240,
            fps: 30.0,
            landmark_noise: 0.3,
            degradation: 0.5,
            cross_per_pair: 8,
            seed: 0,
            video_seed: None,
            split: Split::Train,
            margin: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, min_frames: usize) -> Result<()> {
        if self.n_identities == 0 || self.videos_per_identity == 0 {
            return Err(Error::Validation("need at least one identity and one video".into()));
        }
        if self.frames_per_video < min_frames {
            return Err(Error::Validation(format!(
                "frames_per_video {} below the {min_frames} frames a training window needs",
                self.frames_per_video
            )));
        }
        if !(self.fps > 0.0) || !(self.landmark_noise >= 0.0) || !(self.degradation >= 0.0) {
            return Err(Error::Validation("fps must be positive and noise non-negative".into()));
        }
        Ok(())
    }

    fn video_seed(&self) -> u64 {
        self.video_seed.unwrap_or(self.seed)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one generation task.
fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mixed = parts.iter().fold(splitmix(seed), |acc, p| splitmix(acc ^ splitmix(*p)));
    ChaCha8Rng::seed_from_u64(mixed)
}

fn identity_name(index: usize) -> IdentityId {
    IdentityId::new(format!("id{index:03}"))
}

/// Identities `first .. first + n` of the seed's identity stream.
pub fn generate_identities(config: &SynthConfig) -> Result<Vec<SyntheticIdentity>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut all: Vec<SyntheticIdentity> = Vec::new();
    for i in 0..config.first_identity + config.n_identities {
        let ident = generate_identity(identity_name(i), &mut rng, &all, config.margin)?;
        all.push(ident);
    }
    Ok(all.split_off(config.first_identity))
}

const TAG_ORIGINAL: u64 = 1;
const TAG_SELF: u64 = 2;
const TAG_CROSS: u64 = 3;
const TAG_PICK: u64 = 4;

struct Job {
    record: VideoRecord,
    source: (usize, usize),
    target: usize,
    tag: u64,
    salt: u64,
}

fn lmk_path(video_id: &str) -> PathBuf {
    PathBuf::from("landmarks").join(format!("{video_id}.lmk"))
}

fn plan_jobs(config: &SynthConfig, identities: &[SyntheticIdentity]) -> Vec<Job> {
    let n = identities.len();
    let vids = config.videos_per_identity;
    let mut jobs = Vec::new();
    let record = |video_id: String, d: usize, t: usize, kind| VideoRecord {
        landmark_path: lmk_path(&video_id),
        video_id,
        driving_id: identities[d].id.clone(),
        target_id: identities[t].id.clone(),
        kind,
        frame_count: config.frames_per_video,
        fps: config.fps,
    };
    for i in 0..n {
        for k in 0..vids {
            let id = &identities[i].id;
            jobs.push(Job {
                record: record(format!("orig_{id}_{k:02}"), i, i, VideoKind::Original),
                source: (i, k),
                target: i,
                tag: TAG_ORIGINAL,
                salt: 0,
            });
            jobs.push(Job {
                record: record(format!("self_{id}_{k:02}"), i, i, VideoKind::SelfReenactment),
                source: (i, k),
                target: i,
                tag: TAG_SELF,
                salt: 0,
            });
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let gi = (config.first_identity + i) as u64;
            let gj = (config.first_identity + j) as u64;
            let mut rng = stream(config.video_seed(), &[TAG_PICK, gi, gj]);
            let picks: Vec<usize> = if config.cross_per_pair <= vids {
                rand::seq::index::sample(&mut rng, vids, config.cross_per_pair).into_vec()
            } else {
                (0..config.cross_per_pair).map(|_| rng.random_range(0..vids)).collect()
            };
            for (m, k) in picks.into_iter().enumerate() {
                let (d, t) = (&identities[i].id, &identities[j].id);
                jobs.push(Job {
                    record: record(
                        format!("cross_{d}_{t}_{m:02}"),
                        i,
                        j,
                        VideoKind::CrossReenactment,
                    ),
                    source: (i, k),
                    target: j,
                    tag: TAG_CROSS,
                    salt: gj << 16 | m as u64,
                });
            }
        }
    }
    jobs
}

fn manifest_for(
    config: &SynthConfig,
    identities: &[SyntheticIdentity],
    jobs: &[Job],
    root: &Path,
) -> DatasetManifest {
    DatasetManifest {
        root: root.to_path_buf(),
        identities: identities.iter().map(|i| i.id.clone()).collect(),
        videos: jobs.iter().map(|j| j.record.clone()).collect(),
        neutral_refs: identities
            .iter()
            .map(|i| {
                (
                    i.id.clone(),
                    NeutralRef {
                        path: PathBuf::from("neutral").join(format!("{}.lmk", i.id)),
                        frame: 0,
                    },
                )
            })
            .collect(),
        neutral_registry: identities
            .iter()
            .map(|i| (i.id.clone(), i.neutral_frame()))
            .collect(),
        split: identities
            .iter()
            .map(|i| (i.id.clone(), config.split))
            .collect(),
    }
}

/// The manifest `generate_dataset` would write, without rendering anything.
pub fn plan_dataset(config: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    config.validate(1)?;
    let identities = generate_identities(config)?;
    let jobs = plan_jobs(config, &identities);
    let m = manifest_for(config, &identities, &jobs, root);
    m.validate()?;
    Ok(m)
}

/// Renders every video of the dataset into `out` and writes its manifest.
pub fn generate_dataset(config: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    config.validate(1)?;
    let identities = generate_identities(config)?;
    let jobs = plan_jobs(config, &identities);
    let manifest = manifest_for(config, &identities, &jobs, out);
    manifest.validate()?;

    for ident in &identities {
        write_landmarks(
            &out.join(&manifest.neutral_refs[&ident.id].path),
            &[ident.neutral_frame()],
        )?;
    }

    let vseed = config.video_seed();
    let first = config.first_identity as u64;
    let motions: Vec<Vec<MotionClip>> = identities
        .par_iter()
        .enumerate()
        .map(|(i, ident)| {
            (0..config.videos_per_identity)
                .map(|k| {
                    let mut rng = stream(vseed, &[TAG_ORIGINAL, first + i as u64, k as u64, 0]);
                    render_motion(ident, config.frames_per_video, config.fps, &mut rng)
                })
                .collect()
        })
        .collect();

    jobs.par_iter().try_for_each(|job| -> Result<()> {
        let (i, k) = job.source;
        let motion = &motions[i][k];
        let mut rng = stream(vseed, &[job.tag, first + i as u64, k as u64, job.salt]);
        let target = &identities[job.target];
        let frames = match job.record.kind {
            VideoKind::Original => reenact(motion, target, 0.0, &mut rng),
            _ => reenact(motion, target, config.degradation, &mut rng),
        };
        let frames = jitter(frames, config.landmark_noise, &mut rng);
        write_landmarks(&out.join(&job.record.landmark_path), &frames)
    })?;
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(seed: u64) -> SyntheticIdentity {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_identity(IdentityId::new("a"), &mut rng, &[], 0.2).unwrap()
    }

    #[test]
    fn template_is_complete_and_nondegenerate() {
        let t = canonical_template();
        assert_eq!(t.len(), NUM_LANDMARKS);
        let (w, h) = extent(&t);
        assert!(w > 100.0 && h > 100.0);
        let i = ident(1);
        let (w, h) = extent(&i.base_shape);
        assert!(w * h > 0.0);
    }

    #[test]
    fn identity_generation_is_deterministic() {
        assert_eq!(ident(5), ident(5));
        assert_ne!(ident(5).signature, ident(6).signature);
    }

    #[test]
    fn hundred_identities_all_apart() {
        let cfg = SynthConfig {
            n_identities: 100,
            seed: 3,
            ..Default::default()
        };
        let ids = generate_identities(&cfg).unwrap();
        for a in 0..ids.len() {
            ids[a].signature.validate().unwrap();
            for b in a + 1..ids.len() {
                assert!(ids[a].signature.params_apart(&ids[b].signature, cfg.margin) >= 2);
            }
        }
    }

    #[test]
    fn still_signature_renders_zero() {
        let mut i = ident(2);
        i.signature = MotionSignature::still();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = render_motion(&i, 50, 30.0, &mut rng);
        assert!(m.displacements.iter().flatten().all(|p| p[0] == 0.0 && p[1] == 0.0));
    }

    #[test]
    fn amplitude_is_linear() {
        let mut i = ident(4);
        i.signature = MotionSignature::still();
        i.signature.primitives[3] = PrimitiveParams {
            rate: 1.0,
            amplitude: 0.5,
            duration_mean: 0.4,
            duration_std: 0.05,
            asymmetry: 0.2,
        };
        let a = render_motion(&i, 200, 30.0, &mut ChaCha8Rng::seed_from_u64(9));
        i.signature.primitives[3].amplitude = 1.0;
        let b = render_motion(&i, 200, 30.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert!(a.displacements.iter().flatten().any(|p| p[1] != 0.0));
        for (pa, pb) in a.displacements.iter().flatten().zip(b.displacements.iter().flatten()) {
            assert!((2.0 * pa[0] - pb[0]).abs() < 1e-12 && (2.0 * pa[1] - pb[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn event_counts_match_rate() {
        let mut i = ident(7);
        i.signature.primitives[1].rate = 0.9;
        let (frames, fps) = (10_000, 30.0);
        let m = render_motion(&i, frames, fps, &mut ChaCha8Rng::seed_from_u64(11));
        let t = frames as f64 / fps;
        let count = m
            .events
            .iter()
            .filter(|e| e.primitive == Primitive::Blink && e.onset >= 0.0 && e.onset < t)
            .count() as f64;
        let lambda = 0.9 * t;
        assert!((count - lambda).abs() <= 3.0 * lambda.sqrt(), "{count} vs {lambda}");
    }

    #[test]
    fn self_reenactment_without_noise_is_exact() {
        let i = ident(8);
        let m = render_motion(&i, 20, 30.0, &mut ChaCha8Rng::seed_from_u64(1));
        let pts = reenact_points(&m, &i, 0.0, &mut ChaCha8Rng::seed_from_u64(2));
        for (f, d) in pts.iter().zip(&m.displacements) {
            for ((p, b), dv) in f.iter().zip(&i.base_shape).zip(d) {
                assert_eq!(*p, [b[0] + dv[0], b[1] + dv[1]]);
            }
        }
    }

    #[test]
    fn cross_reenactment_recovers_driver_motion() {
        let driver = ident(8);
        let mut target = ident(9);
        // equal neutral scales: reuse the driver's bounding box exactly
        target.base_shape = driver.base_shape.iter().map(|p| [p[0] + 3.0, p[1] - 2.0]).collect();
        let m = render_motion(&driver, 20, 30.0, &mut ChaCha8Rng::seed_from_u64(1));
        let pts = reenact_points(&m, &target, 0.0, &mut ChaCha8Rng::seed_from_u64(2));
        for (f, d) in pts.iter().zip(&m.displacements) {
            for ((p, b), dv) in f.iter().zip(&target.base_shape).zip(d) {
                assert!((p[0] - b[0] - dv[0]).abs() < 1e-9 && (p[1] - b[1] - dv[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degradation_noise_has_requested_std() {
        let i = ident(10);
        let m = render_motion(&i, 400, 30.0, &mut ChaCha8Rng::seed_from_u64(1));
        let clean = reenact_points(&m, &i, 0.0, &mut ChaCha8Rng::seed_from_u64(2));
        let noisy = reenact_points(&m, &i, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let res: Vec<f64> = clean
            .iter()
            .flatten()
            .zip(noisy.iter().flatten())
            .flat_map(|(a, b)| [b[0] - a[0], b[1] - a[1]])
            .collect();
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (res.len() - 1) as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.05);
    }

    #[test]
    fn full_scale_dry_run_counts() {
        let cfg = SynthConfig {
            n_identities: 161,
            ..Default::default()
        };
        let m = plan_dataset(&cfg, Path::new("/nonexistent")).unwrap();
        let count = |k| m.videos.iter().filter(|v| v.kind == k).count();
        assert_eq!(count(VideoKind::CrossReenactment), 206_080);
        assert_eq!(count(VideoKind::Original), 161 * 8);
        assert_eq!(count(VideoKind::SelfReenactment), 161 * 8);
    }

    #[test]
    fn disjoint_identity_ranges_share_the_stream() {
        let all = generate_identities(&SynthConfig {
            n_identities: 10,
            ..Default::default()
        })
        .unwrap();
        let tail = generate_identities(&SynthConfig {
            n_identities: 2,
            first_identity: 8,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(&all[8..], &tail[..]);
        assert_eq!(tail[0].id.as_str(), "id008");
    }
}
