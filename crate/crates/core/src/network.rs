//! Temporal embedding network: a kernel-1 input projection, a stack of
//! unpadded dilated kernel-3 convolutions whose receptive field is exactly the
//! clip length, and an affine head to the embedding.
//!
//! Inputs are channel-major `[input_dim, B, L]`; an input of length `L`
//! produces `L - F + 1` embeddings, one per F-frame sub-clip.

use std::collections::BTreeMap;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{IdentityId, VideoRecord};
use crate::engine::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{ClipFeature, FEATURE_DIM};

pub const SUPPORTED_CLIP_FRAMES: [usize; 4] = [31, 51, 71, 91];
pub const WINDOW_EXTRA: usize = 4;
pub const SUBCLIPS: usize = WINDOW_EXTRA + 1;

/// Per-layer dilations for the supported clip lengths. The first entry belongs
/// to the kernel-1 projection.
pub fn dilation_schedule(clip_frames: usize) -> Option<Vec<usize>> {
    let s: &[usize] = match clip_frames {
        31 => &[1, 1, 1, 1, 2, 2, 2, 2, 4],
        51 => &[1, 1, 1, 1, 2, 2, 2, 4, 4, 4, 4],
        71 => &[1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 4, 4, 4, 4, 4],
        91 => &[1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2, 4, 4, 4, 4, 4, 4, 4],
        _ => return None,
    };
    Some(s.to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub clip_frames: usize,
    pub input_dim: usize,
    pub width: usize,
    pub embedding_dim: usize,
    pub dilations: Vec<usize>,
    /// Unit-normalize embeddings before any distance is taken.
    #[serde(default)]
    pub l2_normalize: bool,
}

impl NetworkConfig {
    /// The reference configuration for a supported clip length.
    pub fn for_clip_frames(clip_frames: usize) -> Result<Self> {
        let dilations = dilation_schedule(clip_frames).ok_or_else(|| {
            Error::Validation(format!(
                "unsupported clip length {clip_frames}; expected one of {SUPPORTED_CLIP_FRAMES:?}"
            ))
        })?;
        Ok(NetworkConfig {
            clip_frames,
            input_dim: FEATURE_DIM,
            width: 256,
            embedding_dim: 128,
            dilations,
            l2_normalize: false,
        })
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        (0..self.dilations.len())
            .map(|i| if i == 0 { 1 } else { 3 })
            .collect()
    }

    pub fn receptive_field(&self) -> usize {
        1 + self
            .dilations
            .iter()
            .zip(self.kernel_sizes())
            .map(|(d, k)| (k - 1) * d)
            .sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.embedding_dim == 0 {
            return Err(Error::Validation("network dimensions must be positive".into()));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Validation("dilations must be positive and non-empty".into()));
        }
        let rf = self.receptive_field();
        if rf != self.clip_frames {
            return Err(Error::ReceptiveField {
                expected: self.clip_frames,
                actual: rf,
            });
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut c_in = self.input_dim;
        for (i, k) in self.kernel_sizes().into_iter().enumerate() {
            out.push((format!("conv{i:02}"), vec![self.width, c_in, k], c_in * k));
            c_in = self.width;
        }
        out.push(("head".into(), vec![self.embedding_dim, self.width, 1], self.width));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>() + s[0])
            .sum()
    }
}

/// Fan-in scaled uniform kernels and zero biases, deterministic in `seed`.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    for (name, shape, fan_in) in config.layer_shapes() {
        let gain = if name == "head" { 3.0 } else { 6.0 };
        let bound = (gain / fan_in as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let channels = shape[0];
        store.insert(format!("{name}.weight"), Tensor::new(shape, values)?);
        store.insert(format!("{name}.bias"), Tensor::zeros(&[channels]));
    }
    Ok(store)
}

pub struct Forward {
    pub output: Var,
    pub params: Vec<(String, Var)>,
}

/// Records the network on `tape`. With `trainable`, parameters receive gradients.
pub fn forward<T: Real>(
    config: &NetworkConfig,
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    input: Var,
    trainable: bool,
) -> Result<Forward> {
    let (c, _, len) = tape.value(input).as_cbl()?;
    if c != config.input_dim {
        return Err(Error::Shape(format!(
            "input has {c} channels, network expects {}",
            config.input_dim
        )));
    }
    if len < config.clip_frames {
        return Err(Error::Shape(format!(
            "input length {len} shorter than clip length {}",
            config.clip_frames
        )));
    }
    let mut vars = Vec::new();
    let mut fetch = |tape: &mut Tape<T>, name: String| -> Result<Var> {
        let t = params
            .get(&name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?
            .clone();
        let v = if trainable { tape.param(t) } else { tape.constant(t) };
        vars.push((name, v));
        Ok(v)
    };
    let mut h = input;
    for (i, d) in config.dilations.iter().enumerate() {
        let w = fetch(tape, format!("conv{i:02}.weight"))?;
        let b = fetch(tape, format!("conv{i:02}.bias"))?;
        h = tape.conv1d(h, w, *d)?;
        h = tape.add_bias(h, b)?;
        h = tape.relu(h)?;
    }
    let w = fetch(tape, "head.weight".into())?;
    let b = fetch(tape, "head.bias".into())?;
    h = tape.conv1d(h, w, 1)?;
    h = tape.add_bias(h, b)?;
    if config.l2_normalize {
        h = tape.normalize_columns(h)?;
    }
    Ok(Forward { output: h, params: vars })
}

/// Embeddings of every F-frame sub-clip of each sequence in a `[C, B, L]`
/// batch, returned as `[embedding_dim, B, L - F + 1]`.
pub fn embed_batch<T: Real>(
    config: &NetworkConfig,
    params: &BTreeMap<String, Tensor<T>>,
    input: Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let f = forward(config, &mut tape, params, x, false)?;
    Ok(tape.value(f.output).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipEmbedding {
    pub vector: Vec<f32>,
    pub driving_id: IdentityId,
    pub target_id: IdentityId,
    pub video_id: String,
    pub t: usize,
}

fn clip_tensor(config: &NetworkConfig, clip: &ClipFeature) -> Result<Tensor<f32>> {
    if config.input_dim != FEATURE_DIM {
        return Err(Error::Shape(format!(
            "network input dim {} does not match feature dim {FEATURE_DIM}",
            config.input_dim
        )));
    }
    Tensor::new(vec![FEATURE_DIM, clip.frames], clip.data.clone())
}

fn columns(out: &Tensor<f32>) -> Vec<Vec<f32>> {
    let (e, l) = (out.shape()[0], out.shape()[out.shape().len() - 1]);
    (0..l)
        .map(|t| (0..e).map(|c| out.data()[c * l + t]).collect())
        .collect()
}

/// All per-offset embeddings of one sequence of any length `>= F`.
pub fn embed_sequence(
    config: &NetworkConfig,
    params: &ParamStore,
    clip: &ClipFeature,
) -> Result<Vec<Vec<f32>>> {
    let out = embed_batch(config, &params.params, clip_tensor(config, clip)?)?;
    Ok(columns(&out))
}

pub fn embed(
    config: &NetworkConfig,
    params: &ParamStore,
    clip: &ClipFeature,
    record: &VideoRecord,
) -> Result<ClipEmbedding> {
    if clip.frames != config.clip_frames {
        return Err(Error::Shape(format!(
            "clip has {} frames, network takes exactly {}",
            clip.frames, config.clip_frames
        )));
    }
    let vector = embed_sequence(config, params, clip)?.remove(0);
    Ok(ClipEmbedding {
        vector,
        driving_id: record.driving_id.clone(),
        target_id: record.target_id.clone(),
        video_id: record.video_id.clone(),
        t: clip.start_frame,
    })
}

/// The embeddings of the five overlapping F-frame sub-clips of an
/// `(F + 4)`-frame window, from one shared pass.
pub fn embed_window(
    config: &NetworkConfig,
    params: &ParamStore,
    window: &ClipFeature,
    record: &VideoRecord,
) -> Result<Vec<ClipEmbedding>> {
    if window.frames != config.clip_frames + WINDOW_EXTRA {
        return Err(Error::Shape(format!(
            "window has {} frames, expected {}",
            window.frames,
            config.clip_frames + WINDOW_EXTRA
        )));
    }
    Ok(embed_sequence(config, params, window)?
        .into_iter()
        .enumerate()
        .map(|(n, vector)| ClipEmbedding {
            vector,
            driving_id: record.driving_id.clone(),
            target_id: record.target_id.clone(),
            video_id: record.video_id.clone(),
            t: window.start_frame + n,
        })
        .collect())
}
