//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for
//! runtime failures. Failures also print one line of the form
//! `error: kind=<Kind> message=<text>` on stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::data::{load_manifest, split_identities, IdentityId, Split, VideoKind};
use crate::error::{Error, Result};
use crate::eval::{self, read_report, render_roc_svg, write_report, REPORT_FILE};
use crate::features::{scale_for, write_feature_cache, NormalizeBy};
use crate::io_util::write_atomic;
use crate::network::WINDOW_EXTRA;
use crate::sampler::BatchShape;
use crate::synth::{generate_dataset, plan_dataset, SynthConfig};
use crate::trainer::{self, load_model, TrainConfig};

pub const LOG_ENV: &str = "DYNID_LOG";

#[derive(Parser, Debug)]
#[command(
    name = "dynid",
    version,
    about = "Learn motion-based identity embeddings from facial landmark sequences and verify who drives a synthetic video"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Random seed for generation, sampling and initialization
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Frames per clip (31, 51, 71 or 91); train defaults to 51, eval reads it from the checkpoint
    #[arg(long, global = true)]
    pub clip_frames: Option<usize>,
    /// Dataset manifest (file, or directory containing manifest.json)
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Model checkpoint to read (train: resume from it)
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output file or directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all available cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic landmark dataset
    Synth(SynthArgs),
    /// Write per-video feature caches
    Extract(ExtractArgs),
    /// Train an embedding network
    Train(TrainArgs),
    /// Score a split and write ROC tables
    Eval(EvalArgs),
    /// Average distance of probe videos to a reference identity
    Report(ReportArgs),
    /// Plot the mean ROC curve of an evaluation report as SVG
    Roc(RocArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of identities
    #[arg(long, default_value_t = 8)]
    pub identities: usize,
    /// Original videos per identity (each also gets one self-reenactment)
    #[arg(long, default_value_t = 8)]
    pub videos: usize,
    /// Frames per video
    #[arg(long, default_value_t = 240)]
    pub frames: usize,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    /// Landmark noise standard deviation in pixels, on every video
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Extra noise in pixels on reenacted videos
    #[arg(long, default_value_t = 0.5)]
    pub degradation: f64,
    /// Cross-reenactments per ordered identity pair
    #[arg(long, default_value_t = 8)]
    pub cross_per_pair: usize,
    /// Skip this many identities of the seed's identity stream
    #[arg(long, default_value_t = 0)]
    pub first_identity: usize,
    /// Seed for the per-video streams (default: --seed)
    #[arg(long)]
    pub video_seed: Option<u64>,
    /// Split label given to every identity
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Instead of one label, split identities by train,val,test fractions
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub split_fractions: Option<Vec<f64>>,
    /// Minimum normalized signature difference between identities
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    /// Write only the manifest, without rendering any landmark file
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Only videos whose driver and target are in this split
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long, default_value = "target")]
    pub normalize_by: NormalizeBy,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Total optimizer steps (including steps already in a resumed checkpoint)
    #[arg(long, default_value_t = 100_000)]
    pub iterations: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Channels of every convolution layer
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_identities: usize,
    /// Self-reenactment pull windows per identity
    #[arg(long, default_value_t = 8)]
    pub self_pull: usize,
    /// Cross-reenactment-as-driver pull windows per identity
    #[arg(long, default_value_t = 8)]
    pub cross_pull: usize,
    /// Push windows taken from each other batch identity
    #[arg(long, default_value_t = 8)]
    pub push_per_other: usize,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: u64,
    #[arg(long, default_value_t = 1000)]
    pub val_every: u64,
    #[arg(long, default_value_t = 4)]
    pub val_batches: usize,
    #[arg(long, default_value = "target")]
    pub normalize_by: NormalizeBy,
    /// Unit-normalize embeddings
    #[arg(long)]
    pub l2_normalize: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Frames between clip starts (default: the clip length)
    #[arg(long)]
    pub stride: Option<usize>,
    /// Also write the mean ROC curve as roc.svg
    #[arg(long)]
    pub plot: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Identity whose self-reenactments form the reference set
    #[arg(long)]
    pub reference: String,
    /// Probe video ids, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    pub probes: Vec<String>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RocArgs {
    /// report.json written by eval (file or its directory)
    #[arg(long)]
    pub report: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            if code != 0 {
                eprintln!("error: kind=UsageError message={}", first_line(&e.to_string()));
            }
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp_millis()
        .try_init();
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return fail(&Error::Validation("--threads must be positive".into()));
        }
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => fail(&e),
    }
}

fn first_line(s: &str) -> String {
    s.lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("")
        .trim_start_matches("error: ")
        .to_string()
}

fn fail(e: &Error) -> i32 {
    eprintln!("error: kind={} message={}", e.kind(), e.to_string().replace('\n', " "));
    if e.is_validation() {
        1
    } else {
        2
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Validation(format!("--{flag} is required for this command")))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Synth(a) => synth(c, a),
        Command::Extract(a) => extract(c, a),
        Command::Train(a) => train(c, a),
        Command::Eval(a) => evaluate(c, a),
        Command::Report(a) => report(c, a),
        Command::Roc(a) => roc(c, a),
    }
}

fn synth(c: &Common, a: &SynthArgs) -> Result<()> {
    let out = required(&c.out, "out")?;
    let config = SynthConfig {
        n_identities: a.identities,
        first_identity: a.first_identity,
        videos_per_identity: a.videos,
        frames_per_video: a.frames,
        fps: a.fps,
        landmark_noise: a.noise,
        degradation: a.degradation,
        cross_per_pair: a.cross_per_pair,
        seed: c.seed,
        video_seed: a.video_seed,
        split: a.split,
        margin: a.margin,
    };
    config.validate(c.clip_frames.map_or(1, |f| f + WINDOW_EXTRA))?;
    let mut manifest = if a.dry_run {
        plan_dataset(&config, out)?
    } else {
        generate_dataset(&config, out)?
    };
    if let Some(fr) = &a.split_fractions {
        let outcome = split_identities(&manifest, [fr[0], fr[1], fr[2]], c.seed)?;
        info!(
            "split identities; dropped {} cross-split reenactments",
            outcome.dropped
        );
        manifest = outcome.manifest;
    }
    let path = manifest.save()?;
    let count = |k| manifest.videos.iter().filter(|v| v.kind == k).count();
    println!(
        "manifest={} identities={} originals={} self_reenactments={} cross_reenactments={}",
        path.display(),
        manifest.identities.len(),
        count(VideoKind::Original),
        count(VideoKind::SelfReenactment),
        count(VideoKind::CrossReenactment)
    );
    Ok(())
}

fn extract(c: &Common, a: &ExtractArgs) -> Result<()> {
    let manifest = load_manifest(required(&c.manifest, "manifest")?)?;
    let out = required(&c.out, "out")?;
    let records: Vec<_> = match a.split {
        Some(s) => manifest.videos_in(s).collect(),
        None => manifest.videos.iter().collect(),
    };
    use rayon::prelude::*;
    records.par_iter().try_for_each(|r| -> Result<()> {
        let seq = crate::data::load_landmarks(&manifest, r)?;
        let scale = scale_for(&manifest, r, a.normalize_by)?;
        write_feature_cache(&out.join(format!("{}.ftr", r.video_id)), &seq, scale)
    })?;
    println!("videos={} out={}", records.len(), out.display());
    Ok(())
}

fn train(c: &Common, a: &TrainArgs) -> Result<()> {
    let manifest = load_manifest(required(&c.manifest, "manifest")?)?;
    let out = required(&c.out, "out")?;
    let config = TrainConfig {
        iterations: a.iterations,
        lr: a.lr,
        clip_frames: c.clip_frames.unwrap_or(51),
        width: a.width,
        embedding_dim: a.embedding_dim,
        batch: BatchShape {
            identities: a.batch_identities,
            self_pull: a.self_pull,
            cross_pull: a.cross_pull,
            push_per_other: a.push_per_other,
        },
        checkpoint_every: a.checkpoint_every,
        val_every: a.val_every,
        val_batches: a.val_batches,
        seed: c.seed,
        normalize_by: a.normalize_by,
        l2_normalize: a.l2_normalize,
    };
    let outcome = match &c.checkpoint {
        Some(ckpt) => trainer::resume(ckpt, &manifest, &config, out)?,
        None => trainer::train(&manifest, &config, out)?,
    };
    let last = outcome.records.last();
    println!(
        "checkpoint={} iterations={} final_loss={}",
        outcome.final_checkpoint.display(),
        outcome.meta.iteration,
        last.map_or("nan".into(), |r| format!("{:.6}", r.loss))
    );
    Ok(())
}

fn evaluate(c: &Common, a: &EvalArgs) -> Result<()> {
    let manifest = load_manifest(required(&c.manifest, "manifest")?)?;
    let (meta, params) = load_model(required(&c.checkpoint, "checkpoint")?)?;
    if let Some(f) = c.clip_frames {
        if f != meta.network.clip_frames {
            return Err(Error::Validation(format!(
                "--clip-frames {f} does not match the checkpoint's {}",
                meta.network.clip_frames
            )));
        }
    }
    let out = required(&c.out, "out")?;
    let stride = a.stride.unwrap_or(meta.network.clip_frames);
    let report = eval::evaluate(
        &manifest,
        &meta.network,
        &params,
        a.split,
        stride,
        meta.train.normalize_by,
    )?;
    write_report(&report, out)?;
    if a.plot {
        write_atomic(&out.join("roc.svg"), render_roc_svg(&report).as_bytes())?;
    }
    for (id, why) in &report.skipped {
        info!("skipped {id}: {why}");
    }
    println!(
        "mean_auc={:.6} scored={} skipped={} out={}",
        report.mean_auc,
        report.per_identity.len(),
        report.skipped.len(),
        out.display()
    );
    Ok(())
}

fn report(c: &Common, a: &ReportArgs) -> Result<()> {
    let manifest = load_manifest(required(&c.manifest, "manifest")?)?;
    let (meta, params) = load_model(required(&c.checkpoint, "checkpoint")?)?;
    let out = required(&c.out, "out")?;
    let reference = IdentityId::new(a.reference.clone());
    let rows = eval::reference_distance_report(
        &manifest,
        &meta.network,
        &params,
        &reference,
        &a.probes,
        a.stride.unwrap_or(meta.network.clip_frames),
        meta.train.normalize_by,
    )?;
    let mut s = String::from("video_id,driving_id,target_id,mean_distance,clips\n");
    for r in &rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.video_id, r.driving_id, r.target_id, r.mean_distance, r.clips
        )
        .unwrap();
    }
    let path = if out.extension().is_some() {
        out.to_path_buf()
    } else {
        out.join(format!("reference_{reference}.csv"))
    };
    write_atomic(&path, s.as_bytes())?;
    print!("{s}");
    Ok(())
}

fn roc(c: &Common, a: &RocArgs) -> Result<()> {
    let path = if a.report.is_dir() {
        a.report.join(REPORT_FILE)
    } else {
        a.report.clone()
    };
    let report = read_report(&path)?;
    let out = match &c.out {
        Some(o) if o.extension().is_some() => o.clone(),
        Some(o) => o.join("roc.svg"),
        None => path.with_file_name("roc.svg"),
    };
    write_atomic(&out, render_roc_svg(&report).as_bytes())?;
    println!("plot={} mean_auc={:.6}", out.display(), report.mean_auc);
    Ok(())
}
