//! End-to-end orchestration behind the CLI: inversion, mask propagation,
//! stylization, standalone smoothing, plus run manifests with per-stage
//! timings. All randomness flows from the config seed through named
//! substreams, so a re-run with identical inputs is bitwise identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{build_backbone, build_codec, build_predictor};
use crate::error::{Error, Result};
use crate::flow::{
    CachedFlowSource, FloDirectorySource, FlowSource, HornSchunckSource, SmoothingContext,
};
use crate::formats::{self, npy, RunConfig};
use crate::mask::{iou_dice, propagate, upsample_mask, PropagateConfig};
use crate::schedule::{build_schedule, run_inversion, DiffusionSchedule};
use crate::style::{denoise_edited, StyleSchedule, StylizeConfig};
use crate::tensor::Tensor;
use crate::video::{FeatureStack, LatentVideo, MaskSequence};

/// Wall-clock accounting per pipeline stage.
#[derive(Debug, Default)]
pub struct StageTimer {
    stages: Vec<(String, f64)>,
    started: Option<Instant>,
}

impl StageTimer {
    pub fn start() -> Self {
        StageTimer {
            stages: Vec::new(),
            started: Some(Instant::now()),
        }
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f();
        self.stages.push((name.to_string(), t0.elapsed().as_secs_f64()));
        out
    }

    pub fn record(&mut self, name: &str, seconds: f64) {
        self.stages.push((name.to_string(), seconds));
    }

    /// Reassign part of an already-recorded stage to another name.
    pub fn split(&mut self, from: &str, to: &str, seconds: f64) {
        if let Some(entry) = self.stages.iter_mut().find(|(n, _)| n == from) {
            entry.1 -= seconds;
        }
        self.record(to, seconds);
    }

    pub fn total(&self) -> f64 {
        self.started.map(|s| s.elapsed().as_secs_f64()).unwrap_or(0.0)
    }

    pub fn stages(&self) -> &[(String, f64)] {
        &self.stages
    }
}

/// Run manifest written atomically next to the outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub stages: Vec<StageEntry>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub seconds: f64,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stages: Vec::new(),
            wall_seconds: 0.0,
        }
    }

    pub fn input(&mut self, key: &str, value: impl Into<String>) {
        self.inputs.insert(key.to_string(), value.into());
    }

    pub fn output(&mut self, key: &str, value: impl Into<String>) {
        self.outputs.insert(key.to_string(), value.into());
    }

    pub fn finish(&mut self, timer: &StageTimer) {
        self.stages = timer
            .stages()
            .iter()
            .map(|(name, seconds)| StageEntry {
                name: name.clone(),
                seconds: *seconds,
            })
            .collect();
        self.wall_seconds = timer.total();
    }

    /// Write to `dir/manifest.json` via a temp file and rename.
    pub fn write_atomic(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let body = serde_json::to_vec_pretty(self).expect("manifest serializes");
        let tmp = dir.join("manifest.json.tmp");
        let final_path = dir.join("manifest.json");
        std::fs::write(&tmp, &body).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;
        Ok(())
    }
}

fn schedule_from_config(cfg: &RunConfig) -> Result<DiffusionSchedule> {
    build_schedule(
        cfg.schedule.kind.into(),
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
        cfg.schedule.train_steps,
        cfg.t_total,
    )
}

fn load_latent(path: &Path) -> Result<LatentVideo> {
    LatentVideo::new(npy::read_tensor(path)?)
}

/// `invert`: latent video in, terminal noise + features + trajectory out.
pub struct InvertArgs {
    pub video: PathBuf,
    pub out_dir: PathBuf,
    pub capture_features: bool,
}

pub fn cmd_invert(cfg: &RunConfig, args: &InvertArgs) -> Result<Manifest> {
    let mut timer = StageTimer::start();
    let mut manifest = Manifest::new("invert", cfg);
    manifest.input("video", args.video.display().to_string());

    let video = timer.stage("load_inputs", || load_latent(&args.video))?;
    let sched = schedule_from_config(cfg)?;
    let predictor = build_predictor(&cfg.predictor, cfg.seed, video.channels())?;
    let tap = if args.capture_features {
        Some(cfg.windows().feature_step.clamp(1, cfg.t_total))
    } else {
        None
    };
    manifest.input("t0_step", tap.map_or("none".into(), |s| s.to_string()));

    let inv = timer.stage("inversion", || {
        run_inversion(&video, predictor.as_ref(), &sched, tap)
    })?;

    timer.stage("write_outputs", || {
        std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
        npy::write_tensor(inv.noise.tensor(), args.out_dir.join("noise.npy"))?;
        if let Some(features) = &inv.features {
            npy::write_tensor(features.tensor(), args.out_dir.join("features.npy"))?;
        }
        let stacked = stack_trajectory(&inv.trajectory)?;
        npy::write_tensor(&stacked, args.out_dir.join("trajectory.npy"))?;
        Ok(())
    })?;
    manifest.output("noise", "noise.npy");
    if inv.features.is_some() {
        manifest.output("features", "features.npy");
    }
    manifest.output("trajectory", "trajectory.npy");

    manifest.finish(&timer);
    manifest.write_atomic(&args.out_dir)?;
    Ok(manifest)
}

/// Trajectory states stacked on a leading axis.
fn stack_trajectory(states: &[LatentVideo]) -> Result<Tensor> {
    let first = states[0].tensor();
    let mut shape = vec![states.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(states.len() * first.len());
    for s in states {
        if s.tensor().shape() != first.shape() {
            return Err(Error::shape("trajectory states disagree on shape".into()));
        }
        data.extend_from_slice(s.tensor().data());
    }
    Tensor::new(shape, data)
}

fn unstack_trajectory(t: &Tensor) -> Result<Vec<LatentVideo>> {
    if t.rank() != 5 {
        return Err(Error::shape("trajectory tensor must be 5-D".into()));
    }
    let n = t.shape()[0];
    let frame_shape: Vec<usize> = t.shape()[1..].to_vec();
    let per: usize = frame_shape.iter().product();
    (0..n)
        .map(|i| {
            LatentVideo::new(Tensor::new(
                frame_shape.clone(),
                t.data()[i * per..(i + 1) * per].to_vec(),
            )?)
        })
        .collect()
}

/// `propagate-mask`: features + first-frame mask in, per-frame masks out.
pub struct PropagateArgs {
    pub features: PathBuf,
    pub mask: PathBuf,
    pub out_dir: PathBuf,
    pub rate: f64,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
}

pub fn cmd_propagate_mask(args: &PropagateArgs) -> Result<(Manifest, MaskSequence)> {
    let mut timer = StageTimer::start();
    let cfg = RunConfig {
        r: args.rate,
        k: args.k,
        n: args.n,
        seed: args.seed,
        ..RunConfig::default()
    };
    cfg.validate()?;
    let mut manifest = Manifest::new("propagate-mask", &cfg);
    manifest.input("features", args.features.display().to_string());
    manifest.input("mask", args.mask.display().to_string());

    let (features, first_mask) = timer.stage("load_inputs", || {
        let features = FeatureStack::new(npy::read_tensor(&args.features)?)?;
        let (h, w, values) = formats::png::read_mask(&args.mask)?;
        // Nearest-resample the user mask to feature resolution if needed.
        let at_res = if (h, w) == (features.height(), features.width()) {
            values
        } else {
            let seq = MaskSequence::new(1, h, w, values)?;
            upsample_mask(&seq, features.height(), features.width())
                .frame(0)
                .to_vec()
        };
        Ok((features, at_res))
    })?;

    let masks = timer.stage("propagation", || {
        propagate(
            &features,
            &first_mask,
            &PropagateConfig {
                rate: args.rate,
                k: args.k,
                n: args.n,
                seed: args.seed,
            },
        )
    })?;

    timer.stage("write_outputs", || {
        formats::png::write_mask_dir(&masks, &args.out_dir)
    })?;
    manifest.output("masks", args.out_dir.display().to_string());
    manifest.finish(&timer);
    manifest.write_atomic(&args.out_dir)?;
    Ok((manifest, masks))
}

/// `eval-mask` output record.
#[derive(Debug, Serialize)]
pub struct MaskMetrics {
    pub iou: f64,
    pub dice: f64,
    pub frames: usize,
}

pub fn cmd_eval_mask(pred_dir: &Path, gt_dir: &Path) -> Result<MaskMetrics> {
    let pred = formats::png::read_mask_dir(pred_dir)?;
    let gt = formats::png::read_mask_dir(gt_dir)?;
    let (iou, dice) = iou_dice(&pred, &gt)?;
    Ok(MaskMetrics {
        iou,
        dice,
        frames: pred.frames(),
    })
}

/// `stylize`: the full three-branch pipeline over clean latents.
pub struct StylizeArgs {
    pub video: PathBuf,
    pub style: PathBuf,
    pub masks: PathBuf,
    pub out: PathBuf,
    pub frames_out: Option<PathBuf>,
    pub flows: Option<PathBuf>,
    pub no_smooth: bool,
}

pub fn cmd_stylize(cfg: &RunConfig, args: &StylizeArgs) -> Result<Manifest> {
    let mut timer = StageTimer::start();
    let mut manifest = Manifest::new("stylize", cfg);
    manifest.input("video", args.video.display().to_string());
    manifest.input("style", args.style.display().to_string());
    manifest.input("masks", args.masks.display().to_string());

    let (video, style, masks) = timer.stage("load_inputs", || {
        let video = load_latent(&args.video)?;
        let style = load_latent(&args.style)?;
        let masks = formats::png::read_mask_dir(&args.masks)?;
        Ok((video, style, masks))
    })?;
    if masks.frames() != video.frames() {
        return Err(Error::shape(format!(
            "{} masks for {} frames",
            masks.frames(),
            video.frames()
        )));
    }
    let masks_latent = upsample_mask(&masks, video.height(), video.width());

    let sched = schedule_from_config(cfg)?;
    let backbone = build_backbone(&cfg.predictor, cfg.seed, video.channels())?;
    let codec = build_codec(&cfg.codec, cfg.seed)?;

    let (content_inv, style_inv) = timer.stage("inversion", || {
        let content = run_inversion(&video, backbone.as_ref(), &sched, None)?;
        let style_inv = run_inversion(&style, backbone.as_ref(), &sched, None)?;
        Ok((content, style_inv))
    })?;

    let hs = HornSchunckSource::default();
    let flo_source = args.flows.as_ref().map(|dir| FloDirectorySource { dir: dir.clone() });
    let raw_source: &dyn FlowSource = match &flo_source {
        Some(s) => s,
        None => &hs,
    };
    let cached = CachedFlowSource::new(raw_source);
    let source: &dyn FlowSource = if cfg.reflow_each_step { raw_source } else { &cached };

    let smoothing = if args.no_smooth {
        None
    } else {
        Some(SmoothingContext {
            codec: codec.as_ref(),
            source,
            half_window: cfg.m,
            window: cfg.windows().smoothing,
        })
    };

    let style_cfg = StylizeConfig {
        style: StyleSchedule::from_config(cfg),
        adain_per_frame: cfg.adain_per_frame,
        replay_from_cache: cfg.replay_from_cache,
        hooked_layers: None,
        smoothing,
    };

    let outcome = timer.stage("stylization", || {
        denoise_edited(
            &content_inv.noise,
            &style_inv.noise,
            &masks_latent,
            backbone.as_ref(),
            &sched,
            &style_cfg,
            Some(&content_inv.trajectory),
            Some(&style_inv.trajectory),
        )
    })?;
    timer.split("stylization", "smoothing", outcome.smoothing_seconds);

    timer.stage("write_outputs", || {
        if let Some(parent) = args.out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        npy::write_tensor(outcome.edited.tensor(), &args.out)?;
        if let Some(frames_dir) = &args.frames_out {
            let pixels = codec.decode(&outcome.edited)?;
            std::fs::create_dir_all(frames_dir).map_err(|e| Error::io(frames_dir, e))?;
            if pixels.channels() == 3 {
                formats::png::write_frames(&pixels, frames_dir)?;
            } else {
                // mock codecs keep the latent channel count; emit a tensor
                npy::write_tensor(pixels.tensor(), frames_dir.join("decoded.npy"))?;
            }
        }
        Ok(())
    })?;
    manifest.output("edited", args.out.display().to_string());

    manifest.finish(&timer);
    let manifest_dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.write_atomic(&manifest_dir)?;
    Ok(manifest)
}

/// `smooth`: standalone sliding-window smoothing over PNG frames.
pub struct SmoothArgs {
    pub frames: PathBuf,
    pub out_dir: PathBuf,
    pub half_window: usize,
    pub flows: Option<PathBuf>,
}

pub fn cmd_smooth(args: &SmoothArgs) -> Result<Manifest> {
    let mut timer = StageTimer::start();
    let cfg = RunConfig::default();
    let mut manifest = Manifest::new("smooth", &cfg);
    manifest.input("frames", args.frames.display().to_string());

    let video = timer.stage("load_inputs", || formats::png::read_frames(&args.frames))?;

    let hs = HornSchunckSource::default();
    let flo_source = args.flows.as_ref().map(|dir| FloDirectorySource { dir: dir.clone() });
    let raw_source: &dyn FlowSource = match &flo_source {
        Some(s) => s,
        None => &hs,
    };
    let cached = CachedFlowSource::new(raw_source);

    let smoothed = timer.stage("smoothing", || {
        crate::flow::sliding_window_smooth(&video, args.half_window, &cached)
    })?;

    timer.stage("write_outputs", || {
        formats::png::write_frames(&smoothed, &args.out_dir)
    })?;
    manifest.output("frames", args.out_dir.display().to_string());
    manifest.finish(&timer);
    manifest.write_atomic(&args.out_dir)?;
    Ok(manifest)
}

/// Read a trajectory written by `cmd_invert`.
pub fn read_trajectory(path: &Path) -> Result<Vec<LatentVideo>> {
    unstack_trajectory(&npy::read_tensor(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{CodecSpec, PredictorSpec};
    use rand::Rng;

    fn write_ramp_latent(path: &Path, shape: [usize; 4], seed: u64) {
        let mut rng = crate::rng::substream(seed, crate::rng::Stream::BackboneWeights);
        let n: usize = shape.iter().product();
        let t = Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        npy::write_tensor(&t, path).unwrap();
    }

    fn small_config() -> RunConfig {
        RunConfig {
            t_total: 8,
            m: 1,
            predictor: PredictorSpec::Backbone {
                pool: 2,
                cross_frame: true,
            },
            codec: CodecSpec::Orthogonal,
            seed: 5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn invert_writes_noise_features_trajectory_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let video_path = dir.path().join("video.npy");
        write_ramp_latent(&video_path, [2, 4, 4, 4], 1);
        let cfg = small_config();
        let out = dir.path().join("out");
        let manifest = cmd_invert(
            &cfg,
            &InvertArgs {
                video: video_path,
                out_dir: out.clone(),
                capture_features: true,
            },
        )
        .unwrap();
        assert!(out.join("noise.npy").exists());
        assert!(out.join("features.npy").exists());
        assert!(out.join("trajectory.npy").exists());
        assert!(out.join("manifest.json").exists());
        // t0 = 0.4 * 8 rounds to 3
        assert_eq!(manifest.inputs["t0_step"], "3");
        let traj = read_trajectory(&out.join("trajectory.npy")).unwrap();
        assert_eq!(traj.len(), 9);
    }

    #[test]
    fn stylize_is_bitwise_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let video_path = dir.path().join("video.npy");
        let style_path = dir.path().join("style.npy");
        write_ramp_latent(&video_path, [2, 4, 4, 4], 2);
        write_ramp_latent(&style_path, [1, 4, 4, 4], 3);
        let masks_dir = dir.path().join("masks");
        let mut masks = MaskSequence::zeros(2, 4, 4);
        for y in 0..2 {
            for x in 0..2 {
                masks.set(0, y, x, 1);
                masks.set(1, y, x, 1);
            }
        }
        formats::png::write_mask_dir(&masks, &masks_dir).unwrap();

        let cfg = small_config();
        let run = |out: &Path| {
            cmd_stylize(
                &cfg,
                &StylizeArgs {
                    video: video_path.clone(),
                    style: style_path.clone(),
                    masks: masks_dir.clone(),
                    out: out.to_path_buf(),
                    frames_out: None,
                    flows: None,
                    no_smooth: false,
                },
            )
            .unwrap();
            std::fs::read(out).unwrap()
        };
        let a = run(&dir.path().join("a/edited.npy"));
        let b = run(&dir.path().join("b/edited.npy"));
        assert_eq!(a, b);
    }

    #[test]
    fn stage_timings_cover_the_wall_clock() {
        let dir = tempfile::tempdir().unwrap();
        let video_path = dir.path().join("video.npy");
        write_ramp_latent(&video_path, [1, 4, 4, 4], 4);
        let cfg = small_config();
        let manifest = cmd_invert(
            &cfg,
            &InvertArgs {
                video: video_path,
                out_dir: dir.path().join("out"),
                capture_features: false,
            },
        )
        .unwrap();
        let sum: f64 = manifest.stages.iter().map(|s| s.seconds).sum();
        assert!(sum >= 0.95 * manifest.wall_seconds || manifest.wall_seconds < 0.01);
    }
}
