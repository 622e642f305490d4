//! Three-branch stylization: localized latent blending, AdaIN latent
//! shift, and the AdaIN-guided attention shift with its beta ramp,
//! applied through attention hooks on a pluggable backbone.
//!
//! Step indexing: a run with T inference steps walks states T, T-1, ..,
//! 0. Attention shift and smoothing windows are checked against the
//! source index of each transition (T..1); the latent shift and blending
//! act on the freshly produced state (T-1..0). Both use the resolved
//! [tau..] bounds inclusively.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::flow::{smooth_step, SmoothingContext};
use crate::formats::RunConfig;
use crate::schedule::{ddim_denoise_step, DiffusionSchedule, NoisePredictor};
use crate::tensor::{adain, Tensor, ADAIN_EPS};
use crate::video::{LatentVideo, MaskSequence};

/// Q/K/V of one attention layer for one branch, each shaped
/// frames x heads x tokens x head-dim. K and V share a token count; Q may
/// differ (cross-frame keys are longer than queries).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPacket {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

fn dims(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::shape(format!(
            "attention tensor must be FxHxTxD, got {:?}",
            t.shape()
        )));
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

impl AttentionPacket {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let (fq, hq, _, dq) = dims(&q)?;
        let (fk, hk, tk, dk) = dims(&k)?;
        let (fv, hv, tv, dv) = dims(&v)?;
        if (fk, hk, tk, dk) != (fv, hv, tv, dv) {
            return Err(Error::shape("K and V disagree".into()));
        }
        if (fq, hq, dq) != (fk, hk, dk) {
            return Err(Error::shape("Q disagrees with K/V on frames/heads/dim".into()));
        }
        Ok(AttentionPacket { q, k, v })
    }

    pub fn frames(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.q.shape()[3]
    }

    pub fn query_tokens(&self) -> usize {
        self.q.shape()[2]
    }

    pub fn key_tokens(&self) -> usize {
        self.k.shape()[2]
    }
}

/// What a hook did with the packet it was given.
pub enum HookResult {
    /// Packet untouched; the backbone proceeds with its own attention
    /// layout (including cross-frame restructuring when enabled).
    Unchanged(AttentionPacket),
    /// K/V (and possibly Q) were replaced; the backbone must attend with
    /// exactly this packet.
    Shifted(AttentionPacket),
}

/// Interposes on each attention layer of a backbone forward pass.
pub trait AttentionHook {
    fn on_attention(&mut self, layer: usize, pkt: AttentionPacket) -> Result<HookResult>;
}

/// Hook that does nothing.
pub struct NoopHook;

impl AttentionHook for NoopHook {
    fn on_attention(&mut self, _layer: usize, pkt: AttentionPacket) -> Result<HookResult> {
        Ok(HookResult::Unchanged(pkt))
    }
}

/// Captures every layer's packet, leaving the forward pass untouched.
#[derive(Default)]
pub struct CaptureHook {
    pub packets: BTreeMap<usize, AttentionPacket>,
}

impl AttentionHook for CaptureHook {
    fn on_attention(&mut self, layer: usize, pkt: AttentionPacket) -> Result<HookResult> {
        self.packets.insert(layer, pkt.clone());
        Ok(HookResult::Unchanged(pkt))
    }
}

/// A noise predictor whose attention layers can be hooked.
pub trait HookedBackbone: NoisePredictor {
    fn forward_hooked(
        &self,
        z: &LatentVideo,
        t: i64,
        hook: &mut dyn AttentionHook,
    ) -> Result<LatentVideo>;

    /// Layers the stylization hooks attach to by default; `None` means
    /// every layer. Backbones with a known depth expose their
    /// up-sampling half here.
    fn default_hooked_layers(&self) -> Option<Vec<usize>> {
        None
    }
}

/// Stylization weights and windows in resolved step-index units.
#[derive(Debug, Clone)]
pub struct StyleSchedule {
    pub gamma: f64,
    pub beta_tau2: f64,
    pub beta_tau3: f64,
    /// [tau0, tau1]: latent shift window.
    pub latent_window: (usize, usize),
    /// [tau2, tau3]: attention shift window.
    pub attention_window: (usize, usize),
}

impl StyleSchedule {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let w = cfg.windows();
        StyleSchedule {
            gamma: cfg.gamma,
            beta_tau2: cfg.beta_tau2,
            beta_tau3: cfg.beta_tau3,
            latent_window: w.latent_shift,
            attention_window: w.attention_shift,
        }
    }

    pub fn in_latent_window(&self, step_index: usize) -> bool {
        self.latent_window.0 <= step_index && step_index <= self.latent_window.1
    }

    pub fn in_attention_window(&self, step_index: usize) -> bool {
        self.attention_window.0 <= step_index && step_index <= self.attention_window.1
    }
}

/// Ramp weight at a step index: linear between `beta_tau2` at tau2 and
/// `beta_tau3` at tau3, clamped to the endpoint range outside.
pub fn beta_at(step_index: usize, sched: &StyleSchedule) -> Result<f64> {
    let (t2, t3) = sched.attention_window;
    if t2 == t3 {
        return Err(Error::arg("degenerate ramp: tau2 == tau3 after resolution"));
    }
    let raw = (sched.beta_tau3 - sched.beta_tau2) / (t3 as f64 - t2 as f64)
        * (step_index as f64 - t2 as f64)
        + sched.beta_tau2;
    let lo = sched.beta_tau2.min(sched.beta_tau3);
    let hi = sched.beta_tau2.max(sched.beta_tau3);
    Ok(raw.clamp(lo, hi))
}

/// Mask-gated merge: foreground keeps the content branch, background
/// keeps the edited branch. Selection, not arithmetic, so the partition
/// is bitwise.
pub fn localized_blend(
    edited: &LatentVideo,
    content: &LatentVideo,
    masks: &MaskSequence,
) -> Result<LatentVideo> {
    if edited.tensor().shape() != content.tensor().shape() {
        return Err(Error::shape(format!(
            "edited {:?} vs content {:?}",
            edited.tensor().shape(),
            content.tensor().shape()
        )));
    }
    let (f, c, h, w) = (
        edited.frames(),
        edited.channels(),
        edited.height(),
        edited.width(),
    );
    if masks.frames() != f || masks.height() != h || masks.width() != w {
        return Err(Error::shape(format!(
            "masks {}x{}x{} vs latent {}x..x{}x{}",
            masks.frames(),
            masks.height(),
            masks.width(),
            f,
            h,
            w
        )));
    }
    let mut out = edited.tensor().clone();
    let data = out.data_mut();
    let content_data = content.tensor().data();
    for fi in 0..f {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if masks.get(fi, y, x) != 0 {
                        let idx = ((fi * c + ci) * h + y) * w + x;
                        data[idx] = content_data[idx];
                    }
                }
            }
        }
    }
    LatentVideo::new(out)
}

/// AdaIN of a latent video against a single-frame style latent. Joint
/// statistics pool every frame's spatial positions into one distribution
/// per channel; the per-frame variant normalizes each frame on its own.
pub fn adain_video(
    x: &LatentVideo,
    style: &LatentVideo,
    per_frame: bool,
) -> Result<LatentVideo> {
    if style.frames() != 1 {
        return Err(Error::shape("style latent must be a single frame".into()));
    }
    if x.channels() != style.channels() {
        return Err(Error::shape(format!(
            "channel mismatch: {} vs {}",
            x.channels(),
            style.channels()
        )));
    }
    if !per_frame {
        let out = adain(x.tensor(), style.tensor(), 1, &[0, 2, 3], ADAIN_EPS)?;
        return LatentVideo::new(out);
    }
    let (f, c, h, w) = (x.frames(), x.channels(), x.height(), x.width());
    let mut data = Vec::with_capacity(f * c * h * w);
    for fi in 0..f {
        let frame = x.frame(fi);
        let shifted = adain(frame.tensor(), style.tensor(), 1, &[0, 2, 3], ADAIN_EPS)?;
        data.extend_from_slice(shifted.data());
    }
    LatentVideo::new(Tensor::new(vec![f, c, h, w], data)?)
}

/// Latent shift: AdaIN toward the style latent inside [tau0, tau1],
/// identity outside.
pub fn latent_shift(
    edited: &LatentVideo,
    style: &LatentVideo,
    step_index: usize,
    sched: &StyleSchedule,
    per_frame: bool,
) -> Result<LatentVideo> {
    if !sched.in_latent_window(step_index) {
        return Ok(edited.clone());
    }
    adain_video(edited, style, per_frame)
}

fn frame_slice(t: &Tensor, frame: usize) -> Tensor {
    let s = t.shape();
    let per = s[1] * s[2] * s[3];
    Tensor::new(
        vec![1, s[1], s[2], s[3]],
        t.data()[frame * per..(frame + 1) * per].to_vec(),
    )
    .expect("frame slice")
}

fn tile_frames(t: &Tensor, frames: usize) -> Tensor {
    let s = t.shape();
    debug_assert_eq!(s[0], 1);
    let mut data = Vec::with_capacity(frames * t.len());
    for _ in 0..frames {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![frames, s[1], s[2], s[3]], data).expect("tile")
}

fn concat_tokens(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (fa, ha, ta, da) = dims(a)?;
    let (fb, hb, tb, db) = dims(b)?;
    if (fa, ha, da) != (fb, hb, db) {
        return Err(Error::shape("token concat on mismatched layouts".into()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for f in 0..fa {
        for h in 0..ha {
            let base_a = ((f * ha + h) * ta) * da;
            data.extend_from_slice(&a.data()[base_a..base_a + ta * da]);
            let base_b = ((f * hb + h) * tb) * db;
            data.extend_from_slice(&b.data()[base_b..base_b + tb * db]);
        }
    }
    Tensor::new(vec![fa, ha, ta + tb, da], data)
}

/// (F, heads, T, dh) -> (F*T, heads*dh), so head x dim pairs become the
/// channel axis for AdaIN over frames and tokens jointly.
fn fold_heads(t: &Tensor) -> Result<Tensor> {
    let (f, h, tok, d) = dims(t)?;
    let mut data = vec![0.0; t.len()];
    let src = t.data();
    for fi in 0..f {
        for hi in 0..h {
            for ti in 0..tok {
                for di in 0..d {
                    let from = (((fi * h + hi) * tok) + ti) * d + di;
                    let to = (fi * tok + ti) * (h * d) + hi * d + di;
                    data[to] = src[from];
                }
            }
        }
    }
    Tensor::new(vec![f * tok, h * d], data)
}

fn unfold_heads(folded: &Tensor, f: usize, h: usize, tok: usize, d: usize) -> Result<Tensor> {
    let mut data = vec![0.0; folded.len()];
    let src = folded.data();
    for fi in 0..f {
        for hi in 0..h {
            for ti in 0..tok {
                for di in 0..d {
                    let to = (((fi * h + hi) * tok) + ti) * d + di;
                    let from = (fi * tok + ti) * (h * d) + hi * d + di;
                    data[to] = src[from];
                }
            }
        }
    }
    Tensor::new(vec![f, h, tok, d], data)
}

/// AdaIN of a packet tensor toward a style tensor: statistics per head
/// and channel, reduced over frames and tokens.
pub fn adain_packet(x: &Tensor, style: &Tensor) -> Result<Tensor> {
    let (f, h, tok, d) = dims(x)?;
    let (_, hs, _, ds) = dims(style)?;
    if (hs, ds) != (h, d) {
        return Err(Error::shape("style packet heads/dim mismatch".into()));
    }
    let folded_x = fold_heads(x)?;
    let folded_s = fold_heads(style)?;
    let out = adain(&folded_x, &folded_s, 1, &[0], ADAIN_EPS)?;
    unfold_heads(&out, f, h, tok, d)
}

/// The per-branch tensors the attention shift consumes: the edited
/// branch's own packet, the content branch's query, and the style
/// branch's single-frame K/V.
pub struct BranchPackets<'a> {
    pub edited: &'a AttentionPacket,
    pub content_q: &'a Tensor,
    pub style_k: &'a Tensor,
    pub style_v: &'a Tensor,
}

/// Query blending plus the beta-weighted mix of K-V AdaIN and K-V
/// replacement. Callers gate this on the attention window.
pub fn attention_shift(
    p: &BranchPackets<'_>,
    step_index: usize,
    sched: &StyleSchedule,
) -> Result<AttentionPacket> {
    if p.content_q.shape() != p.edited.q.shape() {
        return Err(Error::shape(format!(
            "content Q {:?} vs edited Q {:?}",
            p.content_q.shape(),
            p.edited.q.shape()
        )));
    }
    let (fs, _, ts, _) = dims(p.style_k)?;
    if fs != 1 {
        return Err(Error::shape("style K/V must be single-frame".into()));
    }
    if ts != p.edited.key_tokens() {
        return Err(Error::shape(format!(
            "style K has {} tokens, edited K has {}",
            ts,
            p.edited.key_tokens()
        )));
    }

    let gamma = sched.gamma;
    let q = p.edited.q.lerp_with(p.content_q, gamma, 1.0 - gamma)?;

    let beta = beta_at(step_index, sched)?;
    let frames = p.edited.frames();
    let ks = tile_frames(p.style_k, frames);
    let vs = tile_frames(p.style_v, frames);
    let k = adain_packet(&p.edited.k, p.style_k)?.lerp_with(&ks, beta, 1.0 - beta)?;
    let v = adain_packet(&p.edited.v, p.style_v)?.lerp_with(&vs, beta, 1.0 - beta)?;

    AttentionPacket::new(q, k, v)
}

/// Cross-frame restructuring of one frame's attention: queries stay
/// per-frame, keys/values concatenate the first frame with the previous
/// one. The first frame attends to itself only.
pub fn cross_frame_restructure(pkt: &AttentionPacket, frame: usize) -> Result<AttentionPacket> {
    if frame >= pkt.frames() {
        return Err(Error::arg(format!(
            "frame {frame} out of range ({} frames)",
            pkt.frames()
        )));
    }
    let q = frame_slice(&pkt.q, frame);
    let (k, v) = if frame == 0 {
        (frame_slice(&pkt.k, 0), frame_slice(&pkt.v, 0))
    } else {
        let k0 = frame_slice(&pkt.k, 0);
        let kp = frame_slice(&pkt.k, frame - 1);
        let v0 = frame_slice(&pkt.v, 0);
        let vp = frame_slice(&pkt.v, frame - 1);
        (concat_tokens(&k0, &kp)?, concat_tokens(&v0, &vp)?)
    };
    AttentionPacket::new(q, k, v)
}

/// Applies the attention shift at hooked layers using captured content
/// and style packets.
pub struct ShiftHook<'a> {
    content: &'a BTreeMap<usize, AttentionPacket>,
    style: &'a BTreeMap<usize, AttentionPacket>,
    sched: &'a StyleSchedule,
    step_index: usize,
    hooked_layers: Option<&'a [usize]>,
}

impl<'a> ShiftHook<'a> {
    pub fn new(
        content: &'a BTreeMap<usize, AttentionPacket>,
        style: &'a BTreeMap<usize, AttentionPacket>,
        sched: &'a StyleSchedule,
        step_index: usize,
        hooked_layers: Option<&'a [usize]>,
    ) -> Self {
        ShiftHook {
            content,
            style,
            sched,
            step_index,
            hooked_layers,
        }
    }

    fn is_hooked(&self, layer: usize) -> bool {
        match self.hooked_layers {
            None => true,
            Some(layers) => layers.contains(&layer),
        }
    }
}

impl AttentionHook for ShiftHook<'_> {
    fn on_attention(&mut self, layer: usize, pkt: AttentionPacket) -> Result<HookResult> {
        if !self.is_hooked(layer) {
            return Ok(HookResult::Unchanged(pkt));
        }
        let content = self.content.get(&layer).ok_or_else(|| {
            Error::Backend(format!("missing content Q capture at hooked layer {layer}"))
        })?;
        let style = self.style.get(&layer).ok_or_else(|| {
            Error::Backend(format!("missing style K/V capture at hooked layer {layer}"))
        })?;
        let shifted = attention_shift(
            &BranchPackets {
                edited: &pkt,
                content_q: &content.q,
                style_k: &style.k,
                style_v: &style.v,
            },
            self.step_index,
            self.sched,
        )?;
        Ok(HookResult::Shifted(shifted))
    }
}

/// Options for the three-branch loop.
pub struct StylizeConfig<'a> {
    pub style: StyleSchedule,
    pub adain_per_frame: bool,
    pub replay_from_cache: bool,
    /// Layers to shift; `None` defers to the backbone's default.
    pub hooked_layers: Option<Vec<usize>>,
    pub smoothing: Option<SmoothingContext<'a>>,
}

/// Result of the three-branch loop.
pub struct StylizeOutcome {
    pub edited: LatentVideo,
    pub content_final: LatentVideo,
    /// Wall-clock seconds spent inside smoothing steps.
    pub smoothing_seconds: f64,
}

#[cfg(not(target_arch = "wasm32"))]
fn now() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn now() -> Option<std::time::Instant> {
    None
}

fn elapsed(start: Option<std::time::Instant>) -> f64 {
    start.map(|s| s.elapsed().as_secs_f64()).unwrap_or(0.0)
}

/// The three-branch denoising loop. Content and style branches run in
/// lockstep from their inverted noise (or replay from the trajectories
/// when configured); per transition the edited branch is denoised with
/// shifted attention, then latent-shifted inside its window, then
/// mask-blended against the content state at the same step. Smoothing
/// replaces the edited branch's DDIM update inside [tau4, tau5].
#[allow(clippy::too_many_arguments)]
pub fn denoise_edited(
    content_noise: &LatentVideo,
    style_noise: &LatentVideo,
    masks: &MaskSequence,
    backbone: &dyn HookedBackbone,
    sched: &DiffusionSchedule,
    cfg: &StylizeConfig<'_>,
    content_trajectory: Option<&[LatentVideo]>,
    style_trajectory: Option<&[LatentVideo]>,
) -> Result<StylizeOutcome> {
    if style_noise.frames() != 1 {
        return Err(Error::shape("style latent must be a single frame".into()));
    }
    let points = sched.denoise_points();
    let t_total = points.len() - 1;
    if cfg.replay_from_cache {
        for (name, traj) in [
            ("content", &content_trajectory),
            ("style", &style_trajectory),
        ] {
            let len = traj.map(|t| t.len());
            if len != Some(t_total + 1) {
                return Err(Error::arg(format!(
                    "replay_from_cache needs a {name} trajectory of {} states",
                    t_total + 1
                )));
            }
        }
    }
    let hooked = cfg
        .hooked_layers
        .clone()
        .or_else(|| backbone.default_hooked_layers());

    let mut content = content_noise.clone();
    let mut style = style_noise.clone();
    let mut edited = content_noise.clone();
    let mut smoothing_seconds = 0.0;

    for j in 1..points.len() {
        let tp_src = points[j - 1];
        let tp_dst = points[j];
        let src_index = t_total - (j - 1);
        let dst_index = t_total - j;

        let mut content_cap = CaptureHook::default();
        let eps_content = backbone.forward_hooked(&content, tp_src, &mut content_cap)?;
        let mut style_cap = CaptureHook::default();
        let eps_style = backbone.forward_hooked(&style, tp_src, &mut style_cap)?;

        let eps_edited = if cfg.style.in_attention_window(src_index) {
            let mut hook = ShiftHook::new(
                &content_cap.packets,
                &style_cap.packets,
                &cfg.style,
                src_index,
                hooked.as_deref(),
            );
            backbone.forward_hooked(&edited, tp_src, &mut hook)?
        } else {
            backbone.forward_hooked(&edited, tp_src, &mut NoopHook)?
        };
        if eps_edited.tensor().shape() != edited.tensor().shape() {
            return Err(Error::shape("edited branch shape drift".into()));
        }

        content = if cfg.replay_from_cache {
            content_trajectory.unwrap()[dst_index].clone()
        } else {
            ddim_denoise_step(&content, &eps_content, tp_src, tp_dst, sched)?
        };
        style = if cfg.replay_from_cache {
            style_trajectory.unwrap()[dst_index].clone()
        } else {
            ddim_denoise_step(&style, &eps_style, tp_src, tp_dst, sched)?
        };
        edited = match &cfg.smoothing {
            Some(ctx) if ctx.active_at(src_index) => {
                let start = now();
                let out = smooth_step(&edited, &eps_edited, tp_src, tp_dst, src_index, ctx, sched)?;
                smoothing_seconds += elapsed(start);
                out
            }
            _ => ddim_denoise_step(&edited, &eps_edited, tp_src, tp_dst, sched)?,
        };

        edited = latent_shift(&edited, &style, dst_index, &cfg.style, cfg.adain_per_frame)?;
        edited = localized_blend(&edited, &content, masks)?;
    }

    Ok(StylizeOutcome {
        edited,
        content_final: content,
        smoothing_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn default_style_sched() -> StyleSchedule {
        StyleSchedule::from_config(&RunConfig::default())
    }

    fn seeded_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = crate::rng::substream(seed, crate::rng::Stream::BackboneWeights);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn packet(frames: usize, tokens: usize, seed: u64) -> AttentionPacket {
        AttentionPacket::new(
            seeded_tensor(vec![frames, 2, tokens, 3], seed),
            seeded_tensor(vec![frames, 2, tokens, 3], seed + 1),
            seeded_tensor(vec![frames, 2, tokens, 3], seed + 2),
        )
        .unwrap()
    }

    #[test]
    fn beta_ramp_endpoints_and_midpoint() {
        let sched = default_style_sched(); // window (20, 50), betas 0.1 / 0.9
        assert_eq!(beta_at(20, &sched).unwrap(), 0.1);
        assert_eq!(beta_at(50, &sched).unwrap(), 0.9);
        // t = 0.7T = 35 with defaults: 0.5
        assert!((beta_at(35, &sched).unwrap() - 0.5).abs() < 1e-12);
        // clamped outside
        assert_eq!(beta_at(0, &sched).unwrap(), 0.1);
        assert_eq!(beta_at(60, &sched).unwrap(), 0.9);
    }

    #[test]
    fn beta_ramp_degenerate_window_errors() {
        let mut sched = default_style_sched();
        sched.attention_window = (20, 20);
        let err = beta_at(20, &sched).unwrap_err().to_string();
        assert!(err.contains("degenerate ramp"), "{err}");
    }

    #[test]
    fn beta_nonincreasing_as_denoising_advances() {
        let sched = default_style_sched();
        let mut last = f64::INFINITY;
        for t in (1..=50).rev() {
            let b = beta_at(t, &sched).unwrap();
            assert!(b <= last + 1e-15);
            last = b;
        }
    }

    fn latent(shape: [usize; 4], seed: u64) -> LatentVideo {
        LatentVideo::new(seeded_tensor(shape.to_vec(), seed)).unwrap()
    }

    #[test]
    fn blend_endpoints() {
        let edited = latent([2, 3, 4, 4], 10);
        let content = latent([2, 3, 4, 4], 11);
        let ones = MaskSequence::new(2, 4, 4, vec![1; 32]).unwrap();
        let zeros = MaskSequence::zeros(2, 4, 4);
        assert_eq!(
            localized_blend(&edited, &content, &ones).unwrap(),
            content
        );
        assert_eq!(localized_blend(&edited, &content, &zeros).unwrap(), edited);
    }

    #[test]
    fn blend_partition_is_bitwise() {
        let edited = latent([2, 2, 3, 3], 20);
        let content = latent([2, 2, 3, 3], 21);
        let mut rng = crate::rng::substream(5, crate::rng::Stream::BackboneWeights);
        let mask_vals: Vec<u8> = (0..18).map(|_| rng.gen_range(0..2u8)).collect();
        let masks = MaskSequence::new(2, 3, 3, mask_vals.clone()).unwrap();
        let out = localized_blend(&edited, &content, &masks).unwrap();
        for f in 0..2 {
            for c in 0..2 {
                for y in 0..3 {
                    for x in 0..3 {
                        let idx = ((f * 2 + c) * 3 + y) * 3 + x;
                        let want = if masks.get(f, y, x) != 0 {
                            content.tensor().data()[idx]
                        } else {
                            edited.tensor().data()[idx]
                        };
                        assert!(out.tensor().data()[idx].to_bits() == want.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn latent_shift_identity_outside_window() {
        let sched = default_style_sched();
        let x = latent([2, 2, 3, 3], 31);
        let style = latent([1, 2, 3, 3], 32);
        let out = latent_shift(&x, &style, 40, &sched, false).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn latent_shift_matches_core_adain_in_window() {
        let sched = default_style_sched(); // latent window (5, 10)
        let x = latent([2, 2, 3, 3], 33);
        let style = latent([1, 2, 3, 3], 34);
        let out = latent_shift(&x, &style, 7, &sched, false).unwrap();
        let direct = adain(x.tensor(), style.tensor(), 1, &[0, 2, 3], ADAIN_EPS).unwrap();
        assert_eq!(out.tensor(), &direct);
    }

    #[test]
    fn latent_shift_two_channel_hand_case() {
        // One frame, 2 channels, 1x2 spatial; verified against the AdaIN
        // closed form by hand.
        let x = LatentVideo::new(
            Tensor::new(vec![1, 2, 1, 2], vec![0.0, 2.0, 5.0, 5.0]).unwrap(),
        )
        .unwrap();
        let style = LatentVideo::new(
            Tensor::new(vec![1, 2, 1, 2], vec![4.0, 8.0, 1.0, 3.0]).unwrap(),
        )
        .unwrap();
        let out = adain_video(&x, &style, false).unwrap();
        // channel 0: mean 1, std 1 -> style mean 6, std 2: [4, 8] (up to eps)
        assert!((out.tensor().data()[0] - 4.0).abs() < 1e-4);
        assert!((out.tensor().data()[1] - 8.0).abs() < 1e-4);
        // channel 1: constant content collapses to style mean 2
        assert!((out.tensor().data()[2] - 2.0).abs() < 1e-12);
        assert!((out.tensor().data()[3] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn attention_shift_beta_zero_is_kv_replacement() {
        let mut sched = default_style_sched();
        sched.beta_tau2 = 0.0;
        sched.beta_tau3 = 0.0;
        let edited = packet(2, 4, 40);
        let style = packet(1, 4, 50);
        let content_q = seeded_tensor(vec![2, 2, 4, 3], 60);
        let out = attention_shift(
            &BranchPackets {
                edited: &edited,
                content_q: &content_q,
                style_k: &style.k,
                style_v: &style.v,
            },
            30,
            &sched,
        )
        .unwrap();
        assert_eq!(out.k, tile_frames(&style.k, 2));
        assert_eq!(out.v, tile_frames(&style.v, 2));
    }

    #[test]
    fn attention_shift_beta_one_is_kv_adain() {
        let mut sched = default_style_sched();
        sched.beta_tau2 = 1.0;
        sched.beta_tau3 = 1.0;
        let edited = packet(2, 4, 41);
        let style = packet(1, 4, 51);
        let content_q = seeded_tensor(vec![2, 2, 4, 3], 61);
        let out = attention_shift(
            &BranchPackets {
                edited: &edited,
                content_q: &content_q,
                style_k: &style.k,
                style_v: &style.v,
            },
            30,
            &sched,
        )
        .unwrap();
        assert_eq!(out.k, adain_packet(&edited.k, &style.k).unwrap());
        assert_eq!(out.v, adain_packet(&edited.v, &style.v).unwrap());
    }

    #[test]
    fn attention_shift_gamma_one_keeps_query() {
        let mut sched = default_style_sched();
        sched.gamma = 1.0;
        let edited = packet(2, 4, 42);
        let style = packet(1, 4, 52);
        let content_q = seeded_tensor(vec![2, 2, 4, 3], 62);
        let out = attention_shift(
            &BranchPackets {
                edited: &edited,
                content_q: &content_q,
                style_k: &style.k,
                style_v: &style.v,
            },
            30,
            &sched,
        )
        .unwrap();
        assert_eq!(out.q, edited.q);
    }

    #[test]
    fn kv_adain_matches_style_moments_per_head_channel() {
        let edited = packet(3, 5, 43);
        let style = packet(1, 5, 53);
        let shifted = adain_packet(&edited.k, &style.k).unwrap();
        let folded_out = fold_heads(&shifted).unwrap();
        let folded_style = fold_heads(&style.k).unwrap();
        let mo = crate::tensor::channel_moments(&folded_out, 1, &[0]).unwrap();
        let ms = crate::tensor::channel_moments(&folded_style, 1, &[0]).unwrap();
        for c in 0..mo.channels() {
            assert!((mo.mean[c] - ms.mean[c]).abs() < 1e-6);
            assert!((mo.std[c] - ms.std[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_frame_token_layout() {
        let pkt = packet(3, 4, 70);
        let f0 = cross_frame_restructure(&pkt, 0).unwrap();
        assert_eq!(f0.key_tokens(), 4);
        assert_eq!(f0.k, frame_slice(&pkt.k, 0));

        let f1 = cross_frame_restructure(&pkt, 1).unwrap();
        assert_eq!(f1.key_tokens(), 8);
        // i = 2 in 1-based terms: first frame twice
        assert_eq!(
            f1.k,
            concat_tokens(&frame_slice(&pkt.k, 0), &frame_slice(&pkt.k, 0)).unwrap()
        );

        let f2 = cross_frame_restructure(&pkt, 2).unwrap();
        assert_eq!(f2.key_tokens(), 8);
        assert_eq!(
            f2.k,
            concat_tokens(&frame_slice(&pkt.k, 0), &frame_slice(&pkt.k, 1)).unwrap()
        );
    }

    #[test]
    fn shift_hook_requires_captures() {
        let sched = default_style_sched();
        let empty = BTreeMap::new();
        let mut hook = ShiftHook::new(&empty, &empty, &sched, 30, None);
        let err = hook.on_attention(0, packet(1, 4, 80)).unwrap_err();
        assert!(err.to_string().contains("missing content Q"), "{err}");
    }
}
