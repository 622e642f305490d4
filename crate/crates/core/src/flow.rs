//! Optical flow estimation, occlusion-aware warping, and the
//! sliding-window consistent smoothing step folded into denoising.
//!
//! Flow fields follow the Middlebury convention: `u` is horizontal
//! displacement in pixels (positive right), `v` vertical (positive
//! down), both in the forward direction of the pair.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::schedule::{ddim_denoise_step, predicted_z0, refine_noise, DiffusionSchedule, LatentCodec};
use crate::tensor::{bilinear_sample, Tensor};
use crate::video::{LatentVideo, PixelVideo};

/// Dense displacement field with a derived occlusion map.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    occlusion: Vec<u8>,
}

impl FlowField {
    pub fn zero(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
            occlusion: vec![0; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        FlowField {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
            occlusion: vec![0; height * width],
        }
    }

    pub fn with_occlusion(
        height: usize,
        width: usize,
        u: Vec<f64>,
        v: Vec<f64>,
        occlusion: Vec<u8>,
    ) -> Result<Self> {
        let n = height * width;
        if u.len() != n || v.len() != n || occlusion.len() != n {
            return Err(Error::shape(format!(
                "flow field {height}x{width} wants {n} entries"
            )));
        }
        Ok(FlowField {
            height,
            width,
            u,
            v,
            occlusion,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn u_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }

    pub fn v_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }

    pub fn occlusion(&self) -> &[u8] {
        &self.occlusion
    }

    pub fn set_occlusion(&mut self, occlusion: Vec<u8>) -> Result<()> {
        if occlusion.len() != self.height * self.width {
            return Err(Error::shape("occlusion map size mismatch".into()));
        }
        self.occlusion = occlusion;
        Ok(())
    }

    pub fn mean_flow(&self) -> (f64, f64) {
        let n = (self.height * self.width) as f64;
        (
            self.u.iter().sum::<f64>() / n,
            self.v.iter().sum::<f64>() / n,
        )
    }
}

fn grayscale(frame: &Tensor) -> Vec<f64> {
    let (h, w, c) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let mut g = Vec::with_capacity(h * w);
    for px in 0..h * w {
        let base = px * c;
        g.push(frame.data()[base..base + c].iter().sum::<f64>() / c as f64);
    }
    g
}

/// Horn-Schunck flow from `a` to `b`. `lambda` is the smoothness weight
/// in the update denominator; the Jacobi iteration is deterministic.
pub fn estimate_flow_hs(a: &Tensor, b: &Tensor, lambda: f64, iters: usize) -> Result<FlowField> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "flow frames {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rank() != 3 {
        return Err(Error::shape("flow frames must be HxWxC".into()));
    }
    if lambda <= 0.0 {
        return Err(Error::arg("smoothness weight must be positive"));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let g1 = grayscale(a);
    let g2 = grayscale(b);

    let at = |g: &[f64], y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        g[y * w + x]
    };

    // Derivatives over the 2x2x2 cube of the classic formulation.
    let mut ix = vec![0.0; h * w];
    let mut iy = vec![0.0; h * w];
    let mut it = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            ix[i] = 0.25
                * (at(&g1, y, x + 1) - at(&g1, y, x)
                    + at(&g1, y + 1, x + 1)
                    - at(&g1, y + 1, x)
                    + at(&g2, y, x + 1)
                    - at(&g2, y, x)
                    + at(&g2, y + 1, x + 1)
                    - at(&g2, y + 1, x));
            iy[i] = 0.25
                * (at(&g1, y + 1, x) - at(&g1, y, x)
                    + at(&g1, y + 1, x + 1)
                    - at(&g1, y, x + 1)
                    + at(&g2, y + 1, x)
                    - at(&g2, y, x)
                    + at(&g2, y + 1, x + 1)
                    - at(&g2, y, x + 1));
            it[i] = 0.25
                * (at(&g2, y, x) - at(&g1, y, x) + at(&g2, y, x + 1) - at(&g1, y, x + 1)
                    + at(&g2, y + 1, x)
                    - at(&g1, y + 1, x)
                    + at(&g2, y + 1, x + 1)
                    - at(&g1, y + 1, x + 1));
        }
    }

    let mut u = vec![0.0; h * w];
    let mut v = vec![0.0; h * w];
    let mut u_next = vec![0.0; h * w];
    let mut v_next = vec![0.0; h * w];

    let average = |f: &[f64], y: isize, x: isize| {
        let c4 = at(f, y - 1, x) + at(f, y + 1, x) + at(f, y, x - 1) + at(f, y, x + 1);
        let cd = at(f, y - 1, x - 1) + at(f, y - 1, x + 1) + at(f, y + 1, x - 1) + at(f, y + 1, x + 1);
        c4 / 6.0 + cd / 12.0
    };

    for _ in 0..iters {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = y as usize * w + x as usize;
                let ubar = average(&u, y, x);
                let vbar = average(&v, y, x);
                let num = ix[i] * ubar + iy[i] * vbar + it[i];
                let den = lambda + ix[i] * ix[i] + iy[i] * iy[i];
                u_next[i] = ubar - ix[i] * num / den;
                v_next[i] = vbar - iy[i] * num / den;
            }
        }
        std::mem::swap(&mut u, &mut u_next);
        std::mem::swap(&mut v, &mut v_next);
    }

    Ok(FlowField {
        height: h,
        width: w,
        u,
        v,
        occlusion: vec![0; h * w],
    })
}

fn sample_flow(flow: &FlowField, x: f64, y: f64) -> (f64, f64) {
    let (h, w) = (flow.height, flow.width);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let lerp = |f: &[f64]| {
        let top = f[y0 * w + x0] * (1.0 - fx) + f[y0 * w + x1] * fx;
        let bot = f[y1 * w + x0] * (1.0 - fx) + f[y1 * w + x1] * fx;
        top * (1.0 - fy) + bot * fy
    };
    (lerp(&flow.u), lerp(&flow.v))
}

/// Forward-backward consistency occlusion test: `x` is occluded when
/// `|fwd(x) + bwd(x + fwd(x))|^2 > 0.01 * (|fwd(x)|^2 + |bwd(...)|^2) + 0.5`.
pub fn occlusion_mask(fwd: &FlowField, bwd: &FlowField) -> Result<Vec<u8>> {
    if (fwd.height, fwd.width) != (bwd.height, bwd.width) {
        return Err(Error::shape("bidirectional flow size mismatch".into()));
    }
    let (h, w) = (fwd.height, fwd.width);
    let mut occ = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (fu, fv) = (fwd.u[i], fwd.v[i]);
            let (bu, bv) = sample_flow(bwd, x as f64 + fu, y as f64 + fv);
            let err = (fu + bu) * (fu + bu) + (fv + bv) * (fv + bv);
            let mag = fu * fu + fv * fv + bu * bu + bv * bv;
            if err > 0.01 * mag + 0.5 {
                occ[i] = 1;
            }
        }
    }
    Ok(occ)
}

/// Backward-warp `b` onto `a`'s geometry with the a->b flow. Occluded
/// positions fall back to `a`'s own content.
pub fn warp(a: &Tensor, b: &Tensor, flow: &FlowField) -> Result<Tensor> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::shape(format!(
            "warp frames {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if (flow.height, flow.width) != (h, w) {
        return Err(Error::shape(format!(
            "flow {}x{} does not match frame {}x{}",
            flow.height, flow.width, h, w
        )));
    }
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let base = i * c;
            if flow.occlusion[i] != 0 {
                out[base..base + c].copy_from_slice(&a.data()[base..base + c]);
            } else {
                let sampled = bilinear_sample(b, x as f64 + flow.u[i], y as f64 + flow.v[i]);
                out[base..base + c].copy_from_slice(&sampled);
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Provider of pairwise flow (with derived occlusion) for a video.
pub trait FlowSource {
    fn flow(&self, from: usize, to: usize, frames: &PixelVideo) -> Result<FlowField>;
}

/// Zero flow everywhere; the identity-smoothing reference source.
pub struct ZeroFlowSource;

impl FlowSource for ZeroFlowSource {
    fn flow(&self, _from: usize, _to: usize, frames: &PixelVideo) -> Result<FlowField> {
        Ok(FlowField::zero(frames.height(), frames.width()))
    }
}

/// Internal Horn-Schunck estimator; occlusion from bidirectional
/// consistency.
pub struct HornSchunckSource {
    pub lambda: f64,
    pub iters: usize,
}

impl Default for HornSchunckSource {
    fn default() -> Self {
        HornSchunckSource {
            lambda: 0.1,
            iters: 200,
        }
    }
}

impl FlowSource for HornSchunckSource {
    fn flow(&self, from: usize, to: usize, frames: &PixelVideo) -> Result<FlowField> {
        let a = frames.frame(from);
        let b = frames.frame(to);
        let mut fwd = estimate_flow_hs(&a, &b, self.lambda, self.iters)?;
        let bwd = estimate_flow_hs(&b, &a, self.lambda, self.iters)?;
        let occ = occlusion_mask(&fwd, &bwd)?;
        fwd.set_occlusion(occ)?;
        Ok(fwd)
    }
}

/// Precomputed `.flo` files named `fwd_%05d_%05d.flo` / `bwd_%05d_%05d.flo`
/// for ordered pairs (i < j): `fwd` carries i->j, `bwd` carries j->i.
pub struct FloDirectorySource {
    pub dir: PathBuf,
}

impl FloDirectorySource {
    fn pair_paths(&self, from: usize, to: usize) -> (PathBuf, PathBuf) {
        if from < to {
            (
                self.dir.join(format!("fwd_{from:05}_{to:05}.flo")),
                self.dir.join(format!("bwd_{from:05}_{to:05}.flo")),
            )
        } else {
            (
                self.dir.join(format!("bwd_{to:05}_{from:05}.flo")),
                self.dir.join(format!("fwd_{to:05}_{from:05}.flo")),
            )
        }
    }
}

impl FlowSource for FloDirectorySource {
    fn flow(&self, from: usize, to: usize, _frames: &PixelVideo) -> Result<FlowField> {
        let (fwd_path, bwd_path) = self.pair_paths(from, to);
        let mut fwd = crate::formats::read_flo(&fwd_path)?;
        let bwd = crate::formats::read_flo(&bwd_path)?;
        let consistency = occlusion_mask(&fwd, &bwd)?;
        // Unknown-flow sentinels from the file stay occluded.
        let merged = fwd
            .occlusion
            .iter()
            .zip(&consistency)
            .map(|(&a, &b)| a | b)
            .collect();
        fwd.set_occlusion(merged)?;
        Ok(fwd)
    }
}

/// Fixed per-pair fields, for tests and hand-built cases.
pub struct PrecomputedFlowSource {
    pub fields: BTreeMap<(usize, usize), FlowField>,
}

impl FlowSource for PrecomputedFlowSource {
    fn flow(&self, from: usize, to: usize, _frames: &PixelVideo) -> Result<FlowField> {
        self.fields
            .get(&(from, to))
            .cloned()
            .ok_or_else(|| Error::arg(format!("no precomputed flow for pair ({from}, {to})")))
    }
}

/// Memoizes an inner source by frame pair. With `reflow_each_step` off,
/// the pipeline computes flow once on the first smoothed step's decoded
/// frames and reuses it for the rest of the run.
pub struct CachedFlowSource<'a> {
    inner: &'a dyn FlowSource,
    cache: RefCell<BTreeMap<(usize, usize), FlowField>>,
}

impl<'a> CachedFlowSource<'a> {
    pub fn new(inner: &'a dyn FlowSource) -> Self {
        CachedFlowSource {
            inner,
            cache: RefCell::new(BTreeMap::new()),
        }
    }
}

impl FlowSource for CachedFlowSource<'_> {
    fn flow(&self, from: usize, to: usize, frames: &PixelVideo) -> Result<FlowField> {
        if let Some(f) = self.cache.borrow().get(&(from, to)) {
            return Ok(f.clone());
        }
        let f = self.inner.flow(from, to, frames)?;
        self.cache.borrow_mut().insert((from, to), f.clone());
        Ok(f)
    }
}

/// Sequential in-place sliding-window smoothing: each frame becomes the
/// mean of itself and its warped neighbors within `half_window`; frames
/// already smoothed feed later windows; border windows divide by the
/// actual member count.
pub fn sliding_window_smooth(
    frames: &PixelVideo,
    half_window: usize,
    source: &dyn FlowSource,
) -> Result<PixelVideo> {
    let n = frames.frames();
    let mut buf = frames.clone();
    if half_window == 0 || n <= 1 {
        return Ok(buf);
    }
    for i in 0..n {
        let lo = i.saturating_sub(half_window);
        let hi = (i + half_window).min(n - 1);
        let current = buf.frame(i);
        let mut acc = Tensor::zeros(current.shape().to_vec());
        let mut members = 0usize;
        for j in lo..=hi {
            let contrib = if j == i {
                current.clone()
            } else {
                let flow = source.flow(i, j, &buf)?;
                warp(&current, &buf.frame(j), &flow)?
            };
            acc = acc.add(&contrib)?;
            members += 1;
        }
        let mean = acc.scale(1.0 / members as f64);
        buf.set_frame(i, &mean)?;
    }
    Ok(buf)
}

/// Everything a smoothing-aware denoise transition needs besides the
/// scheduler state.
pub struct SmoothingContext<'a> {
    pub codec: &'a dyn LatentCodec,
    pub source: &'a dyn FlowSource,
    pub half_window: usize,
    /// Resolved [tau4, tau5] in step-index units (1..=T scale).
    pub window: (usize, usize),
}

impl SmoothingContext<'_> {
    pub fn active_at(&self, step_index: usize) -> bool {
        self.window.0 <= step_index && step_index <= self.window.1
    }
}

/// One denoise transition with sliding-window smoothing folded in when
/// `step_index` lies inside the smoothing window; outside it this is
/// exactly [`ddim_denoise_step`].
///
/// Inside the window: the clean estimate is decoded, smoothed in pixel
/// space, re-encoded, the noise re-derived from it, and the DDIM update
/// applied to the pair.
pub fn smooth_step(
    z_t: &LatentVideo,
    eps: &LatentVideo,
    t: i64,
    t_prev: i64,
    step_index: usize,
    ctx: &SmoothingContext<'_>,
    sched: &DiffusionSchedule,
) -> Result<LatentVideo> {
    if !ctx.active_at(step_index) {
        return ddim_denoise_step(z_t, eps, t, t_prev, sched);
    }
    let z0 = predicted_z0(z_t, eps, t, sched)?;
    let pixels = ctx.codec.decode(&z0)?;
    let smoothed = sliding_window_smooth(&pixels, ctx.half_window, ctx.source)?;
    let zbar = ctx.codec.encode(&smoothed)?;
    let eps_bar = refine_noise(z_t, &zbar, t, sched)?;
    let a_prev = sched.alpha_bar(t_prev)?;
    let out = zbar
        .tensor()
        .lerp_with(eps_bar.tensor(), a_prev.sqrt(), (1.0 - a_prev).sqrt())?;
    LatentVideo::new(out)
}
