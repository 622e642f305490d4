//! Noise-predictor and latent-codec backends.
//!
//! Mock backends keep every algebraic contract testable at desk scale:
//! a constant predictor (exact round trips), a seeded z-independent
//! predictor, a small deterministic attention backbone with hookable
//! layers and a feature tap, and identity/orthogonal codecs. External
//! backends exchange NPY tensors through a request/response directory;
//! see `docs/backend-protocol.md`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::npy;
use crate::formats::{CodecSpec, PredictorSpec};
use crate::rng::{substream, Stream};
use crate::schedule::{Conditioning, LatentCodec, NoisePredictor};
use crate::style::{AttentionHook, AttentionPacket, HookResult, HookedBackbone, NoopHook};
use crate::tensor::Tensor;
use crate::video::{FeatureStack, LatentVideo, PixelVideo};

/// eps == value everywhere, independent of z and t.
pub struct ConstantPredictor {
    value: f64,
}

impl ConstantPredictor {
    pub fn new(value: f64) -> Self {
        ConstantPredictor { value }
    }
}

impl NoisePredictor for ConstantPredictor {
    fn predict(&self, z: &LatentVideo, _t: i64, _c: Conditioning) -> Result<LatentVideo> {
        LatentVideo::new(Tensor::filled(z.tensor().shape().to_vec(), self.value))
    }
}

/// Pseudo-random eps drawn from a per-timestep substream; independent of
/// z, so inversion/denoising round trips stay exact.
pub struct SeededPredictor {
    seed: u64,
}

impl SeededPredictor {
    pub fn new(seed: u64) -> Self {
        SeededPredictor { seed }
    }
}

impl NoisePredictor for SeededPredictor {
    fn predict(&self, z: &LatentVideo, t: i64, _c: Conditioning) -> Result<LatentVideo> {
        let stream = Stream::MockNoise {
            t: (t + 1).max(0) as u64,
        };
        let mut rng = substream(self.seed, stream);
        let data = (0..z.tensor().len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        LatentVideo::new(Tensor::new(z.tensor().shape().to_vec(), data)?)
    }
}

/// Deterministic two-layer attention backbone over pooled latent tokens.
///
/// Latents are average-pooled by `pool` in each spatial direction, run
/// through seeded linear Q/K/V projections, softmax attention (optionally
/// cross-frame restructured), and a residual out-projection; the result
/// is upsampled back to latent resolution as the noise prediction. The
/// final token grid doubles as the point-matching feature map.
pub struct MockBackbone {
    channels: usize,
    heads: usize,
    head_dim: usize,
    pool: usize,
    cross_frame: bool,
    layers: Vec<LayerWeights>,
}

struct LayerWeights {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
}

const BACKBONE_LAYERS: usize = 2;

impl MockBackbone {
    pub fn new(seed: u64, channels: usize, pool: usize, cross_frame: bool) -> Result<Self> {
        if channels == 0 || pool == 0 {
            return Err(Error::arg("backbone channels and pool must be positive"));
        }
        let heads = if channels % 2 == 0 { 2 } else { 1 };
        let mut rng = substream(seed, Stream::BackboneWeights);
        let scale = 1.0 / (channels as f64).sqrt();
        let mut matrix = || -> Vec<f64> {
            (0..channels * channels)
                .map(|_| rng.gen_range(-1.0..1.0) * scale)
                .collect()
        };
        let layers = (0..BACKBONE_LAYERS)
            .map(|_| LayerWeights {
                wq: matrix(),
                wk: matrix(),
                wv: matrix(),
                wo: matrix(),
            })
            .collect();
        Ok(MockBackbone {
            channels,
            heads,
            head_dim: channels / heads,
            pool,
            cross_frame,
            layers,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    fn check_shape(&self, z: &LatentVideo) -> Result<(usize, usize, usize)> {
        if z.channels() != self.channels {
            return Err(Error::shape(format!(
                "backbone built for {} channels, latent has {}",
                self.channels,
                z.channels()
            )));
        }
        if z.height() % self.pool != 0 || z.width() % self.pool != 0 {
            return Err(Error::shape(format!(
                "latent {}x{} not divisible by pool {}",
                z.height(),
                z.width(),
                self.pool
            )));
        }
        Ok((z.frames(), z.height() / self.pool, z.width() / self.pool))
    }

    /// Average-pool to tokens: (F, C, H, W) -> (F, hp*wp, C).
    fn pool_tokens(&self, z: &LatentVideo, hp: usize, wp: usize) -> Vec<f64> {
        let (f, c, h, w) = (z.frames(), z.channels(), z.height(), z.width());
        let data = z.tensor().data();
        let area = (self.pool * self.pool) as f64;
        let mut tokens = vec![0.0; f * hp * wp * c];
        for fi in 0..f {
            for ci in 0..c {
                for py in 0..hp {
                    for px in 0..wp {
                        let mut acc = 0.0;
                        for dy in 0..self.pool {
                            for dx in 0..self.pool {
                                let y = py * self.pool + dy;
                                let x = px * self.pool + dx;
                                acc += data[((fi * c + ci) * h + y) * w + x];
                            }
                        }
                        tokens[(fi * hp * wp + py * wp + px) * c + ci] = acc / area;
                    }
                }
            }
        }
        tokens
    }

    /// x (F, T, C) times a CxC matrix, viewed as (F, heads, T, dh).
    fn project(&self, x: &[f64], frames: usize, tokens: usize, w: &[f64]) -> Tensor {
        let c = self.channels;
        let (heads, dh) = (self.heads, self.head_dim);
        let mut out = vec![0.0; frames * tokens * c];
        for fi in 0..frames {
            for ti in 0..tokens {
                let row = &x[(fi * tokens + ti) * c..(fi * tokens + ti + 1) * c];
                for o in 0..c {
                    let mut acc = 0.0;
                    for (i, &v) in row.iter().enumerate() {
                        acc += w[o * c + i] * v;
                    }
                    let (hi, di) = (o / dh, o % dh);
                    out[(((fi * heads + hi) * tokens) + ti) * dh + di] = acc;
                }
            }
        }
        Tensor::new(vec![frames, heads, tokens, dh], out).expect("sized")
    }

    /// Softmax attention for one packet; Q and K/V must agree on frames.
    /// Output is (F, Tq, C) with heads concatenated.
    fn attend(&self, pkt: &AttentionPacket) -> Result<Vec<f64>> {
        let frames = pkt.frames();
        let (heads, dh) = (pkt.heads(), pkt.head_dim());
        let tq = pkt.query_tokens();
        let tk = pkt.key_tokens();
        if heads != self.heads || dh != self.head_dim {
            return Err(Error::shape("packet heads/dim drifted from backbone".into()));
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, k, v) = (pkt.q.data(), pkt.k.data(), pkt.v.data());
        let c = heads * dh;
        let mut out = vec![0.0; frames * tq * c];
        let mut scores = vec![0.0; tk];
        for fi in 0..frames {
            for hi in 0..heads {
                let qbase = ((fi * heads + hi) * tq) * dh;
                let kbase = ((fi * heads + hi) * tk) * dh;
                for qi in 0..tq {
                    let qrow = &q[qbase + qi * dh..qbase + (qi + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for ki in 0..tk {
                        let krow = &k[kbase + ki * dh..kbase + (ki + 1) * dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        let s = dot * scale;
                        scores[ki] = s;
                        max = max.max(s);
                    }
                    let mut denom = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    for di in 0..dh {
                        let mut acc = 0.0;
                        for ki in 0..tk {
                            acc += scores[ki] * v[kbase + ki * dh + di];
                        }
                        out[(fi * tq + qi) * c + hi * dh + di] = acc / denom;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Full forward pass; returns the noise prediction and final tokens
    /// as a feature stack (F, hp, wp, C).
    fn forward(
        &self,
        z: &LatentVideo,
        t: i64,
        hook: &mut dyn AttentionHook,
    ) -> Result<(LatentVideo, FeatureStack)> {
        let (frames, hp, wp) = self.check_shape(z)?;
        let tokens = hp * wp;
        let c = self.channels;
        let mut x = self.pool_tokens(z, hp, wp);
        let bias = 1e-3 * (((t + 1) as f64).sin());
        for v in &mut x {
            *v += bias;
        }

        for (layer, w) in self.layers.iter().enumerate() {
            let pkt = AttentionPacket::new(
                self.project(&x, frames, tokens, &w.wq),
                self.project(&x, frames, tokens, &w.wk),
                self.project(&x, frames, tokens, &w.wv),
            )?;
            let attn = match hook.on_attention(layer, pkt)? {
                HookResult::Shifted(p) => {
                    if p.frames() != frames || p.query_tokens() != tokens {
                        return Err(Error::shape("shifted packet layout mismatch".into()));
                    }
                    self.attend(&p)?
                }
                HookResult::Unchanged(p) => {
                    if self.cross_frame {
                        let mut rows = vec![0.0; frames * tokens * c];
                        for fi in 0..frames {
                            let fp = crate::style::cross_frame_restructure(&p, fi)?;
                            let frame_out = self.attend(&fp)?;
                            rows[fi * tokens * c..(fi + 1) * tokens * c]
                                .copy_from_slice(&frame_out);
                        }
                        rows
                    } else {
                        self.attend(&p)?
                    }
                }
            };
            // residual out-projection
            for fi in 0..frames {
                for ti in 0..tokens {
                    let row = &attn[(fi * tokens + ti) * c..(fi * tokens + ti + 1) * c];
                    for o in 0..c {
                        let mut acc = 0.0;
                        for (i, &v) in row.iter().enumerate() {
                            acc += w.wo[o * c + i] * v;
                        }
                        x[(fi * tokens + ti) * c + o] += acc;
                    }
                }
            }
        }

        // features: (F, hp, wp, C) view of the final tokens
        let features = FeatureStack::new(Tensor::new(vec![frames, hp, wp, c], x.clone())?)?;

        // eps: tokens back to channel-major, nearest-upsampled
        let (h, w_full) = (z.height(), z.width());
        let mut eps = vec![0.0; frames * c * h * w_full];
        for fi in 0..frames {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w_full {
                        let token = (y / self.pool) * wp + xx / self.pool;
                        eps[((fi * c + ci) * h + y) * w_full + xx] =
                            x[(fi * tokens + token) * c + ci];
                    }
                }
            }
        }
        Ok((
            LatentVideo::new(Tensor::new(vec![frames, c, h, w_full], eps)?)?,
            features,
        ))
    }
}

impl NoisePredictor for MockBackbone {
    fn predict(&self, z: &LatentVideo, t: i64, _c: Conditioning) -> Result<LatentVideo> {
        Ok(self.forward(z, t, &mut NoopHook)?.0)
    }

    fn predict_with_features(
        &self,
        z: &LatentVideo,
        t: i64,
        _c: Conditioning,
    ) -> Result<(LatentVideo, Option<FeatureStack>)> {
        let (eps, features) = self.forward(z, t, &mut NoopHook)?;
        Ok((eps, Some(features)))
    }
}

impl HookedBackbone for MockBackbone {
    fn forward_hooked(
        &self,
        z: &LatentVideo,
        t: i64,
        hook: &mut dyn AttentionHook,
    ) -> Result<LatentVideo> {
        Ok(self.forward(z, t, hook)?.0)
    }

    fn default_hooked_layers(&self) -> Option<Vec<usize>> {
        // the up-sampling half of the stack
        Some((self.layers.len() / 2..self.layers.len()).collect())
    }
}

/// Pure axis transpose: (F, C, H, W) <-> (F, H, W, C). Bitwise
/// invertible.
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn decode(&self, z: &LatentVideo) -> Result<PixelVideo> {
        let (f, c, h, w) = (z.frames(), z.channels(), z.height(), z.width());
        let src = z.tensor().data();
        let mut out = vec![0.0; src.len()];
        for fi in 0..f {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[((fi * h + y) * w + x) * c + ci] = src[((fi * c + ci) * h + y) * w + x];
                    }
                }
            }
        }
        PixelVideo::new(Tensor::new(vec![f, h, w, c], out)?)
    }

    fn encode(&self, p: &PixelVideo) -> Result<LatentVideo> {
        let (f, h, w, c) = (p.frames(), p.height(), p.width(), p.channels());
        let src = p.tensor().data();
        let mut out = vec![0.0; src.len()];
        for fi in 0..f {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[((fi * c + ci) * h + y) * w + x] = src[((fi * h + y) * w + x) * c + ci];
                    }
                }
            }
        }
        LatentVideo::new(Tensor::new(vec![f, c, h, w], out)?)
    }
}

/// Seeded Householder channel mixing on top of the transpose. The mixing
/// matrix is symmetric orthogonal, so encode and decode use the same
/// coefficients and compose to the identity up to rounding.
pub struct OrthogonalCodec {
    seed: u64,
}

impl OrthogonalCodec {
    pub fn new(seed: u64) -> Self {
        OrthogonalCodec { seed }
    }

    /// Q = I - 2 v v^T / (v^T v) for a seeded vector v.
    fn mixing(&self, c: usize) -> Vec<f64> {
        let mut rng = substream(self.seed, Stream::CodecMixing);
        let v: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        let mut q = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let id = if i == j { 1.0 } else { 0.0 };
                q[i * c + j] = id - 2.0 * v[i] * v[j] / norm2;
            }
        }
        q
    }
}

impl LatentCodec for OrthogonalCodec {
    fn decode(&self, z: &LatentVideo) -> Result<PixelVideo> {
        let (f, c, h, w) = (z.frames(), z.channels(), z.height(), z.width());
        let q = self.mixing(c);
        let src = z.tensor().data();
        let mut out = vec![0.0; src.len()];
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    for co in 0..c {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            acc += q[co * c + ci] * src[((fi * c + ci) * h + y) * w + x];
                        }
                        out[((fi * h + y) * w + x) * c + co] = acc;
                    }
                }
            }
        }
        PixelVideo::new(Tensor::new(vec![f, h, w, c], out)?)
    }

    fn encode(&self, p: &PixelVideo) -> Result<LatentVideo> {
        let (f, h, w, c) = (p.frames(), p.height(), p.width(), p.channels());
        let q = self.mixing(c);
        let src = p.tensor().data();
        let mut out = vec![0.0; src.len()];
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    for co in 0..c {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            acc += q[co * c + ci] * src[((fi * h + y) * w + x) * c + ci];
                        }
                        out[((fi * c + co) * h + y) * w + x] = acc;
                    }
                }
            }
        }
        LatentVideo::new(Tensor::new(vec![f, c, h, w], out)?)
    }
}

// ---------------------------------------------------------------------------
// External directory protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RequestMeta {
    op: String,
    #[serde(default)]
    t: i64,
    #[serde(default)]
    want_features: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResponseMeta {
    ok: bool,
    #[serde(default)]
    error: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct HookMeta {
    layer: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct HookResponseMeta {
    shifted: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_vec_pretty(value).expect("meta serializes");
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&body).map_err(|e| Error::format(path, e.to_string()))
}

/// Out-of-process backend exchanging tensors through a directory. One
/// client per directory; requests are sequenced by an atomic counter.
pub struct ExternalBackend {
    dir: PathBuf,
    timeout: Duration,
    poll: Duration,
    seq: AtomicU64,
}

impl ExternalBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ExternalBackend {
            dir: dir.into(),
            timeout: Duration::from_secs(30),
            poll: Duration::from_millis(2),
            seq: AtomicU64::new(0),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn roundtrip(
        &self,
        meta: &RequestMeta,
        input: &Tensor,
        hook: &mut dyn AttentionHook,
    ) -> Result<(Tensor, Option<Tensor>)> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);

        // payload first, meta last: the meta file is the commit marker
        npy::write_tensor(input, self.dir.join(format!("req-{seq:06}-input.npy")))?;
        write_json(&self.dir.join(format!("req-{seq:06}.json")), meta)?;

        let deadline = std::time::Instant::now() + self.timeout;
        let mut hook_ord = 0u64;
        loop {
            let resp_meta_path = self.dir.join(format!("resp-{seq:06}.json"));
            if resp_meta_path.exists() {
                let resp: ResponseMeta = read_json(&resp_meta_path)?;
                if !resp.ok {
                    return Err(Error::Backend(format!("external backend: {}", resp.error)));
                }
                let output = npy::read_tensor(
                    self.dir.join(format!("resp-{seq:06}-output.npy")),
                )?;
                let features_path = self.dir.join(format!("resp-{seq:06}-features.npy"));
                let features = if meta.want_features && features_path.exists() {
                    Some(npy::read_tensor(&features_path)?)
                } else {
                    None
                };
                self.cleanup(seq);
                return Ok((output, features));
            }

            let hook_meta_path = self.dir.join(format!("hook-{seq:06}-{hook_ord:04}.json"));
            if hook_meta_path.exists() {
                let hm: HookMeta = read_json(&hook_meta_path)?;
                let load = |part: &str| {
                    npy::read_tensor(self.dir.join(format!("hook-{seq:06}-{hook_ord:04}-{part}.npy")))
                };
                let pkt = AttentionPacket::new(load("q")?, load("k")?, load("v")?)?;
                let (shifted, out) = match hook.on_attention(hm.layer, pkt)? {
                    HookResult::Shifted(p) => (true, p),
                    HookResult::Unchanged(p) => (false, p),
                };
                let save = |part: &str, t: &Tensor| {
                    npy::write_tensor(
                        t,
                        self.dir
                            .join(format!("hookresp-{seq:06}-{hook_ord:04}-{part}.npy")),
                    )
                };
                save("q", &out.q)?;
                save("k", &out.k)?;
                save("v", &out.v)?;
                write_json(
                    &self.dir.join(format!("hookresp-{seq:06}-{hook_ord:04}.json")),
                    &HookResponseMeta { shifted },
                )?;
                hook_ord += 1;
            }

            if std::time::Instant::now() > deadline {
                return Err(Error::Backend(format!(
                    "external backend at {} timed out after {:?}",
                    self.dir.display(),
                    self.timeout
                )));
            }
            std::thread::sleep(self.poll);
        }
    }

    fn cleanup(&self, seq: u64) {
        if let Ok(entries) = std::fs::read_dir(&self.dir) {
            let tag = format!("-{seq:06}");
            for entry in entries.flatten() {
                let p = entry.path();
                if let Some(stem) = p.file_name().and_then(|s| s.to_str()) {
                    if stem.contains(&tag) {
                        let _ = std::fs::remove_file(&p);
                    }
                }
            }
        }
    }
}

impl NoisePredictor for ExternalBackend {
    fn predict(&self, z: &LatentVideo, t: i64, _c: Conditioning) -> Result<LatentVideo> {
        let meta = RequestMeta {
            op: "predict".into(),
            t,
            want_features: false,
        };
        let (out, _) = self.roundtrip(&meta, z.tensor(), &mut NoopHook)?;
        LatentVideo::new(out)
    }

    fn predict_with_features(
        &self,
        z: &LatentVideo,
        t: i64,
        _c: Conditioning,
    ) -> Result<(LatentVideo, Option<FeatureStack>)> {
        let meta = RequestMeta {
            op: "predict".into(),
            t,
            want_features: true,
        };
        let (out, features) = self.roundtrip(&meta, z.tensor(), &mut NoopHook)?;
        let features = features.map(FeatureStack::new).transpose()?;
        Ok((LatentVideo::new(out)?, features))
    }
}

impl HookedBackbone for ExternalBackend {
    fn forward_hooked(
        &self,
        z: &LatentVideo,
        t: i64,
        hook: &mut dyn AttentionHook,
    ) -> Result<LatentVideo> {
        let meta = RequestMeta {
            op: "predict".into(),
            t,
            want_features: false,
        };
        let (out, _) = self.roundtrip(&meta, z.tensor(), hook)?;
        LatentVideo::new(out)
    }
}

impl LatentCodec for ExternalBackend {
    fn decode(&self, z: &LatentVideo) -> Result<PixelVideo> {
        let meta = RequestMeta {
            op: "decode".into(),
            t: 0,
            want_features: false,
        };
        let (out, _) = self.roundtrip(&meta, z.tensor(), &mut NoopHook)?;
        PixelVideo::new(out)
    }

    fn encode(&self, p: &PixelVideo) -> Result<LatentVideo> {
        let meta = RequestMeta {
            op: "encode".into(),
            t: 0,
            want_features: false,
        };
        let (out, _) = self.roundtrip(&meta, p.tensor(), &mut NoopHook)?;
        LatentVideo::new(out)
    }
}

/// Instantiate any predictor kind.
pub fn build_predictor(
    spec: &PredictorSpec,
    seed: u64,
    channels: usize,
) -> Result<Box<dyn NoisePredictor>> {
    Ok(match spec {
        PredictorSpec::Constant { value } => Box::new(ConstantPredictor::new(*value)),
        PredictorSpec::Seeded => Box::new(SeededPredictor::new(seed)),
        PredictorSpec::Backbone { pool, cross_frame } => {
            Box::new(MockBackbone::new(seed, channels, *pool, *cross_frame)?)
        }
        PredictorSpec::External { dir } => Box::new(ExternalBackend::new(dir.clone())),
    })
}

/// Instantiate a predictor with hookable attention; constant and seeded
/// predictors have none.
pub fn build_backbone(
    spec: &PredictorSpec,
    seed: u64,
    channels: usize,
) -> Result<Box<dyn HookedBackbone>> {
    match spec {
        PredictorSpec::Backbone { pool, cross_frame } => Ok(Box::new(MockBackbone::new(
            seed,
            channels,
            *pool,
            *cross_frame,
        )?)),
        PredictorSpec::External { dir } => Ok(Box::new(ExternalBackend::new(dir.clone()))),
        other => Err(Error::Backend(format!(
            "predictor {other:?} has no attention hooks; stylization needs a backbone"
        ))),
    }
}

pub fn build_codec(spec: &CodecSpec, seed: u64) -> Result<Box<dyn LatentCodec>> {
    Ok(match spec {
        CodecSpec::Identity => Box::new(IdentityCodec),
        CodecSpec::Orthogonal => Box::new(OrthogonalCodec::new(seed)),
        CodecSpec::External { dir } => Box::new(ExternalBackend::new(dir.clone())),
    })
}
