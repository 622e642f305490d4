//! Deterministic synthetic inputs: smooth periodic feature grids whose
//! cosine-similarity structure decays with spatial distance, circular
//! translation sequences, and block masks. Shared by the test suites and
//! the browser demo.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::video::{FeatureStack, MaskSequence};

/// Feature-generator parameters. The defaults give a similarity kernel
/// close to a wrapped Gaussian with one-pixel width, which makes
/// nearest-feature matching behave like nearest-position matching.
#[derive(Debug, Clone, Copy)]
pub struct FeatureParams {
    /// Number of cosine/sine frequency pairs (depth is twice this).
    pub pairs: usize,
    /// Spatial width (in pixels) of the similarity kernel.
    pub sigma: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            pairs: 16,
            sigma: 1.0,
        }
    }
}

/// Integer frequency pairs with Gaussian-ish weights, drawn from a fixed
/// stream so the kernel is the same for every run.
fn frequency_basis(h: usize, w: usize, p: FeatureParams) -> Vec<(f64, f64, f64, f64)> {
    // target kernel width sigma px <-> frequency std n/(2*pi*sigma)
    let sf_y = h as f64 / (2.0 * std::f64::consts::PI * p.sigma);
    let sf_x = w as f64 / (2.0 * std::f64::consts::PI * p.sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ba515);
    let mut basis = Vec::with_capacity(p.pairs);
    for _ in 0..p.pairs {
        // Box-Muller on uniform draws keeps this dependency-free
        let (u1, u2): (f64, f64) = (rng.gen_range(1e-9..1.0), rng.gen_range(0.0..1.0));
        let mag = (-2.0 * u1.ln()).sqrt();
        let (gy, gx) = (
            mag * (2.0 * std::f64::consts::PI * u2).cos(),
            mag * (2.0 * std::f64::consts::PI * u2).sin(),
        );
        let ky = (gy * sf_y).round();
        let kx = (gx * sf_x).round();
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let weight = (-(ky / sf_y).powi(2) / 2.0 - (kx / sf_x).powi(2) / 2.0).exp();
        basis.push((ky, kx, phase, weight));
    }
    basis
}

/// Feature vector of grid position (y, x) under the periodic basis.
fn feature_at(y: f64, x: f64, h: usize, w: usize, basis: &[(f64, f64, f64, f64)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(basis.len() * 2);
    for &(ky, kx, phase, weight) in basis {
        let arg = std::f64::consts::TAU * (ky * y / h as f64 + kx * x / w as f64) + phase;
        out.push(weight * arg.cos());
        out.push(weight * arg.sin());
    }
    out
}

/// A stack of frames where frame i is frame 0 circularly shifted down by
/// `i * dy` rows and right by `i * dx` columns.
pub fn translating_features(
    frames: usize,
    h: usize,
    w: usize,
    dy: usize,
    dx: usize,
    params: FeatureParams,
) -> FeatureStack {
    let basis = frequency_basis(h, w, params);
    let d = params.pairs * 2;
    let mut data = Vec::with_capacity(frames * h * w * d);
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                // content of frame f at (y, x) came from (y - f*dy, x - f*dx)
                let sy = (y + f * (h - dy % h)) % h;
                let sx = (x + f * (w - dx % w)) % w;
                data.extend(feature_at(sy as f64, sx as f64, h, w, &basis));
            }
        }
    }
    FeatureStack::new(Tensor::new(vec![frames, h, w, d], data).expect("sized")).expect("rank 4")
}

/// Square block mask at (y0, x0).
pub fn block_mask(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Vec<u8> {
    let mut m = vec![0u8; h * w];
    for y in y0..(y0 + side).min(h) {
        for x in x0..(x0 + side).min(w) {
            m[y * w + x] = 1;
        }
    }
    m
}

/// Ground truth for [`translating_features`]: the first mask circularly
/// shifted along with the content.
pub fn translated_masks(
    first: &[u8],
    frames: usize,
    h: usize,
    w: usize,
    dy: usize,
    dx: usize,
) -> MaskSequence {
    let mut out = MaskSequence::zeros(frames, h, w);
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                let sy = (y + f * (h - dy % h)) % h;
                let sx = (x + f * (w - dx % w)) % w;
                if first[sy * w + sx] != 0 {
                    out.set(f, y, x, 1);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine_similarity;

    #[test]
    fn similarity_decays_with_distance() {
        let stack = translating_features(1, 24, 24, 0, 0, FeatureParams::default());
        let center = stack.at(0, 12, 12);
        let near = stack.at(0, 12, 13);
        let far = stack.at(0, 12, 18);
        let s_self = cosine_similarity(center, center);
        let s_near = cosine_similarity(center, near);
        let s_far = cosine_similarity(center, far);
        assert!((s_self - 1.0).abs() < 1e-12);
        assert!(s_near < 0.95 && s_near > 0.2, "s_near = {s_near}");
        assert!(s_far < s_near, "s_far = {s_far}");
    }

    #[test]
    fn shifted_frames_carry_identical_features() {
        let stack = translating_features(3, 16, 16, 1, 0, FeatureParams::default());
        // frame 2 at (y, x) equals frame 0 at (y - 2, x), circularly
        for y in 0..16 {
            for x in 0..16 {
                let a = stack.at(2, y, x);
                let b = stack.at(0, (y + 16 - 2) % 16, x);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn translated_masks_follow_the_content() {
        let first = block_mask(8, 8, 1, 2, 3);
        let gt = translated_masks(&first, 3, 8, 8, 2, 0);
        assert_eq!(gt.frame(0), &first[..]);
        // frame 1: block moved down 2
        assert_eq!(gt.get(1, 3, 2), 1);
        assert_eq!(gt.get(1, 1, 2), 0);
    }
}
