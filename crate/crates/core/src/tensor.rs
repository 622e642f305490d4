//! Dense row-major tensors plus the handful of numeric primitives the
//! pipeline is built from: per-channel statistics, AdaIN, cosine
//! similarity, and bilinear sampling.
//!
//! Everything is f64. The pipeline trades memory for exactness: the
//! acceptance contracts are stated at 1e-10..1e-12 and are only
//! meaningful in double precision.

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "zip of {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    /// a*self + b*other, elementwise.
    pub fn lerp_with(&self, other: &Tensor, a: f64, b: f64) -> Result<Tensor> {
        self.zip_with(other, |x, y| a * x + b * y)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-channel population statistics (ddof = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Moments {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

fn check_axes(x: &Tensor, channel_axis: usize, reduce_axes: &[usize]) -> Result<()> {
    if reduce_axes.is_empty() {
        return Err(Error::arg("degenerate reduction: empty reduce axis set"));
    }
    if channel_axis >= x.rank() {
        return Err(Error::arg(format!(
            "channel axis {} out of range for rank {}",
            channel_axis,
            x.rank()
        )));
    }
    let mut seen = vec![false; x.rank()];
    for &a in reduce_axes {
        if a >= x.rank() {
            return Err(Error::arg(format!(
                "reduce axis {} out of range for rank {}",
                a,
                x.rank()
            )));
        }
        if a == channel_axis {
            return Err(Error::arg("reduce axes must not contain the channel axis"));
        }
        if seen[a] {
            return Err(Error::arg(format!("duplicate reduce axis {a}")));
        }
        seen[a] = true;
    }
    // Every axis is either the channel axis or reduced; partial reductions
    // would leave the Moments layout ambiguous.
    for axis in 0..x.rank() {
        if axis != channel_axis && !seen[axis] {
            return Err(Error::arg(format!(
                "axis {axis} is neither the channel axis nor reduced"
            )));
        }
    }
    Ok(())
}

/// Population mean and standard deviation per channel, reduced over all
/// remaining axes. Two-pass for accuracy; accumulation order is row-major
/// and therefore deterministic.
pub fn channel_moments(x: &Tensor, channel_axis: usize, reduce_axes: &[usize]) -> Result<Moments> {
    check_axes(x, channel_axis, reduce_axes)?;
    let channels = x.shape()[channel_axis];
    let per_channel = x.len() / channels;
    if per_channel == 0 {
        return Err(Error::arg("degenerate reduction: no elements per channel"));
    }
    let stride = x.strides()[channel_axis];

    let channel_of = |flat: usize| (flat / stride) % channels;

    let mut mean = vec![0.0; channels];
    for (i, &v) in x.data().iter().enumerate() {
        mean[channel_of(i)] += v;
    }
    for m in &mut mean {
        *m /= per_channel as f64;
    }

    let mut var = vec![0.0; channels];
    for (i, &v) in x.data().iter().enumerate() {
        let c = channel_of(i);
        let d = v - mean[c];
        var[c] += d * d;
    }
    let std = var
        .into_iter()
        .map(|v| (v / per_channel as f64).sqrt())
        .collect();

    Ok(Moments { mean, std })
}

/// Default epsilon added to the content standard deviation in [`adain`].
pub const ADAIN_EPS: f64 = 1e-5;

/// Renormalize `x` so its per-channel mean and standard deviation match
/// `y`'s: `out = sigma(y) * (x - mu(x)) / (sigma(x) + eps) + mu(y)`.
///
/// `x` and `y` must agree on the channel count but may differ on the
/// reduced axes (a one-frame style tensor against a many-frame video).
pub fn adain(
    x: &Tensor,
    y: &Tensor,
    channel_axis: usize,
    reduce_axes: &[usize],
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::arg("adain eps must be positive"));
    }
    let mx = channel_moments(x, channel_axis, reduce_axes)?;
    let my = channel_moments(y, channel_axis, reduce_axes)?;
    if mx.channels() != my.channels() {
        return Err(Error::shape(format!(
            "adain channel mismatch: {} vs {}",
            mx.channels(),
            my.channels()
        )));
    }

    let channels = mx.channels();
    let stride = x.strides()[channel_axis];
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / stride) % channels;
        *v = my.std[c] * (*v - mx.mean[c]) / (mx.std[c] + eps) + my.mean[c];
    }
    Ok(out)
}

/// Cosine similarity with a zero-vector policy: if either norm is below
/// 1e-12 the similarity is 0. Result clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine similarity of unequal lengths");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    cosine_from_parts(dot, na, nb)
}

/// Shared tail of the cosine computation so callers that cache norms get
/// bitwise-identical results to [`cosine_similarity`].
pub(crate) fn cosine_from_parts(dot: f64, na: f64, nb: f64) -> f64 {
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Bilinear sample of an HxWxC image at real coordinates `(x, y)` where
/// `x` indexes columns and `y` rows. Out-of-bounds coordinates clamp to
/// the border pixel.
pub fn bilinear_sample(img: &Tensor, x: f64, y: f64) -> Vec<f64> {
    assert_eq!(img.rank(), 3, "bilinear_sample expects HxWxC");
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);

    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;

    let at = |yy: usize, xx: usize, cc: usize| img.data()[(yy * w + xx) * c + cc];
    (0..c)
        .map(|cc| {
            let top = at(y0, x0, cc) * (1.0 - fx) + at(y0, x1, cc) * fx;
            let bot = at(y1, x0, cc) * (1.0 - fx) + at(y1, x1, cc) * fx;
            top * (1.0 - fy) + bot * fy
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn moments_hand_computed() {
        let m = channel_moments(&t(&[1, 2], &[0.0, 2.0]), 0, &[1]).unwrap();
        assert_eq!(m.mean, vec![1.0]);
        assert_eq!(m.std, vec![1.0]);

        let m = channel_moments(&t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]), 0, &[1]).unwrap();
        assert_eq!(m.mean, vec![2.5]);
        assert!((m.std[0] - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn moments_constant_input() {
        let m = channel_moments(&Tensor::filled(vec![2, 3, 3], 5.0), 0, &[1, 2]).unwrap();
        assert_eq!(m.mean, vec![5.0, 5.0]);
        assert_eq!(m.std, vec![0.0, 0.0]);
    }

    #[test]
    fn moments_reject_degenerate_reduction() {
        let err = channel_moments(&t(&[1, 2], &[0.0, 2.0]), 0, &[]).unwrap_err();
        assert!(err.to_string().contains("degenerate reduction"));
    }

    #[test]
    fn moments_multichannel_layout() {
        // 2 channels on axis 1, shape (2, 2, 2): channel c holds the
        // values at [:, c, :].
        let x = t(&[2, 2, 2], &[0.0, 0.0, 10.0, 10.0, 2.0, 2.0, 30.0, 30.0]);
        let m = channel_moments(&x, 1, &[0, 2]).unwrap();
        assert_eq!(m.mean, vec![1.0, 20.0]);
        assert_eq!(m.std, vec![1.0, 10.0]);
    }

    #[test]
    fn adain_hand_computed() {
        let x = t(&[1, 2], &[0.0, 2.0]);
        let y = t(&[1, 2], &[4.0, 8.0]);
        let out = adain(&x, &y, 0, &[1], ADAIN_EPS).unwrap();
        // sigma(x)=1 so the eps bends the result by ~1e-5 of the deviation.
        assert!((out.data()[0] - 4.0).abs() < 1e-4);
        assert!((out.data()[1] - 8.0).abs() < 1e-4);
    }

    #[test]
    fn adain_self_is_near_identity() {
        let x = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 7.0, -1.0]);
        let out = adain(&x, &x, 0, &[1], ADAIN_EPS).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn adain_zero_variance_content_collapses_to_style_mean() {
        let x = Tensor::filled(vec![1, 4], 9.0);
        let y = t(&[1, 2], &[4.0, 8.0]);
        let out = adain(&x, &y, 0, &[1], ADAIN_EPS).unwrap();
        for &v in out.data() {
            assert_eq!(v, 6.0);
        }
    }

    #[test]
    fn adain_channel_mismatch_errors() {
        let x = Tensor::zeros(vec![2, 4]);
        let y = Tensor::zeros(vec![3, 4]);
        assert!(adain(&x, &y, 0, &[1], ADAIN_EPS).is_err());
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]), -1.0);
        // zero-vector policy
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn bilinear_lattice_midpoint_and_clamp() {
        // 2x2 single-channel image: 1 2 / 3 4
        let img = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(bilinear_sample(&img, 1.0, 0.0), vec![2.0]);
        assert_eq!(bilinear_sample(&img, 0.5, 0.0), vec![1.5]);
        assert_eq!(bilinear_sample(&img, -3.2, 0.0), vec![1.0]);
        assert_eq!(bilinear_sample(&img, 100.0, 100.0), vec![4.0]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn small_vals() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-100.0f64..100.0, 6)
        }

        proptest! {
            #[test]
            fn adain_matches_style_moments(xs in small_vals(), ys in small_vals()) {
                let x = Tensor::new(vec![2, 3], xs).unwrap();
                let y = Tensor::new(vec![2, 3], ys).unwrap();
                let out = adain(&x, &y, 0, &[1], ADAIN_EPS).unwrap();
                let mo = channel_moments(&out, 0, &[1]).unwrap();
                let mx = channel_moments(&x, 0, &[1]).unwrap();
                let my = channel_moments(&y, 0, &[1]).unwrap();
                for c in 0..2 {
                    prop_assert!((mo.mean[c] - my.mean[c]).abs() <= 1e-9 * my.mean[c].abs() + 1e-9);
                    let expect_std = my.std[c] * mx.std[c] / (mx.std[c] + ADAIN_EPS);
                    prop_assert!((mo.std[c] - expect_std).abs() <= 1e-9);
                }
            }

            #[test]
            fn adain_idempotent_in_distribution(xs in small_vals(), ys in small_vals()) {
                let x = Tensor::new(vec![2, 3], xs).unwrap();
                let y = Tensor::new(vec![2, 3], ys).unwrap();
                let once = adain(&x, &y, 0, &[1], ADAIN_EPS).unwrap();
                let twice = adain(&once, &y, 0, &[1], ADAIN_EPS).unwrap();
                prop_assert!(twice.max_abs_diff(&once) < 1e-7);
            }

            #[test]
            fn cosine_symmetric_and_scale_invariant(
                a in proptest::collection::vec(-10.0f64..10.0, 4),
                b in proptest::collection::vec(-10.0f64..10.0, 4),
            ) {
                let ab = cosine_similarity(&a, &b);
                let ba = cosine_similarity(&b, &a);
                let a2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
                let scaled = cosine_similarity(&a2, &b);
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!((ab - scaled).abs() < 1e-12);
            }

            #[test]
            fn bilinear_is_linear_in_the_image(
                a in proptest::collection::vec(-5.0f64..5.0, 12),
                b in proptest::collection::vec(-5.0f64..5.0, 12),
                x in -1.0f64..4.0,
                y in -1.0f64..3.0,
                alpha in -2.0f64..2.0,
                beta in -2.0f64..2.0,
            ) {
                let ta = Tensor::new(vec![2, 3, 2], a.clone()).unwrap();
                let tb = Tensor::new(vec![2, 3, 2], b.clone()).unwrap();
                let mix = ta.lerp_with(&tb, alpha, beta).unwrap();
                let sa = bilinear_sample(&ta, x, y);
                let sb = bilinear_sample(&tb, x, y);
                let sm = bilinear_sample(&mix, x, y);
                for c in 0..2 {
                    prop_assert!((sm[c] - (alpha * sa[c] + beta * sb[c])).abs() < 1e-12);
                }
            }
        }
    }
}
