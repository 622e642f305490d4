//! Noise schedule and deterministic DDIM stepping.
//!
//! Time points are train-timestep labels as `i64`; the virtual point `-1`
//! is the clean state with cumulative alpha exactly 1. The inference
//! ladder uses uniform stride with trailing alignment, so the noisiest
//! ladder entry is the last train step.
//!
//! Both directions evaluate the noise predictor at the higher timestep of
//! each transition: denoising at its source state (exact DDIM), inversion
//! at its target label (the usual first-order approximation). For any
//! z-independent predictor the two use identical noise per transition,
//! which is what makes the inversion/denoising round trip exact.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::{FeatureStack, LatentVideo, PixelVideo};

/// The clean time point: cumulative alpha 1, no noise direction.
pub const CLEAN: i64 = -1;

/// Opaque conditioning; empty means unconditional editing.
pub type Conditioning<'a> = Option<&'a [u8]>;

/// Noise prediction backend. Implementations must be deterministic for
/// fixed inputs.
pub trait NoisePredictor {
    fn predict(&self, z: &LatentVideo, t: i64, conditioning: Conditioning) -> Result<LatentVideo>;

    /// Prediction plus point-matching features, for backends that expose
    /// them. The default has no feature hook.
    fn predict_with_features(
        &self,
        z: &LatentVideo,
        t: i64,
        conditioning: Conditioning,
    ) -> Result<(LatentVideo, Option<FeatureStack>)> {
        Ok((self.predict(z, t, conditioning)?, None))
    }
}

/// Latent/pixel codec interface.
pub trait LatentCodec {
    fn decode(&self, z: &LatentVideo) -> Result<PixelVideo>;
    fn encode(&self, p: &PixelVideo) -> Result<LatentVideo>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

impl From<crate::formats::ScheduleKind> for ScheduleKind {
    fn from(k: crate::formats::ScheduleKind) -> Self {
        match k {
            crate::formats::ScheduleKind::Linear => ScheduleKind::Linear,
            crate::formats::ScheduleKind::ScaledLinear => ScheduleKind::ScaledLinear,
        }
    }
}

/// Cumulative-alpha table plus the inference ladder.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    train_steps: usize,
    alpha_bars: Vec<f64>,
    /// Train indices of the T inference steps, strictly decreasing
    /// (denoising order). Does not include the clean point.
    ladder: Vec<i64>,
}

pub fn build_schedule(
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    train_steps: usize,
    t_total: usize,
) -> Result<DiffusionSchedule> {
    if train_steps == 0 {
        return Err(Error::arg("train_steps must be positive"));
    }
    if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) || beta_start > beta_end
    {
        return Err(Error::arg(
            "betas must satisfy 0 <= beta_start <= beta_end < 1",
        ));
    }
    if t_total == 0 || t_total > train_steps {
        return Err(Error::arg(format!(
            "t_total must lie in 1..=train_steps, got {t_total} of {train_steps}"
        )));
    }

    let lerp = |i: usize, a: f64, b: f64| {
        if train_steps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (train_steps - 1) as f64
        }
    };
    let betas: Vec<f64> = (0..train_steps)
        .map(|i| match kind {
            ScheduleKind::Linear => lerp(i, beta_start, beta_end),
            ScheduleKind::ScaledLinear => lerp(i, beta_start.sqrt(), beta_end.sqrt()).powi(2),
        })
        .collect();

    let mut alpha_bars = Vec::with_capacity(train_steps);
    let mut acc = 1.0;
    for beta in &betas {
        acc *= 1.0 - beta;
        alpha_bars.push(acc);
    }

    // Trailing alignment: step s of 1..=T lands on round(train_steps*s/T)-1,
    // so the last inversion step reaches the final train index.
    let ladder = (1..=t_total)
        .rev()
        .map(|s| {
            let x = train_steps as f64 * s as f64 / t_total as f64;
            (x + 0.5).floor() as i64 - 1
        })
        .collect();

    Ok(DiffusionSchedule {
        train_steps,
        alpha_bars,
        ladder,
    })
}

impl DiffusionSchedule {
    /// Schedule from an explicit cumulative-alpha table; the ladder spans
    /// every entry. Mostly for tests that need exact alpha values.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(Error::arg("alpha_bars must be nonempty"));
        }
        if alpha_bars.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::arg("alpha_bars must lie in [0, 1]"));
        }
        let ladder = (0..alpha_bars.len() as i64).rev().collect();
        Ok(DiffusionSchedule {
            train_steps: alpha_bars.len(),
            alpha_bars,
            ladder,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn t_total(&self) -> usize {
        self.ladder.len()
    }

    /// Cumulative alpha at a time point; `CLEAN` maps to exactly 1.
    pub fn alpha_bar(&self, t: i64) -> Result<f64> {
        if t == CLEAN {
            return Ok(1.0);
        }
        usize::try_from(t)
            .ok()
            .and_then(|i| self.alpha_bars.get(i))
            .copied()
            .ok_or_else(|| Error::arg(format!("time point {t} outside schedule")))
    }

    /// Train indices of the inference ladder, denoising order (strictly
    /// decreasing), without the clean point.
    pub fn ladder(&self) -> &[i64] {
        &self.ladder
    }

    /// T+1 time points for denoising: ladder then `CLEAN`.
    pub fn denoise_points(&self) -> Vec<i64> {
        let mut pts = self.ladder.clone();
        pts.push(CLEAN);
        pts
    }

    /// T+1 time points for inversion: `CLEAN` then the ladder ascending.
    pub fn inversion_points(&self) -> Vec<i64> {
        let mut pts = self.denoise_points();
        pts.reverse();
        pts
    }

    /// True when cumulative alpha is strictly decreasing along the
    /// ladder, which every noisy schedule satisfies.
    pub fn strictly_decreasing(&self) -> bool {
        self.alpha_bars.windows(2).all(|w| w[1] < w[0])
    }
}

/// Closed-form estimate of the clean latent:
/// `(z_t - sqrt(1 - a_t) * eps) / sqrt(a_t)`.
pub fn predicted_z0(
    z_t: &LatentVideo,
    eps: &LatentVideo,
    t: i64,
    sched: &DiffusionSchedule,
) -> Result<LatentVideo> {
    let a = sched.alpha_bar(t)?;
    if a <= 0.0 {
        return Err(Error::arg(format!("alpha_bar({t}) = {a} is not positive")));
    }
    let out = z_t
        .tensor()
        .lerp_with(eps.tensor(), 1.0 / a.sqrt(), -(1.0 - a).sqrt() / a.sqrt())?;
    LatentVideo::new(out)
}

/// One deterministic DDIM denoising transition `t -> t_prev`.
pub fn ddim_denoise_step(
    z_t: &LatentVideo,
    eps: &LatentVideo,
    t: i64,
    t_prev: i64,
    sched: &DiffusionSchedule,
) -> Result<LatentVideo> {
    if t_prev >= t {
        return Err(Error::arg(format!(
            "t_prev {t_prev} is not earlier on the ladder than t {t}"
        )));
    }
    let a_prev = sched.alpha_bar(t_prev)?;
    let z0 = predicted_z0(z_t, eps, t, sched)?;
    let out = z0
        .tensor()
        .lerp_with(eps.tensor(), a_prev.sqrt(), (1.0 - a_prev).sqrt())?;
    LatentVideo::new(out)
}

/// One inversion transition `t -> t_next`, the algebraic inverse of
/// [`ddim_denoise_step`] for a shared eps:
/// `A*z_t + B*eps` with `A = sqrt(a_next/a_t)` and
/// `B = sqrt(1 - a_next) - A*sqrt(1 - a_t)`.
pub fn ddim_invert_step(
    z_t: &LatentVideo,
    eps: &LatentVideo,
    t: i64,
    t_next: i64,
    sched: &DiffusionSchedule,
) -> Result<LatentVideo> {
    if t_next <= t {
        return Err(Error::arg(format!(
            "t_next {t_next} is not later on the ladder than t {t}"
        )));
    }
    let a_t = sched.alpha_bar(t)?;
    let a_next = sched.alpha_bar(t_next)?;
    if a_t <= 0.0 {
        return Err(Error::arg(format!("alpha_bar({t}) = {a_t} is not positive")));
    }
    let big_a = (a_next / a_t).sqrt();
    let big_b = (1.0 - a_next).sqrt() - big_a * (1.0 - a_t).sqrt();
    let out = z_t.tensor().lerp_with(eps.tensor(), big_a, big_b)?;
    LatentVideo::new(out)
}

/// Noise consistent with a refined clean estimate:
/// `(z_t - sqrt(a_t) * zbar) / sqrt(1 - a_t)`.
pub fn refine_noise(
    z_t: &LatentVideo,
    zbar_t0: &LatentVideo,
    t: i64,
    sched: &DiffusionSchedule,
) -> Result<LatentVideo> {
    let a = sched.alpha_bar(t)?;
    if a >= 1.0 {
        return Err(Error::arg("no noise direction at alpha_bar = 1"));
    }
    let out = z_t
        .tensor()
        .lerp_with(zbar_t0.tensor(), 1.0 / (1.0 - a).sqrt(), -a.sqrt() / (1.0 - a).sqrt())?;
    LatentVideo::new(out)
}

/// Inversion output: terminal noise, optional tapped features, and the
/// full state trajectory (`t_total + 1` latents, clean state first).
pub struct InversionResult {
    pub noise: LatentVideo,
    pub features: Option<FeatureStack>,
    pub trajectory: Vec<LatentVideo>,
}

/// Walk the ladder from the clean latent to the terminal noise. When
/// `feature_tap` is `Some(s)` (1-based inversion step), the predictor's
/// feature hook is sampled on that transition.
pub fn run_inversion(
    video: &LatentVideo,
    predictor: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    feature_tap: Option<usize>,
) -> Result<InversionResult> {
    let points = sched.inversion_points();
    if let Some(s) = feature_tap {
        if s < 1 || s >= points.len() {
            return Err(Error::arg(format!(
                "feature tap {s} outside inversion steps 1..={}",
                points.len() - 1
            )));
        }
    }

    let mut trajectory = Vec::with_capacity(points.len());
    trajectory.push(video.clone());
    let mut z = video.clone();
    let mut features = None;

    for step in 1..points.len() {
        let t_from = points[step - 1];
        let t_to = points[step];
        let eps = if feature_tap == Some(step) {
            let (eps, feats) = predictor.predict_with_features(&z, t_to, None)?;
            features = Some(feats.ok_or_else(|| {
                Error::Backend("predictor has no feature hook but features were requested".into())
            })?);
            eps
        } else {
            predictor.predict(&z, t_to, None)?
        };
        z = ddim_invert_step(&z, &eps, t_from, t_to, sched)?;
        trajectory.push(z.clone());
    }

    Ok(InversionResult {
        noise: z,
        features,
        trajectory,
    })
}

/// Plain denoising loop from terminal noise back to the clean state.
/// Returns the final latent and the state trajectory (noise first).
pub fn run_denoising(
    noise: &LatentVideo,
    predictor: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
) -> Result<(LatentVideo, Vec<LatentVideo>)> {
    let points = sched.denoise_points();
    let mut trajectory = Vec::with_capacity(points.len());
    trajectory.push(noise.clone());
    let mut z = noise.clone();
    for step in 1..points.len() {
        let t = points[step - 1];
        let t_prev = points[step];
        let eps = predictor.predict(&z, t, None)?;
        z = ddim_denoise_step(&z, &eps, t, t_prev, sched)?;
        trajectory.push(z.clone());
    }
    Ok((z, trajectory))
}

/// Convenience constructor for a latent filled with one value.
pub fn latent_filled(shape: [usize; 4], value: f64) -> LatentVideo {
    LatentVideo::new(Tensor::filled(shape.to_vec(), value)).expect("rank 4")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ConstantPredictor;

    fn sd_schedule(t_total: usize) -> DiffusionSchedule {
        build_schedule(ScheduleKind::ScaledLinear, 0.00085, 0.012, 1000, t_total).unwrap()
    }

    fn latent(shape: [usize; 4], data: Vec<f64>) -> LatentVideo {
        LatentVideo::new(Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
    }

    #[test]
    fn noiseless_schedule_has_unit_alpha() {
        let s = build_schedule(ScheduleKind::Linear, 0.0, 0.0, 10, 5).unwrap();
        for t in 0..10 {
            assert_eq!(s.alpha_bar(t).unwrap(), 1.0);
        }
    }

    #[test]
    fn hand_product_two_steps() {
        let s = build_schedule(ScheduleKind::Linear, 0.5, 0.5, 2, 2).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 0.5);
        assert_eq!(s.alpha_bar(1).unwrap(), 0.25);
    }

    #[test]
    fn ladder_stride_20_for_sd_defaults() {
        let s = sd_schedule(50);
        let ladder = s.ladder();
        assert_eq!(ladder.len(), 50);
        assert_eq!(ladder[0], 999);
        assert_eq!(ladder[49], 19);
        for w in ladder.windows(2) {
            assert_eq!(w[0] - w[1], 20);
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing_for_noisy_schedules() {
        assert!(sd_schedule(50).strictly_decreasing());
        let lin = build_schedule(ScheduleKind::Linear, 1e-4, 0.02, 100, 10).unwrap();
        assert!(lin.strictly_decreasing());
    }

    #[test]
    fn t_total_above_train_steps_is_rejected() {
        assert!(build_schedule(ScheduleKind::Linear, 0.1, 0.1, 10, 11).is_err());
    }

    #[test]
    fn predicted_z0_identity_at_unit_alpha() {
        let s = DiffusionSchedule::from_alpha_bars(vec![1.0]).unwrap();
        let z = latent([1, 1, 1, 2], vec![3.0, -2.0]);
        let eps = latent([1, 1, 1, 2], vec![0.5, 0.5]);
        assert_eq!(predicted_z0(&z, &eps, 0, &s).unwrap(), z);
    }

    #[test]
    fn predicted_z0_inverts_forward_noising() {
        let s = DiffusionSchedule::from_alpha_bars(vec![0.3]).unwrap();
        let a = latent([1, 1, 1, 2], vec![1.0, -4.0]);
        let e = latent([1, 1, 1, 2], vec![0.7, 0.2]);
        let z = a
            .tensor()
            .lerp_with(e.tensor(), 0.3f64.sqrt(), 0.7f64.sqrt())
            .unwrap();
        let back = predicted_z0(&LatentVideo::new(z).unwrap(), &e, 0, &s).unwrap();
        assert!(back.tensor().max_abs_diff(a.tensor()) < 1e-14);
    }

    #[test]
    fn predicted_z0_hand_value() {
        let s = DiffusionSchedule::from_alpha_bars(vec![0.25]).unwrap();
        let z = latent([1, 1, 1, 1], vec![1.0]);
        let e = latent([1, 1, 1, 1], vec![1.0]);
        let out = predicted_z0(&z, &e, 0, &s).unwrap();
        let want = (1.0 - 0.75f64.sqrt()) / 0.5;
        assert!((out.tensor().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn denoise_step_to_unit_alpha_returns_predicted_z0() {
        let s = DiffusionSchedule::from_alpha_bars(vec![0.4]).unwrap();
        let z = latent([1, 1, 1, 2], vec![0.3, 1.1]);
        let e = latent([1, 1, 1, 2], vec![-0.4, 0.9]);
        let stepped = ddim_denoise_step(&z, &e, 0, CLEAN, &s).unwrap();
        let z0 = predicted_z0(&z, &e, 0, &s).unwrap();
        assert_eq!(stepped, z0);
    }

    #[test]
    fn denoise_step_rejects_wrong_order() {
        let s = sd_schedule(50);
        let z = latent_filled([1, 1, 1, 1], 0.0);
        assert!(ddim_denoise_step(&z, &z, 19, 39, &s).is_err());
    }

    #[test]
    fn invert_step_identity_at_equal_alpha() {
        let s = DiffusionSchedule::from_alpha_bars(vec![0.5, 0.5]).unwrap();
        let z = latent([1, 1, 1, 2], vec![2.0, -2.0]);
        let e = latent([1, 1, 1, 2], vec![1.0, 1.0]);
        let out = ddim_invert_step(&z, &e, 0, 1, &s).unwrap();
        assert!(out.tensor().max_abs_diff(z.tensor()) < 1e-15);
    }

    #[test]
    fn invert_step_hand_coefficients() {
        // a_t = 1 (clean), a_next = 0.25: A = 0.5, B = sqrt(0.75).
        let s = DiffusionSchedule::from_alpha_bars(vec![0.25]).unwrap();
        let z = latent([1, 1, 1, 1], vec![2.0]);
        let e = latent([1, 1, 1, 1], vec![1.0]);
        let out = ddim_invert_step(&z, &e, CLEAN, 0, &s).unwrap();
        let want = 0.5 * 2.0 + 0.75f64.sqrt();
        assert!((out.tensor().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn invert_then_denoise_with_same_eps_is_identity() {
        let s = sd_schedule(50);
        let z = latent([1, 2, 2, 2], (0..8).map(|i| i as f64 * 0.37 - 1.0).collect());
        let e = latent([1, 2, 2, 2], (0..8).map(|i| (i as f64).sin()).collect());
        let up = ddim_invert_step(&z, &e, 19, 39, &s).unwrap();
        let back = ddim_denoise_step(&up, &e, 39, 19, &s).unwrap();
        assert!(back.tensor().max_abs_diff(z.tensor()) < 1e-10);
    }

    #[test]
    fn refine_noise_inverts_predicted_z0() {
        let s = DiffusionSchedule::from_alpha_bars(vec![0.6]).unwrap();
        let z = latent([1, 1, 2, 2], vec![0.2, -0.8, 1.4, 0.0]);
        let e = latent([1, 1, 2, 2], vec![0.9, -0.1, 0.4, -1.2]);
        let z0 = predicted_z0(&z, &e, 0, &s).unwrap();
        let eps_back = refine_noise(&z, &z0, 0, &s).unwrap();
        assert!(eps_back.tensor().max_abs_diff(e.tensor()) < 1e-12);
    }

    #[test]
    fn refine_noise_hand_value() {
        let s = DiffusionSchedule::from_alpha_bars(vec![0.25]).unwrap();
        let z = latent([1, 1, 1, 1], vec![0.0]);
        let zbar = latent([1, 1, 1, 1], vec![1.0]);
        let out = refine_noise(&z, &zbar, 0, &s).unwrap();
        assert!((out.tensor().data()[0] - (-0.5 / 0.75f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn refine_noise_rejects_unit_alpha() {
        let s = DiffusionSchedule::from_alpha_bars(vec![1.0]).unwrap();
        let z = latent_filled([1, 1, 1, 1], 0.0);
        assert!(refine_noise(&z, &z, 0, &s).is_err());
    }

    #[test]
    fn refine_then_denoise_matches_direct_composition() {
        // ddim_denoise_step(z, refine_noise(z, zbar)) must equal
        // sqrt(a_prev)*zbar + sqrt(1-a_prev)*refined, exactly.
        let s = sd_schedule(10);
        let z = latent([1, 1, 2, 2], vec![0.3, 0.9, -0.4, 0.1]);
        let zbar = latent([1, 1, 2, 2], vec![0.25, 0.8, -0.3, 0.05]);
        let t = s.ladder()[3];
        let t_prev = s.ladder()[4];
        let refined = refine_noise(&z, &zbar, t, &s).unwrap();
        let stepped = ddim_denoise_step(&z, &refined, t, t_prev, &s).unwrap();
        let a_prev = s.alpha_bar(t_prev).unwrap();
        let direct = zbar
            .tensor()
            .lerp_with(refined.tensor(), a_prev.sqrt(), (1.0 - a_prev).sqrt())
            .unwrap();
        // The step reconstructs predicted_z0 from the refined noise, which
        // round-trips zbar to rounding error.
        assert!(stepped.tensor().max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn constant_predictor_round_trip_small() {
        let s = sd_schedule(50);
        let video = latent(
            [2, 1, 2, 2],
            (0..8).map(|i| (i as f64 * 0.711).cos()).collect(),
        );
        let predictor = ConstantPredictor::new(0.13);
        let inv = run_inversion(&video, &predictor, &s, None).unwrap();
        assert_eq!(inv.trajectory.len(), 51);
        let (back, _) = run_denoising(&inv.noise, &predictor, &s).unwrap();
        assert!(back.tensor().max_abs_diff(video.tensor()) < 1e-10);
    }

    #[test]
    fn identity_schedule_inversion_returns_input() {
        let s = build_schedule(ScheduleKind::Linear, 0.0, 0.0, 10, 10).unwrap();
        let video = latent([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let predictor = ConstantPredictor::new(0.5);
        let inv = run_inversion(&video, &predictor, &s, None).unwrap();
        assert!(inv.noise.tensor().max_abs_diff(video.tensor()) < 1e-12);
    }

    #[test]
    fn feature_tap_without_hook_errors() {
        let s = sd_schedule(4);
        let video = latent_filled([1, 1, 2, 2], 0.2);
        let predictor = ConstantPredictor::new(0.1);
        let err = run_inversion(&video, &predictor, &s, Some(2)).unwrap_err();
        assert!(err.to_string().contains("feature hook"), "{err}");
    }
}
