//! JSON run configuration with defaults and validation.
//!
//! Interval bounds (tau0..tau5, t0) are stored as fractions of the total
//! step count T and resolved to integer step indices by rounding half-up.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

/// Noise schedule parameters. Defaults mirror a stock v-1.x latent
/// diffusion setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::ScaledLinear,
            beta_start: 0.00085,
            beta_end: 0.012,
            train_steps: 1000,
        }
    }
}

/// Which noise predictor drives denoising and inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorSpec {
    /// eps == value everywhere; the exact-round-trip reference backend.
    Constant { value: f64 },
    /// Seeded pseudo-random eps, independent of z (varies with t).
    Seeded,
    /// Deterministic seeded attention backbone with pooled tokens.
    Backbone {
        #[serde(default = "default_pool")]
        pool: usize,
        #[serde(default = "default_true")]
        cross_frame: bool,
    },
    /// Out-of-process predictor speaking the tensor-file directory
    /// protocol.
    External { dir: PathBuf },
}

fn default_pool() -> usize {
    8
}

fn default_true() -> bool {
    true
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec::Backbone {
            pool: default_pool(),
            cross_frame: true,
        }
    }
}

/// Which latent codec maps between latent and pixel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodecSpec {
    /// Axis transpose only; exactly invertible.
    Identity,
    /// Seeded orthogonal channel mixing; invertible to rounding error.
    Orthogonal,
    /// Out-of-process codec speaking the directory protocol.
    External { dir: PathBuf },
}

impl Default for CodecSpec {
    fn default() -> Self {
        CodecSpec::Orthogonal
    }
}

/// Full run configuration. Every field has a default so `{}` is a valid
/// document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Total inference steps.
    pub t_total: usize,
    /// Latent-shift window [tau0, tau1], fractions of T.
    pub tau0: f64,
    pub tau1: f64,
    /// Attention-shift window [tau2, tau3], fractions of T.
    pub tau2: f64,
    pub tau3: f64,
    /// Smoothing window [tau4, tau5], fractions of T.
    pub tau4: f64,
    pub tau5: f64,
    /// Inversion step at which point-matching features are captured,
    /// fraction of T.
    pub t0: f64,
    /// Query blending weight.
    pub gamma: f64,
    /// Attention-shift ramp endpoints.
    pub beta_tau2: f64,
    pub beta_tau3: f64,
    /// Anchor down-sampling rate.
    pub r: f64,
    /// Nearest neighbours per vote.
    pub k: usize,
    /// Smoothing half-window.
    pub m: usize,
    /// Ring-buffer capacity of previous anchor frames.
    pub n: usize,
    /// Root seed for every random substream.
    pub seed: u64,
    pub schedule: ScheduleConfig,
    /// Latent AdaIN statistics per frame instead of jointly over the
    /// whole video.
    pub adain_per_frame: bool,
    /// Replay content/style branches from the inversion trajectory cache
    /// instead of re-denoising them in lockstep.
    pub replay_from_cache: bool,
    /// Re-estimate optical flow at every smoothing step instead of once.
    pub reflow_each_step: bool,
    pub predictor: PredictorSpec,
    pub codec: CodecSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            t_total: 50,
            tau0: 0.1,
            tau1: 0.2,
            tau2: 0.4,
            tau3: 1.0,
            tau4: 0.5,
            tau5: 0.6,
            t0: 0.4,
            gamma: 0.35,
            beta_tau2: 0.1,
            beta_tau3: 0.9,
            r: 0.3,
            k: 15,
            m: 2,
            n: 9,
            seed: 0,
            schedule: ScheduleConfig::default(),
            adain_per_frame: false,
            replay_from_cache: false,
            reflow_each_step: false,
            predictor: PredictorSpec::default(),
            codec: CodecSpec::default(),
        }
    }
}

/// Round half-up resolution of a fraction-of-T bound.
pub fn resolve_frac(frac: f64, t_total: usize) -> usize {
    (frac * t_total as f64 + 0.5).floor() as usize
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }

    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        fn window(name0: &str, name1: &str, a: f64, b: f64) -> Result<()> {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
                return Err(Error::Config(format!(
                    "{name0}/{name1} must lie in [0, 1] as fractions of T"
                )));
            }
            if a >= b {
                return Err(Error::Config(format!("{name0} < {name1} violated")));
            }
            Ok(())
        }
        if self.t_total == 0 {
            return Err(Error::Config("t_total must be positive".into()));
        }
        window("tau0", "tau1", self.tau0, self.tau1)?;
        window("tau2", "tau3", self.tau2, self.tau3)?;
        window("tau4", "tau5", self.tau4, self.tau5)?;
        if !(0.0..=1.0).contains(&self.t0) {
            return Err(Error::Config("t0 must lie in [0, 1] as a fraction of T".into()));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::Config("r must lie in (0, 1]".into()));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1]".into()));
        }
        if self.schedule.beta_start < 0.0
            || self.schedule.beta_end >= 1.0
            || self.schedule.beta_start > self.schedule.beta_end
        {
            return Err(Error::Config(
                "schedule betas must satisfy 0 <= beta_start <= beta_end < 1".into(),
            ));
        }
        if self.t_total > self.schedule.train_steps {
            return Err(Error::Config(
                "t_total must not exceed schedule.train_steps".into(),
            ));
        }
        Ok(())
    }

    /// Interval bounds in integer step-index units.
    pub fn windows(&self) -> ResolvedWindows {
        let t = self.t_total;
        ResolvedWindows {
            latent_shift: (resolve_frac(self.tau0, t), resolve_frac(self.tau1, t)),
            attention_shift: (resolve_frac(self.tau2, t), resolve_frac(self.tau3, t)),
            smoothing: (resolve_frac(self.tau4, t), resolve_frac(self.tau5, t)),
            feature_step: resolve_frac(self.t0, t),
        }
    }
}

/// Fraction bounds resolved against T.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedWindows {
    pub latent_shift: (usize, usize),
    pub attention_shift: (usize, usize),
    pub smoothing: (usize, usize),
    pub feature_step: usize,
}

impl ResolvedWindows {
    pub fn in_latent_shift(&self, t: usize) -> bool {
        self.latent_shift.0 <= t && t <= self.latent_shift.1
    }

    pub fn in_attention_shift(&self, t: usize) -> bool {
        self.attention_shift.0 <= t && t <= self.attention_shift.1
    }

    pub fn in_smoothing(&self, t: usize) -> bool {
        self.smoothing.0 <= t && t <= self.smoothing.1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg.t_total, 50);
        assert_eq!(cfg.tau0, 0.1);
        assert_eq!(cfg.tau1, 0.2);
        assert_eq!(cfg.tau2, 0.4);
        assert_eq!(cfg.tau3, 1.0);
        assert_eq!(cfg.tau4, 0.5);
        assert_eq!(cfg.tau5, 0.6);
        assert_eq!(cfg.t0, 0.4);
        assert_eq!(cfg.gamma, 0.35);
        assert_eq!(cfg.beta_tau2, 0.1);
        assert_eq!(cfg.beta_tau3, 0.9);
        assert_eq!(cfg.r, 0.3);
        assert_eq!(cfg.k, 15);
        assert_eq!(cfg.m, 2);
        assert_eq!(cfg.n, 9);
    }

    #[test]
    fn reversed_window_names_the_fields() {
        let err = RunConfig::from_json(r#"{"tau4": 0.7, "tau5": 0.5}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("tau4 < tau5 violated"), "{err}");
    }

    #[test]
    fn zero_rate_is_rejected() {
        assert!(RunConfig::from_json(r#"{"r": 0.0}"#).is_err());
    }

    #[test]
    fn defaulting_is_idempotent() {
        let once = RunConfig::from_json(r#"{"gamma": 0.5, "k": 7}"#).unwrap();
        let twice = RunConfig::from_json(&once.dump()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn windows_resolve_by_rounding_half_up() {
        let cfg = RunConfig::default();
        let w = cfg.windows();
        assert_eq!(w.latent_shift, (5, 10));
        assert_eq!(w.attention_shift, (20, 50));
        assert_eq!(w.smoothing, (25, 30));
        assert_eq!(w.feature_step, 20);
    }
}
