//! Continuous noise schedule over the unit level interval.
//!
//! A level `l` in `[0, 1]` maps to `n(l) = ceil(steps * l)` applications of
//! the degradation operator, and to a signal-retention weight `alpha_bar(l)`
//! that is 1 at `l = 0`, 0 at `l = 1`, and strictly decreasing in between.
//!
//! `alpha_bar` is a shape numerator divided by a power of the kernel tap sum.
//! Each application of the operator multiplies a constant image by the tap
//! sum, so dividing by `tap_sum^(2 * n(l))` keeps the signal magnitude of the
//! weighted, degraded image equal to `sqrt(numerator)` regardless of the
//! kernel ([`ExponentMode::PerApplication`], the default). The alternative
//! [`ExponentMode::Geometric`] drives the exponent as `2 * stride^n(l)`
//! instead; it is kept selectable for comparison but does not reach
//! `alpha_bar(0) = 1` unless the tap sum is 1, so nothing else here uses it.

use serde::{Deserialize, Serialize};

use crate::degrade::Kernel;
use crate::error::{CoreError, CoreResult};

/// Shape of the numerator in `alpha_bar`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ScheduleVariant {
    /// `1 - sin(pi/2 * l)`
    #[serde(rename = "sine")]
    #[default]
    Sine,
    /// `cos(pi/2 * l)`
    #[serde(rename = "cosine")]
    Cosine,
    /// `1 - l`
    #[serde(rename = "linear")]
    Linear,
}

/// Denominator exponent rule; see the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ExponentMode {
    #[serde(rename = "per-application")]
    #[default]
    PerApplication,
    #[serde(rename = "geometric")]
    Geometric,
}

/// Level metadata: operator applications and the induced grid shrink factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelInfo {
    pub level: f64,
    /// `n(l)`: how many times the degradation operator has been applied.
    pub applications: usize,
    /// `stride^n(l)`: spatial shrink factor relative to the full grid.
    pub spatial_factor: usize,
}

/// Serializable identity of a schedule; checkpoints and sample sidecars
/// carry this so a run can be reconstructed exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub variant: ScheduleVariant,
    pub exponent_mode: ExponentMode,
    pub steps: usize,
    pub stride: usize,
    pub tap_sum: f64,
}

/// Continuous schedule bound to a kernel's stride and tap sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    variant: ScheduleVariant,
    exponent_mode: ExponentMode,
    steps: usize,
    stride: usize,
    tap_sum: f64,
}

/// Discretized schedule on the grid `l_k = k / steps`:
/// `alpha_bar[k]`, per-step `alpha[k] = alpha_bar[k] / alpha_bar[k-1]` and
/// `beta[k] = 1 - alpha[k]` for `k = 1..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSchedule {
    alpha_bar: Vec<f64>, // length steps + 1, index 0 holds alpha_bar(0) = 1
    alpha: Vec<f64>,     // length steps, entry k-1 holds alpha_k
    beta: Vec<f64>,
}

impl Schedule {
    pub fn new(variant: ScheduleVariant, steps: usize, kernel: &Kernel) -> CoreResult<Self> {
        if steps == 0 {
            return Err(CoreError::InvalidArgument(
                "schedule needs >= 1 step".into(),
            ));
        }
        Ok(Schedule {
            variant,
            exponent_mode: ExponentMode::default(),
            steps,
            stride: kernel.stride(),
            tap_sum: kernel.tap_sum(),
        })
    }

    pub fn with_exponent_mode(mut self, mode: ExponentMode) -> Self {
        self.exponent_mode = mode;
        self
    }

    pub fn from_meta(meta: &ScheduleMeta) -> CoreResult<Self> {
        if meta.steps == 0 || meta.stride == 0 || !meta.tap_sum.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "bad schedule metadata: {meta:?}"
            )));
        }
        Ok(Schedule {
            variant: meta.variant,
            exponent_mode: meta.exponent_mode,
            steps: meta.steps,
            stride: meta.stride,
            tap_sum: meta.tap_sum,
        })
    }

    pub fn meta(&self) -> ScheduleMeta {
        ScheduleMeta {
            variant: self.variant,
            exponent_mode: self.exponent_mode,
            steps: self.steps,
            stride: self.stride,
            tap_sum: self.tap_sum,
        }
    }

    pub fn variant(&self) -> ScheduleVariant {
        self.variant
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn tap_sum(&self) -> f64 {
        self.tap_sum
    }

    fn check_level(&self, l: f64) -> CoreResult<()> {
        if !l.is_finite() || !(0.0..=1.0).contains(&l) {
            return Err(CoreError::InvalidArgument(format!(
                "level {l} outside [0, 1]"
            )));
        }
        Ok(())
    }

    /// Operator applications for a level: `ceil(steps * l)`, clamped to
    /// `[1, steps]` for `l > 0` and 0 only at `l = 0` exactly. Products
    /// `steps * l` within 1e-9 below an integer snap up to it, so levels
    /// formed as `k / steps` land on their grid point despite rounding.
    pub fn applications(&self, l: f64) -> CoreResult<usize> {
        self.check_level(l)?;
        if l == 0.0 {
            return Ok(0);
        }
        let t = self.steps as f64 * l;
        let mut n = t.ceil();
        if n - t > 1.0 - 1e-9 {
            n -= 1.0;
        }
        Ok((n as usize).clamp(1, self.steps))
    }

    pub fn level(&self, l: f64) -> CoreResult<LevelInfo> {
        let applications = self.applications(l)?;
        let spatial_factor = self.stride.pow(applications as u32);
        Ok(LevelInfo {
            level: l,
            applications,
            spatial_factor,
        })
    }

    /// Numerator of `alpha_bar`; strictly decreasing from 1 to 0 on `[0, 1]`.
    /// The endpoints are pinned exactly so downstream identities (unit
    /// signal retention at 0, pure-noise terminal at 1) hold in floating
    /// point for every variant.
    fn numerator(&self, l: f64) -> f64 {
        if l == 0.0 {
            return 1.0;
        }
        if l == 1.0 {
            return 0.0;
        }
        let v = match self.variant {
            ScheduleVariant::Sine => 1.0 - (0.5 * std::f64::consts::PI * l).sin(),
            ScheduleVariant::Cosine => (0.5 * std::f64::consts::PI * l).cos(),
            ScheduleVariant::Linear => 1.0 - l,
        };
        v.max(0.0)
    }

    /// Signal-retention weight at a level.
    pub fn alpha_bar(&self, l: f64) -> CoreResult<f64> {
        let n = self.applications(l)?;
        let exponent = match self.exponent_mode {
            ExponentMode::PerApplication => 2 * n,
            ExponentMode::Geometric => 2 * self.stride.pow(n as u32),
        };
        Ok(self.numerator(l) / self.tap_sum.powi(exponent as i32))
    }

    /// Evaluate on the grid `l_k = k / steps`.
    pub fn discretize(&self) -> DiscreteSchedule {
        let n = self.steps;
        let mut alpha_bar = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let l = k as f64 / n as f64;
            alpha_bar.push(self.alpha_bar(l).expect("grid levels are in range"));
        }
        let mut alpha = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        for k in 1..=n {
            let a = alpha_bar[k] / alpha_bar[k - 1];
            alpha.push(a);
            beta.push(1.0 - a);
        }
        DiscreteSchedule {
            alpha_bar,
            alpha,
            beta,
        }
    }
}

impl DiscreteSchedule {
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `alpha_bar(k / steps)` for `k = 0..=steps`; index 0 is exactly 1.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    /// Per-step retention for `k = 1..=steps`.
    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    /// Per-step noise weight for `k = 1..=steps`.
    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }
}

/// Number of reverse steps for a target image size: with the smallest side
/// equal to `stride^p`, the chain runs `p - 1` steps so the coarsest grid is
/// `stride x stride` pixels per side (at minimum). Requires `stride >= 2`
/// and the smaller dimension to be a power of the stride, at least its
/// square.
pub fn steps_for_size(height: usize, width: usize, stride: usize) -> CoreResult<usize> {
    if stride < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "steps_for_size needs stride >= 2, got {stride}"
        )));
    }
    let m = height.min(width);
    let mut p = 0usize;
    let mut v = m;
    while v > 1 && v % stride == 0 {
        v /= stride;
        p += 1;
    }
    if v != 1 {
        return Err(CoreError::InvalidArgument(format!(
            "min dimension {m} is not a power of stride {stride}"
        )));
    }
    if p < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "min dimension {m} must be at least stride^2 = {}",
            stride * stride
        )));
    }
    Ok(p - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::box_kernel;

    fn sine_schedule(steps: usize, stride: usize) -> Schedule {
        Schedule::new(ScheduleVariant::Sine, steps, &box_kernel(stride).unwrap()).unwrap()
    }

    #[test]
    fn endpoints_are_exact_for_all_variants() {
        for variant in [
            ScheduleVariant::Sine,
            ScheduleVariant::Cosine,
            ScheduleVariant::Linear,
        ] {
            let s = Schedule::new(variant, 5, &box_kernel(2).unwrap()).unwrap();
            assert_eq!(s.alpha_bar(0.0).unwrap(), 1.0, "{variant:?} at 0");
            assert_eq!(s.alpha_bar(1.0).unwrap(), 0.0, "{variant:?} at 1");
        }
    }

    #[test]
    fn strictly_decreasing_on_a_dense_grid() {
        for variant in [
            ScheduleVariant::Sine,
            ScheduleVariant::Cosine,
            ScheduleVariant::Linear,
        ] {
            let s = Schedule::new(variant, 7, &box_kernel(2).unwrap()).unwrap();
            let mut prev = s.alpha_bar(0.0).unwrap();
            for i in 1..=1000 {
                let l = i as f64 / 1000.0;
                let cur = s.alpha_bar(l).unwrap();
                assert!(
                    cur < prev,
                    "{variant:?} not strictly decreasing at l={l}: {cur} !< {prev}"
                );
                prev = cur;
            }
        }
    }

    #[test]
    fn frozen_midpoint_value() {
        // L=3, stride-2 box kernel (tap sum 2), l = 0.5: two applications,
        // (1 - sin(pi/4)) / 2^4.
        let s = sine_schedule(3, 2);
        let expected = (1.0 - (0.25 * std::f64::consts::PI).sin()) / 16.0;
        assert!((expected - 0.018305826175840784).abs() < 1e-15);
        assert!((s.alpha_bar(0.5).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn applications_follow_the_level_grid() {
        let s = sine_schedule(3, 2);
        assert_eq!(s.applications(0.0).unwrap(), 0);
        assert_eq!(s.applications(1e-9).unwrap(), 1);
        assert_eq!(s.applications(1.0 / 3.0).unwrap(), 1);
        assert_eq!(s.applications(0.34).unwrap(), 2);
        assert_eq!(s.applications(2.0 / 3.0).unwrap(), 2);
        assert_eq!(s.applications(0.67).unwrap(), 3);
        assert_eq!(s.applications(1.0).unwrap(), 3);
        // Level formed by division lands on its grid point for every count.
        for steps in 1..=20 {
            let s = sine_schedule(steps, 2);
            for k in 1..=steps {
                let l = k as f64 / steps as f64;
                assert_eq!(s.applications(l).unwrap(), k, "steps={steps}, k={k}");
            }
        }
        assert_eq!(
            sine_schedule(3, 2).level(0.5).unwrap().spatial_factor,
            4,
            "two applications of stride 2"
        );
    }

    #[test]
    fn levels_outside_unit_interval_rejected() {
        let s = sine_schedule(3, 2);
        assert!(s.alpha_bar(-0.1).is_err());
        assert!(s.alpha_bar(1.1).is_err());
        assert!(s.alpha_bar(f64::NAN).is_err());
    }

    #[test]
    fn discretization_telescopes() {
        let s = sine_schedule(5, 2);
        let d = s.discretize();
        assert_eq!(d.alpha_bar(0), 1.0);
        assert_eq!(d.alpha_bar(5), 0.0);
        for k in 1..=5 {
            let product: f64 = (1..=k).map(|j| d.alpha(j)).product();
            assert!(
                (product - d.alpha_bar(k)).abs() <= 1e-12,
                "telescoping broke at k={k}: {product} vs {}",
                d.alpha_bar(k)
            );
        }
        for k in 1..5 {
            let b = d.beta(k);
            assert!(b > 0.0 && b < 1.0, "beta_{k} = {b} outside (0,1)");
        }
        assert_eq!(d.beta(5), 1.0, "terminal step absorbs all signal");
    }

    #[test]
    fn signal_retention_is_kernel_independent() {
        // sqrt(alpha_bar(l)) * tap_sum^n must equal sqrt(numerator):
        // the per-application exponent cancels the operator's gain on
        // constant images regardless of the kernel.
        for stride in [2usize, 3] {
            let k = box_kernel(stride).unwrap();
            let s = Schedule::new(ScheduleVariant::Sine, 4, &k).unwrap();
            for step in 0..=4usize {
                let l = step as f64 / 4.0;
                let n = s.applications(l).unwrap();
                let gain = k.tap_sum().powi(n as i32);
                let magnitude = s.alpha_bar(l).unwrap().sqrt() * gain;
                let expected = match step {
                    0 => 1.0,
                    4 => 0.0,
                    _ => (1.0 - (0.5 * std::f64::consts::PI * l).sin()).sqrt(),
                };
                assert!(
                    (magnitude - expected).abs() < 1e-12,
                    "stride {stride}, l={l}: {magnitude} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn geometric_mode_differs_and_misses_unit_start() {
        let k = box_kernel(2).unwrap();
        let s = Schedule::new(ScheduleVariant::Sine, 3, &k)
            .unwrap()
            .with_exponent_mode(ExponentMode::Geometric);
        // One application: exponent 2 * 2^1 = 4 instead of 2.
        let l = 1.0 / 3.0;
        assert!((s.alpha_bar(l).unwrap() - 0.5 / 16.0).abs() < 1e-15);
        // Any positive level already counts one application, so the limit
        // toward zero is 1/tap_sum^4; exact zero has no applications and
        // lands at 1/tap_sum^2. Neither is 1: this mode misses the unit
        // start, which is why it is not the default.
        assert!((s.alpha_bar(1e-6).unwrap() - 1.0 / 16.0).abs() < 1e-3);
        assert!((s.alpha_bar(0.0).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn steps_for_size_matches_target_resolutions() {
        assert_eq!(steps_for_size(64, 64, 2).unwrap(), 5);
        assert_eq!(steps_for_size(128, 128, 2).unwrap(), 6);
        assert_eq!(steps_for_size(256, 256, 2).unwrap(), 7);
        assert_eq!(steps_for_size(16, 16, 2).unwrap(), 3);
        assert_eq!(steps_for_size(32, 64, 2).unwrap(), 4, "min side rules");
        assert_eq!(steps_for_size(27, 27, 3).unwrap(), 2);
        assert!(steps_for_size(48, 48, 2).is_err(), "48 is not a power of 2");
        assert!(steps_for_size(2, 2, 2).is_err(), "below stride^2");
        assert!(steps_for_size(16, 16, 1).is_err(), "stride 1 has no ladder");
    }

    #[test]
    fn meta_roundtrip_preserves_schedule() {
        let s = sine_schedule(6, 2).with_exponent_mode(ExponentMode::Geometric);
        let meta = s.meta();
        let json = serde_json::to_string(&meta).unwrap();
        let back: ScheduleMeta = serde_json::from_str(&json).unwrap();
        let s2 = Schedule::from_meta(&back).unwrap();
        assert_eq!(s, s2);
    }
}
