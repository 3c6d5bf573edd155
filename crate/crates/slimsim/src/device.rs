//! Device cost model: batch service time, memory footprints, utilization
//! over a sliding window, and the energy ledger.
//!
//! Compute and memory both scale with the square of the width ratio, since
//! slimming cuts both input and output channels of every layer.

use crate::types::{WidthRatio, NUM_SEGMENTS};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

const MIB: f64 = 1024.0 * 1024.0;

fn default_util_window() -> f64 {
    1.0
}

/// Static description of one GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    /// Fixed per-batch launch overhead, seconds.
    pub t0: f64,
    /// Seconds per unit of scaled work.
    pub kappa: f64,
    /// Draw at zero utilization, watts.
    pub p_idle: f64,
    /// Draw at full utilization, watts.
    pub p_peak: f64,
    pub vram_total_bytes: u64,
    /// Sliding window for utilization measurement, seconds.
    #[serde(default = "default_util_window")]
    pub util_window_s: f64,
}

impl DeviceSpec {
    /// A desktop-class card: fast, power-hungry, roomy.
    pub fn fast_default() -> Self {
        DeviceSpec {
            name: "fast".into(),
            t0: 0.002,
            kappa: 0.001,
            p_idle: 60.0,
            p_peak: 250.0,
            vram_total_bytes: 11 * (1 << 30),
            util_window_s: 1.0,
        }
    }

    /// An embedded-class card: slower, frugal, tight on memory.
    pub fn slow_default() -> Self {
        DeviceSpec {
            name: "slow".into(),
            t0: 0.003,
            kappa: 0.0025,
            p_idle: 50.0,
            p_peak: 165.0,
            vram_total_bytes: 6 * (1 << 30),
            util_window_s: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.t0 >= 0.0 && self.t0.is_finite()) {
            return Err(format!("device {}: t0 must be >= 0", self.name));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(format!("device {}: kappa must be > 0", self.name));
        }
        if !(self.p_idle >= 0.0 && self.p_peak >= self.p_idle) {
            return Err(format!(
                "device {}: need 0 <= p_idle <= p_peak, got {} and {}",
                self.name, self.p_idle, self.p_peak
            ));
        }
        if self.vram_total_bytes == 0 {
            return Err(format!("device {}: vram_total_bytes must be > 0", self.name));
        }
        if !(self.util_window_s > 0.0 && self.util_window_s.is_finite()) {
            return Err(format!("device {}: util_window_s must be > 0", self.name));
        }
        Ok(())
    }
}

/// Per-segment cost coefficients at full width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentProfile {
    /// Relative compute cost of this segment.
    pub compute_scale: f64,
    /// Parameter bytes when loaded at width 1.0.
    pub param_bytes_full: f64,
    /// Activation bytes per image at width 1.0.
    pub activation_bytes_full: f64,
}

/// Cost coefficients for all four segments of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub segments: [SegmentProfile; NUM_SEGMENTS],
}

impl Default for ModelProfile {
    fn default() -> Self {
        let seg = |c: f64, p_mib: f64, a_mib: f64| SegmentProfile {
            compute_scale: c,
            param_bytes_full: p_mib * MIB,
            activation_bytes_full: a_mib * MIB,
        };
        // Middle segments carry most of the parameters; early ones most of
        // the activations, mirroring a CNN backbone.
        ModelProfile {
            segments: [
                seg(1.0, 8.0, 4.0),
                seg(1.5, 16.0, 3.0),
                seg(2.0, 32.0, 2.0),
                seg(1.0, 8.0, 1.0),
            ],
        }
    }
}

impl ModelProfile {
    pub fn validate(&self) -> Result<(), String> {
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.compute_scale > 0.0 && s.compute_scale.is_finite()) {
                return Err(format!("segment {i}: compute_scale must be > 0"));
            }
            if !(s.param_bytes_full > 0.0 && s.param_bytes_full.is_finite()) {
                return Err(format!("segment {i}: param_bytes_full must be > 0"));
            }
            if !(s.activation_bytes_full >= 0.0 && s.activation_bytes_full.is_finite()) {
                return Err(format!("segment {i}: activation_bytes_full must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Seconds to run one batch of `b` images of segment `seg` at width `w`.
///
/// Panics on an empty batch: a zero-size batch has no service time.
pub fn service_time(dev: &DeviceSpec, seg: &SegmentProfile, b: usize, w: WidthRatio) -> f64 {
    assert!(b > 0, "service_time of an empty batch");
    dev.t0 + dev.kappa * seg.compute_scale * b as f64 * w.squared()
}

/// Parameter bytes of one instance of segment `seg` at width `w`.
pub fn param_bytes(seg: &SegmentProfile, w: WidthRatio) -> u64 {
    (seg.param_bytes_full * w.squared()).ceil() as u64
}

/// Peak activation bytes while a batch of `b` runs at width `w`.
pub fn activation_bytes(seg: &SegmentProfile, b: usize, w: WidthRatio) -> u64 {
    (seg.activation_bytes_full * b as f64 * w.squared()).ceil() as u64
}

/// Linear idle-to-peak power model. Panics outside `u ∈ [0, 1]`.
pub fn power_draw(dev: &DeviceSpec, u: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&u),
        "utilization {u} outside [0, 1] for device {}",
        dev.name
    );
    dev.p_idle + (dev.p_peak - dev.p_idle) * u
}

/// Fraction of `[now - window, now]` covered by busy intervals.
///
/// Busy seconds are summed per interval and the total clamped to the
/// window, so intervals that overlap (several instances computing at once)
/// saturate rather than exceed 1.
pub fn utilization(intervals: &[(f64, f64)], now: f64, window: f64) -> f64 {
    assert!(window > 0.0, "utilization window must be positive");
    let lo = now - window;
    let busy: f64 = intervals
        .iter()
        .map(|&(s, e)| (e.min(now) - s.max(lo)).max(0.0))
        .sum();
    busy.min(window) / window
}

/// Mutable per-device bookkeeping: the serial execution cursor, the busy
/// history feeding the utilization window, and the energy ledger.
#[derive(Debug, Clone)]
pub struct DeviceState {
    /// Simulated time at which the device can start its next job.
    pub free_at: f64,
    intervals: VecDeque<(f64, f64)>,
    energy_j: f64,
    /// Left endpoint of the current piecewise-constant power segment.
    t_mark: f64,
    u_held: f64,
}

impl DeviceState {
    pub fn new() -> Self {
        DeviceState {
            free_at: 0.0,
            intervals: VecDeque::new(),
            energy_j: 0.0,
            t_mark: 0.0,
            u_held: 0.0,
        }
    }

    /// Records one busy interval `[start, end]`.
    pub fn record_busy(&mut self, start: f64, end: f64) {
        assert!(end >= start, "busy interval ends before it starts");
        self.intervals.push_back((start, end));
    }

    /// Utilization over the trailing `window`, dropping history that can no
    /// longer intersect it.
    pub fn utilization(&mut self, now: f64, window: f64) -> f64 {
        let lo = now - window;
        while matches!(self.intervals.front(), Some(&(_, e)) if e < lo) {
            self.intervals.pop_front();
        }
        utilization(self.intervals.make_contiguous(), now, window)
    }

    /// Extends the energy integral to `now`, then holds `u_now` until the
    /// next call. Time must not move backwards.
    pub fn advance_energy(&mut self, dev: &DeviceSpec, now: f64, u_now: f64) {
        let dt = now - self.t_mark;
        assert!(dt >= -1e-12, "energy ledger moved backwards in time");
        if dt > 0.0 {
            self.energy_j += power_draw(dev, self.u_held) * dt;
            self.t_mark = now;
        }
        self.u_held = u_now;
    }

    pub fn energy_j(&self) -> f64 {
        self.energy_j
    }
}

impl Default for DeviceState {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: f64) -> WidthRatio {
        WidthRatio::new(v).unwrap()
    }

    fn seg(c: f64) -> SegmentProfile {
        SegmentProfile {
            compute_scale: c,
            param_bytes_full: 8.0 * MIB,
            activation_bytes_full: 4.0 * MIB,
        }
    }

    #[test]
    fn service_time_full_width_single_image() {
        let dev = DeviceSpec::fast_default();
        let t = service_time(&dev, &seg(1.0), 1, w(1.0));
        assert!((t - 0.003).abs() < 1e-15);
    }

    #[test]
    fn service_time_scales_with_width_squared() {
        let dev = DeviceSpec::fast_default();
        // 0.002 + 0.001 * 1.0 * 1 * 0.25
        let t = service_time(&dev, &seg(1.0), 1, w(0.5));
        assert!((t - 0.00225).abs() < 1e-15);
        // Quadrupling batch at half width matches one image at full width
        // in the variable term.
        let t4 = service_time(&dev, &seg(1.0), 4, w(0.5));
        let t1 = service_time(&dev, &seg(1.0), 1, w(1.0));
        assert!((t4 - t1).abs() < 1e-15);
    }

    #[test]
    fn service_time_linear_in_batch_and_compute_scale() {
        let dev = DeviceSpec::slow_default();
        let s = seg(2.0);
        let t = service_time(&dev, &s, 8, w(1.0));
        assert!((t - (0.003 + 0.0025 * 2.0 * 8.0)).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "empty batch")]
    fn service_time_rejects_empty_batch() {
        service_time(&DeviceSpec::fast_default(), &seg(1.0), 0, w(1.0));
    }

    #[test]
    fn memory_footprints_scale_quadratically() {
        let s = seg(1.0);
        assert_eq!(param_bytes(&s, w(1.0)), 8 * 1024 * 1024);
        assert_eq!(param_bytes(&s, w(0.5)), 2 * 1024 * 1024);
        assert_eq!(activation_bytes(&s, 2, w(0.5)), 2 * 1024 * 1024);
        assert_eq!(activation_bytes(&s, 1, w(1.0)), 4 * 1024 * 1024);
    }

    #[test]
    fn power_endpoints_and_midpoint() {
        let dev = DeviceSpec::fast_default();
        assert_eq!(power_draw(&dev, 0.0), 60.0);
        assert_eq!(power_draw(&dev, 1.0), 250.0);
        assert_eq!(power_draw(&dev, 0.5), 155.0);
    }

    #[test]
    #[should_panic(expected = "outside [0, 1]")]
    fn power_rejects_bad_utilization() {
        power_draw(&DeviceSpec::fast_default(), 1.2);
    }

    #[test]
    fn utilization_sums_and_clips_to_window() {
        // Two half-second runs inside a 1 s window.
        let u = utilization(&[(9.0, 9.5), (9.5, 10.0)], 10.0, 1.0);
        assert!((u - 1.0).abs() < 1e-12);
        // Partial overlaps: 0.2 s + 0.1 s.
        let u = utilization(&[(8.0, 9.2), (9.5, 9.6)], 10.0, 1.0);
        assert!((u - 0.3).abs() < 1e-12);
        // Overlapping instances saturate at 1 rather than exceeding it.
        let u = utilization(&[(9.0, 10.0), (9.0, 10.0)], 10.0, 1.0);
        assert_eq!(u, 1.0);
        // Interval fully outside the window contributes nothing.
        let u = utilization(&[(1.0, 2.0)], 10.0, 1.0);
        assert_eq!(u, 0.0);
    }

    #[test]
    fn utilization_counts_future_scheduled_work_only_up_to_now() {
        // A job is recorded to run until 10.5 but only [9.8, 10.0] counts.
        let u = utilization(&[(9.8, 10.5)], 10.0, 1.0);
        assert!((u - 0.2).abs() < 1e-12);
    }

    #[test]
    fn device_state_prunes_stale_history() {
        let mut st = DeviceState::new();
        st.record_busy(0.0, 0.1);
        st.record_busy(9.4, 9.9);
        let u = st.utilization(10.0, 1.0);
        assert!((u - 0.5).abs() < 1e-12);
        assert_eq!(st.intervals.len(), 1);
    }

    #[test]
    fn energy_integrates_piecewise_constant_power() {
        let dev = DeviceSpec::fast_default();
        let mut st = DeviceState::new();
        // Idle for 1 s, then fully busy for 0.5 s.
        st.advance_energy(&dev, 1.0, 1.0);
        assert!((st.energy_j() - 60.0).abs() < 1e-9);
        st.advance_energy(&dev, 1.5, 0.0);
        assert!((st.energy_j() - (60.0 + 250.0 * 0.5)).abs() < 1e-9);
        // Zero-length step changes only the held utilization.
        st.advance_energy(&dev, 1.5, 1.0);
        assert!((st.energy_j() - 185.0).abs() < 1e-9);
    }

    #[test]
    #[should_panic(expected = "backwards")]
    fn energy_rejects_time_reversal() {
        let dev = DeviceSpec::fast_default();
        let mut st = DeviceState::new();
        st.advance_energy(&dev, 1.0, 0.0);
        st.advance_energy(&dev, 0.5, 0.0);
    }

    #[test]
    fn default_profile_validates() {
        assert!(ModelProfile::default().validate().is_ok());
        assert!(DeviceSpec::fast_default().validate().is_ok());
        assert!(DeviceSpec::slow_default().validate().is_ok());
    }
}
