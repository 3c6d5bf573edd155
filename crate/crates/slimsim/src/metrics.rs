//! Episode metrics: sample accumulation and the summary statistics the
//! reports are built from.
//!
//! All spreads are population statistics (divide by `n`), and percentiles
//! use the nearest-rank rule, so every number is reproducible from the
//! samples without interpolation choices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty sample set")]
    Empty,
    #[error("percentile must be in (0, 100], got {0}")]
    BadPercentile(f64),
}

/// Population mean and standard deviation.
pub fn mean_std(samples: &[f64]) -> Result<(f64, f64), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Population variance; zero for a single sample.
pub fn population_variance(samples: &[f64]) -> Result<f64, MetricsError> {
    mean_std(samples).map(|(_, s)| s * s)
}

/// Nearest-rank percentile: the value at 1-indexed rank `ceil(p/100 * n)`
/// of the sorted samples, clamped to at least rank 1.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(MetricsError::BadPercentile(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Everything one episode accumulates; merging two records is
/// concatenation, so sharded runs aggregate exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// End-to-end seconds per completed request.
    pub latency_samples: Vec<f64>,
    /// Joules attributed to each routed block at its completion.
    pub energy_samples: Vec<f64>,
    /// Across-server utilization variance, sampled on the telemetry tick.
    pub util_variance_samples: Vec<f64>,
    pub completed: u64,
    pub correct: u64,
    /// Simulated seconds covered by the episode.
    pub sim_span: f64,
    /// Routed-width histogram as sorted `(width, count)` pairs.
    #[serde(default)]
    pub width_counts: Vec<(f64, u64)>,
    /// Requests routed to each server, indexed by server.
    #[serde(default)]
    pub server_counts: Vec<u64>,
    /// Requests that entered the system.
    #[serde(default)]
    pub arrived: u64,
    /// Requests still pending, queued, or in flight at cutoff; arrivals
    /// always equal `completed + unfinished`.
    #[serde(default)]
    pub unfinished: u64,
    /// Highest resident VRAM observed on each server at any event.
    #[serde(default)]
    pub peak_resident_bytes: Vec<u64>,
}

impl MetricsRecord {
    pub fn merge(&mut self, other: &MetricsRecord) {
        self.latency_samples.extend_from_slice(&other.latency_samples);
        self.energy_samples.extend_from_slice(&other.energy_samples);
        self.util_variance_samples
            .extend_from_slice(&other.util_variance_samples);
        self.completed += other.completed;
        self.correct += other.correct;
        self.sim_span += other.sim_span;
        let mut counts: std::collections::BTreeMap<u64, u64> = self
            .width_counts
            .iter()
            .map(|&(w, n)| (w.to_bits(), n))
            .collect();
        for &(w, n) in &other.width_counts {
            *counts.entry(w.to_bits()).or_insert(0) += n;
        }
        self.width_counts = counts
            .into_iter()
            .map(|(bits, n)| (f64::from_bits(bits), n))
            .collect();
        if self.server_counts.len() < other.server_counts.len() {
            self.server_counts.resize(other.server_counts.len(), 0);
        }
        for (mine, theirs) in self.server_counts.iter_mut().zip(&other.server_counts) {
            *mine += theirs;
        }
        self.arrived += other.arrived;
        self.unfinished += other.unfinished;
        if self.peak_resident_bytes.len() < other.peak_resident_bytes.len() {
            self.peak_resident_bytes.resize(other.peak_resident_bytes.len(), 0);
        }
        for (mine, theirs) in
            self.peak_resident_bytes.iter_mut().zip(&other.peak_resident_bytes)
        {
            *mine = (*mine).max(*theirs);
        }
    }

    /// Fraction of routed requests sent to `server`; zero when nothing was
    /// routed.
    pub fn server_fraction(&self, server: usize) -> f64 {
        let total: u64 = self.server_counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.server_counts.get(server).copied().unwrap_or(0) as f64 / total as f64
    }

    /// Fraction of routed widths equal to `w`; zero when nothing was
    /// routed.
    pub fn width_fraction(&self, w: f64) -> f64 {
        let total: u64 = self.width_counts.iter().map(|&(_, n)| n).sum();
        if total == 0 {
            return 0.0;
        }
        let hits = self
            .width_counts
            .iter()
            .find(|&&(x, _)| x == w)
            .map(|&(_, n)| n)
            .unwrap_or(0);
        hits as f64 / total as f64
    }

    /// Fraction of completions whose correctness draw succeeded.
    pub fn accuracy(&self) -> Option<f64> {
        if self.completed == 0 {
            None
        } else {
            Some(self.correct as f64 / self.completed as f64)
        }
    }

    pub fn throughput(&self) -> Option<f64> {
        if self.sim_span > 0.0 {
            Some(self.completed as f64 / self.sim_span)
        } else {
            None
        }
    }

    pub fn summary(&self) -> RunSummary {
        let stat = |xs: &[f64]| mean_std(xs).ok();
        let (latency_mean, latency_std) = stat(&self.latency_samples).unzip();
        let (energy_mean, energy_std) = stat(&self.energy_samples).unzip();
        let (util_var_mean, util_var_std) = stat(&self.util_variance_samples).unzip();
        RunSummary {
            completed: self.completed,
            accuracy: self.accuracy(),
            throughput_per_s: self.throughput(),
            latency_mean,
            latency_std,
            latency_p95: percentile(&self.latency_samples, 95.0).ok(),
            energy_mean,
            energy_std,
            util_var_mean,
            util_var_std,
            width_fractions: {
                let total: u64 = self.width_counts.iter().map(|&(_, n)| n).sum();
                self.width_counts
                    .iter()
                    .map(|&(w, n)| (w, if total == 0 { 0.0 } else { n as f64 / total as f64 }))
                    .collect()
            },
        }
    }
}

/// Flattened statistics of one run, as persisted and printed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub completed: u64,
    pub accuracy: Option<f64>,
    pub throughput_per_s: Option<f64>,
    pub latency_mean: Option<f64>,
    pub latency_std: Option<f64>,
    pub latency_p95: Option<f64>,
    pub energy_mean: Option<f64>,
    pub energy_std: Option<f64>,
    pub util_var_mean: Option<f64>,
    pub util_var_std: Option<f64>,
    /// Share of routed widths per width value.
    #[serde(default)]
    pub width_fractions: Vec<(f64, f64)>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_population() {
        // Classic population example: mean 5, std exactly 2.
        let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        let (m, s) = mean_std(&xs).unwrap();
        assert_eq!(m, 5.0);
        assert!((s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mean_std_single_sample_has_zero_spread() {
        let (m, s) = mean_std(&[3.5]).unwrap();
        assert_eq!(m, 3.5);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn mean_std_empty_errors() {
        assert_eq!(mean_std(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn population_variance_matches_hand_value() {
        let v = population_variance(&[0.4, 0.6]).unwrap();
        assert!((v - 0.01).abs() < 1e-15);
    }

    #[test]
    fn percentile_nearest_rank() {
        let xs: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(percentile(&xs, 50.0).unwrap(), 5.0);
        assert_eq!(percentile(&xs, 90.0).unwrap(), 9.0);
        // rank ceil(9.5) = 10
        assert_eq!(percentile(&xs, 95.0).unwrap(), 10.0);
        assert_eq!(percentile(&xs, 100.0).unwrap(), 10.0);
        // tiny p clamps to the first order statistic
        assert_eq!(percentile(&xs, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn percentile_does_not_assume_sorted_input() {
        let xs = [9.0, 1.0, 5.0, 3.0, 7.0];
        assert_eq!(percentile(&xs, 50.0).unwrap(), 5.0);
    }

    #[test]
    fn percentile_rejects_bad_p() {
        let xs = [1.0];
        assert_eq!(percentile(&xs, 0.0), Err(MetricsError::BadPercentile(0.0)));
        assert_eq!(
            percentile(&xs, 100.1),
            Err(MetricsError::BadPercentile(100.1))
        );
        assert_eq!(percentile(&[], 50.0), Err(MetricsError::Empty));
    }

    #[test]
    fn merge_concatenates_and_sums() {
        let mut a = MetricsRecord {
            latency_samples: vec![1.0],
            energy_samples: vec![10.0],
            util_variance_samples: vec![0.1],
            completed: 1,
            correct: 1,
            sim_span: 5.0,
            width_counts: vec![(0.25, 2), (0.5, 1)],
            server_counts: vec![3, 0],
            arrived: 2,
            unfinished: 1,
            peak_resident_bytes: vec![100, 700],
        };
        let b = MetricsRecord {
            latency_samples: vec![2.0, 3.0],
            energy_samples: vec![],
            util_variance_samples: vec![0.2],
            completed: 2,
            correct: 1,
            sim_span: 5.0,
            width_counts: vec![(0.5, 3), (1.0, 1)],
            server_counts: vec![1, 4],
            arrived: 2,
            unfinished: 0,
            peak_resident_bytes: vec![300, 500, 900],
        };
        a.merge(&b);
        assert_eq!(a.latency_samples, vec![1.0, 2.0, 3.0]);
        assert_eq!(a.completed, 3);
        assert_eq!(a.correct, 2);
        assert_eq!(a.accuracy(), Some(2.0 / 3.0));
        assert_eq!(a.throughput(), Some(0.3));
        assert_eq!(a.width_counts, vec![(0.25, 2), (0.5, 4), (1.0, 1)]);
        assert!((a.width_fraction(0.5) - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(a.width_fraction(0.75), 0.0);
        assert_eq!(a.server_counts, vec![4, 4]);
        assert_eq!(a.server_fraction(0), 0.5);
        assert_eq!(a.server_fraction(9), 0.0);
        assert_eq!(a.arrived, 4);
        assert_eq!(a.unfinished, 1);
        assert_eq!(a.peak_resident_bytes, vec![300, 700, 900]);
    }

    #[test]
    fn summary_of_empty_record_is_all_none() {
        let s = MetricsRecord::default().summary();
        assert_eq!(s.completed, 0);
        assert!(s.accuracy.is_none());
        assert!(s.latency_mean.is_none());
        assert!(s.latency_p95.is_none());
    }
}
