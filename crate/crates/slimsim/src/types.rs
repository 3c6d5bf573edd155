//! Core domain types shared by the executor, the simulator, and the router.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of sequential segments in the partitioned backbone.
pub const NUM_SEGMENTS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum TypeError {
    #[error("width ratio must be finite and in (0, 1], got {0}")]
    BadWidth(f64),
    #[error("width set must be non-empty")]
    EmptyWidthSet,
    #[error("width {0} not in the configured width set")]
    WidthNotInSet(f64),
}

/// Channel-width ratio of one segment execution.
///
/// Validated finite and in `(0, 1]` at construction, so equality and
/// ordering over the raw bits are sound. Widths used anywhere in a run must
/// additionally belong to the configured [`WidthSet`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct WidthRatio(f64);

impl WidthRatio {
    pub fn new(v: f64) -> Result<Self, TypeError> {
        if v.is_finite() && v > 0.0 && v <= 1.0 {
            Ok(WidthRatio(v))
        } else {
            Err(TypeError::BadWidth(v))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// `w^2`, the factor by which both compute and memory scale.
    pub fn squared(self) -> f64 {
        self.0 * self.0
    }
}

impl PartialEq for WidthRatio {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl Eq for WidthRatio {}

impl PartialOrd for WidthRatio {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for WidthRatio {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl std::hash::Hash for WidthRatio {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

impl TryFrom<f64> for WidthRatio {
    type Error = TypeError;
    fn try_from(v: f64) -> Result<Self, TypeError> {
        WidthRatio::new(v)
    }
}

impl From<WidthRatio> for f64 {
    fn from(w: WidthRatio) -> f64 {
        w.0
    }
}

impl std::fmt::Display for WidthRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The fixed, sorted set of widths a run may use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WidthSet {
    widths: Vec<WidthRatio>,
}

impl WidthSet {
    /// Sorts and deduplicates; rejects empty input and invalid ratios.
    pub fn new(raw: &[f64]) -> Result<Self, TypeError> {
        let mut widths = raw
            .iter()
            .map(|&v| WidthRatio::new(v))
            .collect::<Result<Vec<_>, _>>()?;
        widths.sort();
        widths.dedup();
        if widths.is_empty() {
            return Err(TypeError::EmptyWidthSet);
        }
        Ok(WidthSet { widths })
    }

    pub fn contains(&self, w: WidthRatio) -> bool {
        self.widths.binary_search(&w).is_ok()
    }

    pub fn index_of(&self, w: WidthRatio) -> Option<usize> {
        self.widths.binary_search(&w).ok()
    }

    pub fn get(&self, idx: usize) -> Option<WidthRatio> {
        self.widths.get(idx).copied()
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = WidthRatio> + '_ {
        self.widths.iter().copied()
    }

    pub fn as_slice(&self) -> &[WidthRatio] {
        &self.widths
    }

    /// Smallest width in the set that is `>= w`, if any.
    pub fn ceil(&self, w: WidthRatio) -> Option<WidthRatio> {
        match self.widths.binary_search(&w) {
            Ok(i) | Err(i) => self.widths.get(i).copied(),
        }
    }
}

impl Default for WidthSet {
    /// The canonical four-point slimming grid.
    fn default() -> Self {
        WidthSet::new(&[0.25, 0.5, 0.75, 1.0]).unwrap()
    }
}

impl TryFrom<Vec<f64>> for WidthSet {
    type Error = TypeError;
    fn try_from(v: Vec<f64>) -> Result<Self, TypeError> {
        WidthSet::new(&v)
    }
}

impl From<WidthSet> for Vec<f64> {
    fn from(s: WidthSet) -> Vec<f64> {
        s.widths.into_iter().map(f64::from).collect()
    }
}

/// One inference request in flight.
///
/// `segment` is the next segment to execute (`NUM_SEGMENTS` once done) and
/// `width_history` always holds exactly the widths of the segments already
/// completed, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    pub segment: usize,
    /// Width the router chose for the next segment.
    pub w_req: WidthRatio,
    /// Width the previous segment ran at; `None` before the first.
    pub w_prev: Option<WidthRatio>,
    pub width_history: Vec<WidthRatio>,
    pub t_arrival: f64,
    /// Time this request last entered a queue; reset on every hop.
    pub t_enqueue: f64,
}

impl Request {
    pub fn new(id: u64, w_req: WidthRatio, t_arrival: f64) -> Self {
        Request {
            id,
            segment: 0,
            w_req,
            w_prev: None,
            width_history: Vec::with_capacity(NUM_SEGMENTS),
            t_arrival,
            t_enqueue: t_arrival,
        }
    }

    pub fn batch_key(&self) -> BatchKey {
        BatchKey {
            segment: self.segment,
            w_req: self.w_req,
            w_prev: self.w_prev,
        }
    }

    pub fn is_done(&self) -> bool {
        self.segment >= NUM_SEGMENTS
    }

    /// Records that the pending segment ran at `w` and steps to the next.
    pub fn complete_segment(&mut self, w: WidthRatio) {
        debug_assert!(self.segment < NUM_SEGMENTS);
        debug_assert_eq!(self.width_history.len(), self.segment);
        self.width_history.push(w);
        self.segment += 1;
        self.w_prev = Some(w);
    }
}

/// Compatibility key for batching: requests may share a batch only when
/// all three components match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BatchKey {
    pub segment: usize,
    pub w_req: WidthRatio,
    pub w_prev: Option<WidthRatio>,
}

/// A request that has finished all segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub id: u64,
    pub widths: [WidthRatio; NUM_SEGMENTS],
    pub t_arrival: f64,
    pub t_completion: f64,
    /// Bernoulli draw against the accuracy prior of the width path.
    pub correct: bool,
}

impl Completion {
    pub fn latency(&self) -> f64 {
        self.t_completion - self.t_arrival
    }
}

/// One loaded (segment, width) replica on a device.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceState {
    pub segment: usize,
    pub width: WidthRatio,
    /// Index of the server this replica lives on.
    pub device: usize,
    pub busy: bool,
    /// True while the initial weight transfer is still running.
    pub loading: bool,
    /// Simulated time the instance last finished work (or finished loading).
    pub t_last: f64,
    /// Parameter bytes held while loaded.
    pub resident_bytes: u64,
    /// Monotone creation index, unique per server; best-fit ties break on it.
    pub created: u64,
}

/// Knobs of the per-server greedy executor and its offered load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerKnobs {
    /// Offered arrival rate, requests per second.
    pub rate_per_s: f64,
    /// Maximum batch size.
    pub batch_max: usize,
    /// VRAM budget in bytes; instance loads must keep the projection under it.
    pub vram_budget_bytes: u64,
    /// Utilization at or above which new loads are blocked.
    pub util_block: f64,
    /// Idle seconds after which the unloader evicts an instance.
    pub idle_unload_s: f64,
    /// Queue depth for one batch key that triggers scale-up. At the
    /// default of 1 any unserveable head loads on demand; larger values
    /// make a blocked head wait for same-key company, which can park a
    /// queue indefinitely under width-mixed traffic.
    pub scale_trigger_depth: usize,
    /// Maximum instances a single scale-up may load; zero disables scaling.
    pub scale_max_new: usize,
    /// Simulated seconds to load one instance onto the device.
    pub load_time_s: f64,
    /// The slimming set all widths are drawn from.
    pub widths: WidthSet,
}

impl Default for SchedulerKnobs {
    fn default() -> Self {
        SchedulerKnobs {
            rate_per_s: 350.0,
            batch_max: 8,
            vram_budget_bytes: 1 << 30,
            util_block: 0.95,
            idle_unload_s: 2.0,
            scale_trigger_depth: 1,
            scale_max_new: 2,
            load_time_s: 0.05,
            widths: WidthSet::default(),
        }
    }
}

impl SchedulerKnobs {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rate_per_s > 0.0 && self.rate_per_s.is_finite()) {
            return Err(format!("rate_per_s must be positive, got {}", self.rate_per_s));
        }
        if self.batch_max == 0 {
            return Err("batch_max must be >= 1".into());
        }
        if !(self.util_block > 0.0 && self.util_block <= 1.0) {
            return Err(format!("util_block must be in (0, 1], got {}", self.util_block));
        }
        if self.idle_unload_s <= 0.0 || !self.idle_unload_s.is_finite() {
            return Err(format!("idle_unload_s must be positive, got {}", self.idle_unload_s));
        }
        if self.scale_trigger_depth == 0 {
            return Err("scale_trigger_depth must be >= 1".into());
        }
        if self.load_time_s < 0.0 || !self.load_time_s.is_finite() {
            return Err(format!("load_time_s must be >= 0, got {}", self.load_time_s));
        }
        Ok(())
    }
}
