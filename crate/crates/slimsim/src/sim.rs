//! Deterministic discrete-event engine: Poisson (or closed-loop) arrival
//! generation, the event queue, router-to-server hand-off, block reward
//! attribution, telemetry sampling, and episode execution.
//!
//! All mutable state is owned by the single-threaded event loop. Episodes
//! are reproducible bit for bit: simulated time only, and one seeded RNG
//! stream per logical source (arrivals, correctness draws, policy
//! sampling), all derived from the workload seed.

use crate::accuracy::{sample_correctness, AccuracyTable};
use crate::device::{power_draw, DeviceSpec, ModelProfile};
use crate::greedy::{ServerState, StepEvent};
use crate::metrics::MetricsRecord;
use crate::nn::index_from_cdf;
use crate::types::{Request, SchedulerKnobs, WidthRatio, NUM_SEGMENTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BinaryHeap, HashMap, VecDeque};
use thiserror::Error;

/// Telemetry sampling cadence, seconds.
pub const UTIL_SAMPLE_S: f64 = 0.05;
/// Router safety-net cadence; routing also runs on arrivals/completions.
pub const ROUTER_TICK_S: f64 = 0.01;
/// Idle-instance eviction cadence, seconds.
pub const UNLOADER_TICK_S: f64 = 0.25;

const ARRIVAL_STREAM: u64 = 1;
const CORRECTNESS_STREAM: u64 = 2;
const POLICY_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    BadConfig(String),
}

/// How long an episode generates load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// Arrivals stop after this much simulated time; the episode then
    /// drains.
    Seconds(f64),
    /// Exactly this many arrivals, whenever they land.
    Requests(u64),
}

/// Open-loop Poisson traffic or a closed loop of looping clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadMode {
    Open,
    /// Each client resubmits one request after an exponential think time;
    /// the episode ends exactly at the horizon.
    Closed { clients: usize, think_s: f64 },
}

/// The offered load of one episode; `seed` is the master seed every RNG
/// stream of the episode derives from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Poisson arrival rate (open mode only).
    pub rate_per_s: f64,
    pub horizon: Horizon,
    /// Sampling weights for the requested width of fresh arrivals, aligned
    /// with the configured width set. Routers may override widths later.
    pub width_demand: Vec<f64>,
    pub seed: u64,
    pub mode: WorkloadMode,
    /// Samples (latency, energy, utilization variance) recorded before
    /// this time are discarded; counters still cover the whole episode.
    pub warmup_s: f64,
    /// Extra simulated time allowed past the last arrival before an open
    /// episode is cut off.
    pub drain_cap_s: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            rate_per_s: 350.0,
            horizon: Horizon::Seconds(30.0),
            width_demand: vec![0.25, 0.25, 0.25, 0.25],
            seed: 1,
            mode: WorkloadMode::Open,
            warmup_s: 0.0,
            drain_cap_s: 120.0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self, n_widths: usize) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::BadConfig(m));
        match self.horizon {
            Horizon::Seconds(s) if !(s >= 0.0 && s.is_finite()) => {
                return err(format!("workload.horizon: seconds must be >= 0, got {s}"));
            }
            _ => {}
        }
        if self.width_demand.len() != n_widths {
            return err(format!(
                "workload.width_demand: {} weights for {} widths",
                self.width_demand.len(),
                n_widths
            ));
        }
        if self.width_demand.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return err("workload.width_demand: weights must be finite and >= 0".into());
        }
        let sum: f64 = self.width_demand.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return err(format!("workload.width_demand: weights sum to {sum}, expected 1"));
        }
        match self.mode {
            WorkloadMode::Open => {
                if !(self.rate_per_s > 0.0 && self.rate_per_s.is_finite()) {
                    return err(format!(
                        "workload.rate_per_s: must be positive, got {}",
                        self.rate_per_s
                    ));
                }
            }
            WorkloadMode::Closed { clients, think_s } => {
                if clients == 0 {
                    return err("workload.mode.clients: must be >= 1".into());
                }
                if !(think_s >= 0.0 && think_s.is_finite()) {
                    return err(format!("workload.mode.think_s: must be >= 0, got {think_s}"));
                }
                if matches!(self.horizon, Horizon::Requests(_)) {
                    return err("workload.horizon: closed mode requires a seconds horizon".into());
                }
            }
        }
        if !(self.warmup_s >= 0.0 && self.drain_cap_s >= 0.0) {
            return err("workload: warmup_s and drain_cap_s must be >= 0".into());
        }
        Ok(())
    }
}

/// Pre-generates the open-loop arrival sequence: exponential gaps at the
/// configured rate, widths i.i.d. from the demand distribution.
pub fn generate_arrivals(
    spec: &WorkloadSpec,
    widths: &crate::types::WidthSet,
    rng: &mut ChaCha8Rng,
) -> Vec<Request> {
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut id = 0u64;
    loop {
        t += exp_draw(rng, spec.rate_per_s);
        match spec.horizon {
            Horizon::Seconds(h) => {
                if t >= h {
                    break;
                }
            }
            Horizon::Requests(n) => {
                if id >= n {
                    break;
                }
            }
        }
        let w = sample_width(&spec.width_demand, widths, rng);
        out.push(Request::new(id, w, t));
        id += 1;
        if matches!(spec.horizon, Horizon::Requests(n) if id >= n) {
            break;
        }
    }
    out
}

fn exp_draw(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    // Inverse-CDF exponential; 1 - u avoids ln(0).
    -(1.0 - rng.gen::<f64>()).ln() / rate
}

fn sample_width(
    demand: &[f64],
    widths: &crate::types::WidthSet,
    rng: &mut ChaCha8Rng,
) -> WidthRatio {
    let idx = index_from_cdf(demand, rng.gen::<f64>());
    widths.get(idx).expect("width_demand aligned with width set")
}

/// Per-server telemetry at a snapshot instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerTelemetry {
    pub queue_len: usize,
    pub power_w: f64,
    pub util: f64,
}

/// What the router sees: global queue depth, completions so far, and
/// per-server telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub q_fifo: usize,
    pub c_done: u64,
    pub per_server: Vec<ServerTelemetry>,
}

impl GlobalState {
    /// Feature vector `[q_fifo, c_done, q_1, P_1, U_1, ..., q_N, P_N, U_N]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + 3 * self.per_server.len());
        v.push(self.q_fifo as f64);
        v.push(self.c_done as f64);
        for s in &self.per_server {
            v.push(s.queue_len as f64);
            v.push(s.power_w);
            v.push(s.util);
        }
        v
    }
}

/// Population variance of per-server utilizations (fractions).
pub fn util_variance(per_server_util: &[f64]) -> f64 {
    assert!(!per_server_util.is_empty(), "no servers");
    let n = per_server_util.len() as f64;
    let mean = per_server_util.iter().sum::<f64>() / n;
    per_server_util.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / n
}

/// One routing decision applied to the front of the pending queue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteChoice {
    pub server: usize,
    /// Width for the routed segment; `None` keeps each request's own.
    pub width: Option<WidthRatio>,
    /// How many pending requests this decision covers (at least 1).
    pub group: usize,
}

/// Measurements of one completed block, delivered to the router that
/// scheduled it.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutcome {
    /// Decision to last member's segment completion, seconds. Blocks cut
    /// off by the episode end report the latency observed so far.
    pub latency: f64,
    /// Mean per-server power at completion, watts.
    pub mean_power: f64,
    /// Per-server utilization fractions at completion.
    pub utils: Vec<f64>,
    /// Mean accuracy prior of the members' executed prefixes; members that
    /// just finished their last segment contribute their 0/1 correctness
    /// draw instead.
    pub prior: f64,
}

/// A routing policy driving the engine.
pub trait Router {
    /// Assigns the next block. `block_id` keys the later
    /// [`Router::on_block_done`] callback.
    fn decide(&mut self, block_id: u64, state: &GlobalState, rng: &mut ChaCha8Rng) -> RouteChoice;

    /// A block this router scheduled has finished its routed segment.
    fn on_block_done(&mut self, _block_id: u64, _outcome: &BlockOutcome) {}
}

/// Uniform-random baseline: random server and group, widths left as the
/// workload sampled them.
pub struct RandomRouter {
    pub group_sizes: Vec<usize>,
}

impl Default for RandomRouter {
    fn default() -> Self {
        RandomRouter { group_sizes: vec![1, 2, 4, 8] }
    }
}

impl Router for RandomRouter {
    fn decide(&mut self, _block: u64, state: &GlobalState, rng: &mut ChaCha8Rng) -> RouteChoice {
        let a = crate::ppo::random_router(
            state.per_server.len(),
            // The width head is drawn for stream parity but not applied.
            4,
            self.group_sizes.len(),
            rng,
        );
        RouteChoice { server: a.server, width: None, group: self.group_sizes[a.group] }
    }
}

/// Sends everything to one server, widths untouched; used by sweeps.
pub struct FixedRouter {
    pub server: usize,
}

impl Router for FixedRouter {
    fn decide(&mut self, _block: u64, _state: &GlobalState, _rng: &mut ChaCha8Rng) -> RouteChoice {
        RouteChoice { server: self.server, width: None, group: usize::MAX }
    }
}

#[derive(Debug)]
enum EventKind {
    Arrival(Request),
    /// Batch or instance-load completion (`requests` empty for loads).
    BatchComplete { server: usize, instance: u64, requests: Vec<Request> },
    UtilSample,
    UnloaderTick,
    RouterTick,
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Event {}

impl Ord for Event {
    // Inverted so the std max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// One telemetry row, recorded every sample tick when tracing is on.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub time: f64,
    pub servers: Vec<TraceServer>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceServer {
    pub queue_len: usize,
    pub power_w: f64,
    pub util: f64,
    pub vram_bytes: u64,
}

struct BlockAgg {
    decided_at: f64,
    remaining: usize,
    prior_sum: f64,
    members: usize,
}

/// The event loop and all episode state.
pub struct Engine<'a> {
    servers: Vec<ServerState>,
    profile: ModelProfile,
    knobs: SchedulerKnobs,
    workload: WorkloadSpec,
    table: &'a AccuracyTable,
    router: &'a mut dyn Router,

    heap: BinaryHeap<Event>,
    next_seq: u64,
    last_time: f64,

    pending: VecDeque<Request>,
    blocks: HashMap<u64, BlockAgg>,
    block_of: HashMap<u64, u64>,
    next_block: u64,
    next_request_id: u64,

    arrivals_remaining: u64,
    last_arrival_time: f64,
    arrived: u64,
    in_flight: usize,
    completed: u64,

    arrival_rng: ChaCha8Rng,
    correctness_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,

    metrics: MetricsRecord,
    width_counts: std::collections::BTreeMap<u64, u64>,
    pub trace: Option<Vec<TraceRow>>,
}

fn stream(seed: u64, idx: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx);
    rng
}

impl<'a> Engine<'a> {
    pub fn new(
        devices: &[DeviceSpec],
        profile: &ModelProfile,
        knobs: &SchedulerKnobs,
        workload: &WorkloadSpec,
        table: &'a AccuracyTable,
        router: &'a mut dyn Router,
    ) -> Result<Self, SimError> {
        if devices.is_empty() {
            return Err(SimError::BadConfig("cluster.devices: need at least one".into()));
        }
        for (i, d) in devices.iter().enumerate() {
            d.validate().map_err(|e| SimError::BadConfig(format!("cluster.devices[{i}]: {e}")))?;
            if knobs.vram_budget_bytes > d.vram_total_bytes {
                return Err(SimError::BadConfig(format!(
                    "knobs.vram_budget_bytes ({}) exceeds cluster.devices[{i}].vram_total_bytes ({})",
                    knobs.vram_budget_bytes, d.vram_total_bytes
                )));
            }
        }
        profile.validate().map_err(|e| SimError::BadConfig(format!("profile: {e}")))?;
        knobs.validate().map_err(|e| SimError::BadConfig(format!("knobs: {e}")))?;
        workload.validate(knobs.widths.len())?;

        let servers = devices
            .iter()
            .enumerate()
            .map(|(i, d)| ServerState::new(i, d.clone(), knobs.clone()))
            .collect();

        let mut eng = Engine {
            servers,
            profile: profile.clone(),
            knobs: knobs.clone(),
            workload: workload.clone(),
            table,
            router,
            heap: BinaryHeap::new(),
            next_seq: 0,
            last_time: 0.0,
            pending: VecDeque::new(),
            blocks: HashMap::new(),
            block_of: HashMap::new(),
            next_block: 0,
            next_request_id: 0,
            arrivals_remaining: 0,
            last_arrival_time: 0.0,
            arrived: 0,
            in_flight: 0,
            completed: 0,
            arrival_rng: stream(workload.seed, ARRIVAL_STREAM),
            correctness_rng: stream(workload.seed, CORRECTNESS_STREAM),
            policy_rng: stream(workload.seed, POLICY_STREAM),
            metrics: MetricsRecord {
                server_counts: vec![0; devices.len()],
                peak_resident_bytes: vec![0; devices.len()],
                ..MetricsRecord::default()
            },
            width_counts: std::collections::BTreeMap::new(),
            trace: None,
        };
        eng.seed_initial_events();
        Ok(eng)
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    fn seed_initial_events(&mut self) {
        match self.workload.mode {
            WorkloadMode::Open => {
                let spec = self.workload.clone();
                let widths = self.knobs.widths.clone();
                let arrivals = generate_arrivals(&spec, &widths, &mut self.arrival_rng);
                self.arrivals_remaining = arrivals.len() as u64;
                self.next_request_id = arrivals.len() as u64;
                self.last_arrival_time =
                    arrivals.last().map(|r| r.t_arrival).unwrap_or(0.0);
                for req in arrivals {
                    self.push(req.t_arrival, EventKind::Arrival(req));
                }
            }
            WorkloadMode::Closed { clients, think_s } => {
                for _ in 0..clients {
                    let t = if think_s > 0.0 {
                        exp_draw(&mut self.arrival_rng, 1.0 / think_s)
                    } else {
                        0.0
                    };
                    let w = sample_width(
                        &self.workload.width_demand,
                        &self.knobs.widths,
                        &mut self.arrival_rng,
                    );
                    let id = self.next_request_id;
                    self.next_request_id += 1;
                    self.push(t, EventKind::Arrival(Request::new(id, w, t)));
                }
            }
        }
        self.push(UTIL_SAMPLE_S, EventKind::UtilSample);
        self.push(ROUTER_TICK_S, EventKind::RouterTick);
        self.push(UNLOADER_TICK_S, EventKind::UnloaderTick);
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
    }

    fn deadline(&self) -> f64 {
        match (self.workload.mode, self.workload.horizon) {
            (WorkloadMode::Closed { .. }, Horizon::Seconds(h)) => h,
            (_, Horizon::Seconds(h)) => h + self.workload.drain_cap_s,
            (_, Horizon::Requests(_)) => self.last_arrival_time + self.workload.drain_cap_s,
        }
    }

    fn has_work(&self) -> bool {
        self.arrivals_remaining > 0
            || !self.pending.is_empty()
            || self.in_flight > 0
            || self.servers.iter().any(|s| !s.queue.is_empty())
    }

    /// Fresh telemetry snapshot.
    pub fn snapshot(&mut self, now: f64) -> GlobalState {
        let queued: usize = self.servers.iter().map(|s| s.queue.len()).sum();
        let per_server = self
            .servers
            .iter_mut()
            .map(|s| {
                let util = s.device_state.utilization(now, s.device.util_window_s);
                ServerTelemetry {
                    queue_len: s.queue.len(),
                    power_w: power_draw(&s.device, util),
                    util,
                }
            })
            .collect();
        GlobalState { q_fifo: self.pending.len() + queued, c_done: self.completed, per_server }
    }

    fn fresh_utils(&mut self, now: f64) -> Vec<f64> {
        self.servers
            .iter_mut()
            .map(|s| s.device_state.utilization(now, s.device.util_window_s))
            .collect()
    }

    fn advance_all_energy(&mut self, now: f64) {
        for i in 0..self.servers.len() {
            let window = self.servers[i].device.util_window_s;
            let u = self.servers[i].device_state.utilization(now, window);
            let dev = self.servers[i].device.clone();
            self.servers[i].device_state.advance_energy(&dev, now, u);
        }
    }

    fn schedule_step_events(&mut self, server: usize, evs: Vec<StepEvent>) {
        for ev in evs {
            match ev {
                StepEvent::BatchStarted { instance, requests, done_at } => {
                    self.in_flight += requests.len();
                    self.push(done_at, EventKind::BatchComplete { server, instance, requests });
                }
                StepEvent::LoadStarted { instance, done_at } => {
                    self.push(
                        done_at,
                        EventKind::BatchComplete { server, instance, requests: Vec::new() },
                    );
                }
            }
        }
    }

    /// Repeats dispatch attempts on one server until no batch starts.
    fn drain_dispatch(&mut self, server: usize, now: f64) {
        loop {
            let evs = self.servers[server].dispatch_step(&self.profile, now);
            let progressed = evs
                .iter()
                .any(|e| matches!(e, StepEvent::BatchStarted { .. }));
            self.schedule_step_events(server, evs);
            if !progressed {
                break;
            }
        }
    }

    /// Lets the router consume the whole pending queue, one decision at a
    /// time.
    fn drain_router(&mut self, now: f64) {
        while !self.pending.is_empty() {
            let state = self.snapshot(now);
            let block_id = self.next_block;
            self.next_block += 1;
            let choice = self.router.decide(block_id, &state, &mut self.policy_rng);
            assert!(choice.server < self.servers.len(), "router chose server {}", choice.server);
            assert!(choice.group >= 1, "router chose an empty group");
            if let Some(w) = choice.width {
                assert!(self.knobs.widths.contains(w), "router chose width {w} outside the set");
            }

            let take = choice.group.min(self.pending.len());
            self.blocks.insert(
                block_id,
                BlockAgg { decided_at: now, remaining: take, prior_sum: 0.0, members: take },
            );
            for _ in 0..take {
                let mut req = self.pending.pop_front().expect("pending non-empty");
                if let Some(w) = choice.width {
                    req.w_req = w;
                    *self.width_counts.entry(w.get().to_bits()).or_insert(0) += 1;
                } else {
                    *self.width_counts.entry(req.w_req.get().to_bits()).or_insert(0) += 1;
                }
                self.block_of.insert(req.id, block_id);
                self.servers[choice.server].enqueue(req, now);
            }
            self.metrics.server_counts[choice.server] += take as u64;
            self.drain_dispatch(choice.server, now);
        }
    }

    fn record_stage_done(&mut self, req: &Request, stage_value: f64, now: f64) {
        let block_id = self.block_of.remove(&req.id).expect("routed request has a block");
        let done = {
            let agg = self.blocks.get_mut(&block_id).expect("live block");
            agg.prior_sum += stage_value;
            agg.remaining -= 1;
            agg.remaining == 0
        };
        if done {
            let agg = self.blocks.remove(&block_id).expect("live block");
            let utils = self.fresh_utils(now);
            let powers: Vec<f64> = self
                .servers
                .iter()
                .zip(&utils)
                .map(|(s, &u)| power_draw(&s.device, u))
                .collect();
            let mean_power = powers.iter().sum::<f64>() / powers.len() as f64;
            let latency = now - agg.decided_at;
            if now >= self.workload.warmup_s {
                self.metrics.energy_samples.push(mean_power * latency);
            }
            let outcome = BlockOutcome {
                latency,
                mean_power,
                utils,
                prior: agg.prior_sum / agg.members as f64,
            };
            self.router.on_block_done(block_id, &outcome);
        }
    }

    fn handle_completion(&mut self, server: usize, instance: u64, requests: Vec<Request>, now: f64) {
        self.servers[server].on_complete(instance, now);
        for mut req in requests {
            self.in_flight -= 1;
            let executed = req.w_req;
            req.complete_segment(executed);
            if req.is_done() {
                // Final segment: the block's accuracy signal is the
                // realized 0/1 draw, not the prior.
                let p = self.table.prior_lookup(&req.width_history);
                let correct = sample_correctness(p, &mut self.correctness_rng);
                self.record_stage_done(&req, correct as u8 as f64, now);
                self.completed += 1;
                self.metrics.completed += 1;
                self.metrics.correct += correct as u64;
                if now >= self.workload.warmup_s {
                    self.metrics.latency_samples.push(now - req.t_arrival);
                }
                if let WorkloadMode::Closed { think_s, .. } = self.workload.mode {
                    let gap = if think_s > 0.0 {
                        exp_draw(&mut self.arrival_rng, 1.0 / think_s)
                    } else {
                        0.0
                    };
                    let w = sample_width(
                        &self.workload.width_demand,
                        &self.knobs.widths,
                        &mut self.arrival_rng,
                    );
                    let id = self.next_request_id;
                    self.next_request_id += 1;
                    self.push(now + gap, EventKind::Arrival(Request::new(id, w, now + gap)));
                }
            } else {
                let prior = self.table.prior_lookup(&req.width_history);
                self.record_stage_done(&req, prior, now);
                req.t_enqueue = now;
                self.pending.push_back(req);
            }
        }
        self.drain_dispatch(server, now);
        self.drain_router(now);
    }

    fn handle_util_sample(&mut self, now: f64) {
        let utils = self.fresh_utils(now);
        for (s, &u) in self.servers.iter_mut().zip(&utils) {
            s.latest_util = Some(u);
            let dev = s.device.clone();
            s.device_state.advance_energy(&dev, now, u);
        }
        if now >= self.workload.warmup_s {
            self.metrics.util_variance_samples.push(util_variance(&utils));
        }
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRow {
                time: now,
                servers: self
                    .servers
                    .iter()
                    .zip(&utils)
                    .map(|(s, &u)| TraceServer {
                        queue_len: s.queue.len(),
                        power_w: power_draw(&s.device, u),
                        util: u,
                        vram_bytes: s.vram_used(),
                    })
                    .collect(),
            });
        }
    }

    /// Runs to completion and returns the episode metrics.
    pub fn run(self) -> MetricsRecord {
        self.run_traced().0
    }

    /// Runs to completion, also handing back collected telemetry rows
    /// (empty unless tracing was enabled).
    pub fn run_traced(mut self) -> (MetricsRecord, Vec<TraceRow>) {
        let deadline = self.deadline();
        let mut end_time = 0.0;
        while let Some(ev) = self.heap.pop() {
            if ev.time > deadline {
                end_time = deadline;
                break;
            }
            debug_assert!(ev.time >= self.last_time, "event time went backwards");
            self.last_time = ev.time;
            end_time = ev.time;
            let now = ev.time;
            match ev.kind {
                EventKind::Arrival(req) => {
                    if self.arrivals_remaining > 0 {
                        self.arrivals_remaining -= 1;
                    }
                    self.arrived += 1;
                    self.pending.push_back(req);
                    self.drain_router(now);
                }
                EventKind::BatchComplete { server, instance, requests } => {
                    self.handle_completion(server, instance, requests, now);
                }
                EventKind::UtilSample => {
                    self.handle_util_sample(now);
                    if self.has_work() || now < self.horizon_end() {
                        self.push(now + UTIL_SAMPLE_S, EventKind::UtilSample);
                    }
                }
                EventKind::UnloaderTick => {
                    for i in 0..self.servers.len() {
                        self.servers[i].unloader_step(now);
                    }
                    if self.has_work() || now < self.horizon_end() {
                        self.push(now + UNLOADER_TICK_S, EventKind::UnloaderTick);
                    }
                }
                EventKind::RouterTick => {
                    self.drain_router(now);
                    for i in 0..self.servers.len() {
                        if !self.servers[i].queue.is_empty() {
                            self.drain_dispatch(i, now);
                        }
                    }
                    if self.has_work() || now < self.horizon_end() {
                        self.push(now + ROUTER_TICK_S, EventKind::RouterTick);
                    }
                }
            }
            debug_assert_eq!(
                self.arrived,
                self.completed
                    + self.pending.len() as u64
                    + self.servers.iter().map(|s| s.queue.len() as u64).sum::<u64>()
                    + self.in_flight as u64,
                "request conservation broken at t={now}"
            );
            for (i, s) in self.servers.iter().enumerate() {
                let resident: u64 = s.instances.iter().map(|inst| inst.resident_bytes).sum();
                debug_assert_eq!(
                    resident,
                    s.vram_used(),
                    "vram ledger drifted on server {i} at t={now}"
                );
                debug_assert!(
                    resident <= self.knobs.vram_budget_bytes,
                    "vram over budget on server {i} at t={now}"
                );
                if resident > self.metrics.peak_resident_bytes[i] {
                    self.metrics.peak_resident_bytes[i] = resident;
                }
            }
        }
        // Blocks still in flight at cutoff report a censored outcome: the
        // latency observed so far. Without this a jammed episode would
        // feed the router only the blocks that finished quickly.
        if !self.blocks.is_empty() {
            let utils = self.fresh_utils(end_time);
            let powers: Vec<f64> = self
                .servers
                .iter()
                .zip(&utils)
                .map(|(s, &u)| power_draw(&s.device, u))
                .collect();
            let mean_power = powers.iter().sum::<f64>() / powers.len() as f64;
            let mut live: Vec<(u64, BlockAgg)> = self.blocks.drain().collect();
            live.sort_by_key(|(id, _)| *id);
            for (block_id, agg) in live {
                let outcome = BlockOutcome {
                    latency: end_time - agg.decided_at,
                    mean_power,
                    utils: utils.clone(),
                    prior: agg.prior_sum / agg.members as f64,
                };
                self.router.on_block_done(block_id, &outcome);
            }
        }
        self.advance_all_energy(end_time);
        self.metrics.sim_span = end_time;
        self.metrics.width_counts = self
            .width_counts
            .iter()
            .map(|(&bits, &n)| (f64::from_bits(bits), n))
            .collect();
        self.metrics.arrived = self.arrived;
        self.metrics.unfinished = self.pending.len() as u64
            + self.servers.iter().map(|s| s.queue.len() as u64).sum::<u64>()
            + self.in_flight as u64;
        let trace = self.trace.take().unwrap_or_default();
        (self.metrics, trace)
    }

    fn horizon_end(&self) -> f64 {
        match self.workload.horizon {
            Horizon::Seconds(h) => h,
            Horizon::Requests(_) => 0.0,
        }
    }

    pub fn arrived(&self) -> u64 {
        self.arrived
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }
}

/// Request chaining: records the executed width and either forwards the
/// request to its next segment or reports the finished width path.
#[derive(Debug, Clone, PartialEq)]
pub enum StageResult {
    Chained(Request),
    Finished { widths: [WidthRatio; NUM_SEGMENTS], t_arrival: f64 },
}

pub fn advance_segment(mut req: Request, executed: WidthRatio, now: f64) -> StageResult {
    req.complete_segment(executed);
    if req.is_done() {
        let widths: [WidthRatio; NUM_SEGMENTS] =
            req.width_history.clone().try_into().expect("exactly four widths");
        StageResult::Finished { widths, t_arrival: req.t_arrival }
    } else {
        req.t_enqueue = now;
        StageResult::Chained(req)
    }
}

/// One full episode under the given router.
pub fn run_episode(
    devices: &[DeviceSpec],
    profile: &ModelProfile,
    knobs: &SchedulerKnobs,
    workload: &WorkloadSpec,
    table: &AccuracyTable,
    router: &mut dyn Router,
) -> Result<MetricsRecord, SimError> {
    Ok(Engine::new(devices, profile, knobs, workload, table, router)?.run())
}
