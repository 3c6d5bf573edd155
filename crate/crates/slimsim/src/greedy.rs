//! Per-server greedy executor: batching by compatibility key, best-fit
//! instance selection, VRAM- and utilization-gated loading, opportunistic
//! scale-up, and idle unloading.
//!
//! The device executes one job at a time. Dispatch claims an instance
//! immediately but the job's span on the device starts when the device
//! frees, so queueing delay emerges naturally once offered load approaches
//! capacity. Instance loads occupy the device the same way.

use crate::device::{param_bytes, service_time, DeviceSpec, DeviceState, ModelProfile};
use crate::types::{BatchKey, InstanceState, Request, SchedulerKnobs, WidthRatio};
use std::collections::VecDeque;

/// Work started by a dispatch step; the event loop schedules a completion
/// for each at `done_at`.
#[derive(Debug, Clone, PartialEq)]
pub enum StepEvent {
    BatchStarted {
        instance: u64,
        requests: Vec<Request>,
        done_at: f64,
    },
    LoadStarted { instance: u64, done_at: f64 },
}

/// One simulated server: a FIFO queue, the loaded instances, and the
/// device bookkeeping.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub index: usize,
    pub device: DeviceSpec,
    pub knobs: SchedulerKnobs,
    pub queue: VecDeque<Request>,
    pub instances: Vec<InstanceState>,
    pub device_state: DeviceState,
    /// Most recent utilization sample; loads are blocked at or above the
    /// threshold once a sample exists.
    pub latest_util: Option<f64>,
    vram_used: u64,
    next_instance: u64,
}

/// Removes up to `b_max` requests matching `key` from the queue, scanning
/// front to back; non-matching requests keep their relative order.
pub fn form_batch(queue: &mut VecDeque<Request>, key: BatchKey, b_max: usize) -> Vec<Request> {
    let mut batch = Vec::new();
    let mut rest = VecDeque::with_capacity(queue.len());
    while let Some(req) = queue.pop_front() {
        if batch.len() < b_max && req.batch_key() == key {
            batch.push(req);
        } else {
            rest.push_back(req);
        }
    }
    *queue = rest;
    batch
}

/// Puts a failed batch back at the queue front in its original order.
pub fn requeue_front(queue: &mut VecDeque<Request>, batch: Vec<Request>) {
    for req in batch.into_iter().rev() {
        queue.push_front(req);
    }
}

/// Free instance serving `seg` at the smallest width `>= w_req`; ties go
/// to the earliest-created instance. Returns its creation id.
pub fn find_free_best_fit(
    instances: &[InstanceState],
    seg: usize,
    w_req: WidthRatio,
) -> Option<u64> {
    instances
        .iter()
        .filter(|i| !i.busy && i.segment == seg && i.width >= w_req)
        .min_by_key(|i| (i.width, i.created))
        .map(|i| i.created)
}

impl ServerState {
    pub fn new(index: usize, device: DeviceSpec, knobs: SchedulerKnobs) -> Self {
        ServerState {
            index,
            device,
            knobs,
            queue: VecDeque::new(),
            instances: Vec::new(),
            device_state: DeviceState::new(),
            latest_util: None,
            vram_used: 0,
            next_instance: 0,
        }
    }

    pub fn vram_used(&self) -> u64 {
        self.vram_used
    }

    pub fn instance(&self, id: u64) -> Option<&InstanceState> {
        self.instances.iter().find(|i| i.created == id)
    }

    fn instance_mut(&mut self, id: u64) -> Option<&mut InstanceState> {
        self.instances.iter_mut().find(|i| i.created == id)
    }

    pub fn enqueue(&mut self, mut req: Request, now: f64) {
        req.t_enqueue = now;
        self.queue.push_back(req);
    }

    /// True iff loading one more `(seg, w)` instance keeps the projected
    /// VRAM within budget and the latest utilization sample, if any, is
    /// below the block threshold.
    pub fn can_load(&self, profile: &ModelProfile, seg: usize, w: WidthRatio) -> bool {
        let bytes = param_bytes(&profile.segments[seg], w);
        let fits = self.vram_used + bytes <= self.knobs.vram_budget_bytes;
        let util_ok = self.latest_util.map_or(true, |u| u < self.knobs.util_block);
        fits && util_ok
    }

    /// Loads up to `scale_max_new` instances of `(key.segment, key.w_req)`,
    /// each gated by `can_load`. Returns how many were started. With a
    /// zero load time instances appear free immediately; otherwise each
    /// load occupies the device for `load_time_s` and completes through
    /// the event loop.
    pub fn scale_up(
        &mut self,
        profile: &ModelProfile,
        key: BatchKey,
        now: f64,
        out: &mut Vec<StepEvent>,
    ) -> usize {
        let mut loaded = 0;
        for _ in 0..self.knobs.scale_max_new {
            // A timed load occupies the device; further replicas wait for
            // it to land.
            if self.device_state.free_at > now {
                break;
            }
            if !self.can_load(profile, key.segment, key.w_req) {
                break;
            }
            let bytes = param_bytes(&profile.segments[key.segment], key.w_req);
            let id = self.next_instance;
            self.next_instance += 1;
            self.vram_used += bytes;
            if self.knobs.load_time_s == 0.0 {
                self.instances.push(InstanceState {
                    segment: key.segment,
                    width: key.w_req,
                    device: self.index,
                    busy: false,
                    loading: false,
                    t_last: now,
                    resident_bytes: bytes,
                    created: id,
                });
            } else {
                let start = now.max(self.device_state.free_at);
                let done = start + self.knobs.load_time_s;
                self.device_state.free_at = done;
                self.device_state.record_busy(start, done);
                self.instances.push(InstanceState {
                    segment: key.segment,
                    width: key.w_req,
                    device: self.index,
                    busy: true,
                    loading: true,
                    t_last: done,
                    resident_bytes: bytes,
                    created: id,
                });
                out.push(StepEvent::LoadStarted { instance: id, done_at: done });
            }
            loaded += 1;
        }
        loaded
    }

    /// One dispatch attempt for the head key.
    ///
    /// Runs only while the device is free: work starts on completions, so
    /// the queue drains serially and utilization reflects executed time
    /// rather than booked-ahead time. Forms a batch for the key at the
    /// queue head and looks for a best-fit instance. If none is free, a
    /// scale-up is attempted (when the matching-key backlog reaches the
    /// trigger and no matching load is already in flight) and the lookup
    /// retried once; a still-unserved batch is requeued at the front in
    /// its original order.
    pub fn dispatch_step(&mut self, profile: &ModelProfile, now: f64) -> Vec<StepEvent> {
        let mut out = Vec::new();
        if self.device_state.free_at > now {
            return out;
        }
        let Some(head) = self.queue.front() else {
            return out;
        };
        let key = head.batch_key();
        // Every scheduling decision refreshes the utilization sample the
        // load gate reads.
        let window = self.device.util_window_s;
        self.latest_util = Some(self.device_state.utilization(now, window));
        let batch = form_batch(&mut self.queue, key, self.knobs.batch_max);

        let mut chosen = find_free_best_fit(&self.instances, key.segment, key.w_req);
        if chosen.is_none() {
            let backlog =
                batch.len() + self.queue.iter().filter(|r| r.batch_key() == key).count();
            // A load already on its way to serving this key suppresses
            // another scale-up; without this every event until the load
            // lands would add more replicas.
            let incoming = self
                .instances
                .iter()
                .any(|i| i.loading && i.segment == key.segment && i.width >= key.w_req);
            if backlog >= self.knobs.scale_trigger_depth && !incoming {
                self.scale_up(profile, key, now, &mut out);
            }
            chosen = find_free_best_fit(&self.instances, key.segment, key.w_req);
        }

        match chosen {
            Some(id) => {
                let seg = &profile.segments[key.segment];
                let t = service_time(&self.device, seg, batch.len(), key.w_req);
                let start = now.max(self.device_state.free_at);
                let done = start + t;
                self.device_state.free_at = done;
                self.device_state.record_busy(start, done);
                let inst = self.instance_mut(id).expect("chosen instance exists");
                inst.busy = true;
                out.push(StepEvent::BatchStarted {
                    instance: id,
                    requests: batch,
                    done_at: done,
                });
            }
            None => requeue_front(&mut self.queue, batch),
        }
        out
    }

    /// Marks a batch or load completion: the instance frees and its idle
    /// clock restarts.
    pub fn on_complete(&mut self, id: u64, now: f64) {
        let inst = self
            .instance_mut(id)
            .expect("completion for a live instance");
        inst.busy = false;
        inst.loading = false;
        inst.t_last = now;
    }

    /// Evicts every non-busy instance idle for at least `idle_unload_s`,
    /// freeing its VRAM. Returns the evicted ids.
    pub fn unloader_step(&mut self, now: f64) -> Vec<u64> {
        let t_idle = self.knobs.idle_unload_s;
        let mut evicted = Vec::new();
        let mut freed = 0u64;
        self.instances.retain(|i| {
            if !i.busy && now - i.t_last >= t_idle {
                evicted.push(i.created);
                freed += i.resident_bytes;
                false
            } else {
                true
            }
        });
        self.vram_used -= freed;
        evicted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn w(v: f64) -> WidthRatio {
        WidthRatio::new(v).unwrap()
    }

    fn req(id: u64, seg: usize, w_req: f64, w_prev: Option<f64>) -> Request {
        let mut r = Request::new(id, w(w_req), 0.0);
        r.segment = seg;
        r.w_prev = w_prev.map(w);
        for _ in 0..seg {
            r.width_history.push(w(w_prev.unwrap_or(1.0)));
        }
        r
    }

    fn server(knobs: SchedulerKnobs) -> ServerState {
        ServerState::new(0, DeviceSpec::fast_default(), knobs)
    }

    fn add_instance(s: &mut ServerState, seg: usize, width: f64, busy: bool) -> u64 {
        let id = s.next_instance;
        s.next_instance += 1;
        let bytes = param_bytes(&ModelProfile::default().segments[seg], w(width));
        s.vram_used += bytes;
        s.instances.push(InstanceState {
            segment: seg,
            width: w(width),
            device: 0,
            busy,
            loading: false,
            t_last: 0.0,
            resident_bytes: bytes,
            created: id,
        });
        id
    }

    #[test]
    fn form_batch_scans_past_other_keys() {
        let mut q: VecDeque<Request> = [
            req(0, 0, 0.5, None),
            req(1, 0, 0.5, None),
            req(2, 1, 0.5, Some(0.5)),
            req(3, 0, 0.5, None),
        ]
        .into();
        let key = q[0].batch_key();
        let batch = form_batch(&mut q, key, 8);
        assert_eq!(batch.iter().map(|r| r.id).collect::<Vec<_>>(), [0, 1, 3]);
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].id, 2);
    }

    #[test]
    fn form_batch_singleton_and_cap() {
        let mut q: VecDeque<Request> = [req(9, 0, 0.5, None)].into();
        let key = q[0].batch_key();
        assert_eq!(form_batch(&mut q, key, 1).len(), 1);
        assert!(q.is_empty());

        let mut q: VecDeque<Request> = (0..10).map(|i| req(i, 0, 0.5, None)).collect();
        let key = q[0].batch_key();
        let batch = form_batch(&mut q, key, 4);
        assert_eq!(batch.iter().map(|r| r.id).collect::<Vec<_>>(), [0, 1, 2, 3]);
        assert_eq!(q.iter().map(|r| r.id).collect::<Vec<_>>(), [4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn requeue_front_restores_exact_order() {
        let mut q: VecDeque<Request> = [
            req(0, 0, 0.5, None),
            req(1, 0, 0.5, None),
            req(2, 1, 0.5, Some(0.5)),
        ]
        .into();
        let before: Vec<u64> = q.iter().map(|r| r.id).collect();
        let key = q[0].batch_key();
        let batch = form_batch(&mut q, key, 8);
        requeue_front(&mut q, batch);
        let after: Vec<u64> = q.iter().map(|r| r.id).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn best_fit_prefers_minimal_width() {
        let mut s = server(SchedulerKnobs::default());
        let half = add_instance(&mut s, 0, 0.5, false);
        let full = add_instance(&mut s, 0, 1.0, false);
        assert_eq!(find_free_best_fit(&s.instances, 0, w(0.5)), Some(half));
        assert_eq!(find_free_best_fit(&s.instances, 0, w(0.75)), Some(full));
    }

    #[test]
    fn best_fit_ignores_busy_and_wrong_segment() {
        let mut s = server(SchedulerKnobs::default());
        add_instance(&mut s, 0, 1.0, true);
        add_instance(&mut s, 1, 1.0, false);
        assert_eq!(find_free_best_fit(&s.instances, 0, w(0.5)), None);
    }

    #[test]
    fn best_fit_ties_break_on_creation_order() {
        let mut s = server(SchedulerKnobs::default());
        let first = add_instance(&mut s, 0, 0.5, false);
        add_instance(&mut s, 0, 0.5, false);
        assert_eq!(find_free_best_fit(&s.instances, 0, w(0.25)), Some(first));
    }

    #[test]
    fn best_fit_matches_brute_force() {
        // Exhaustive oracle: filter candidates, take min by (width, id).
        let widths = [0.25, 0.5, 0.75, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let mut s = server(SchedulerKnobs::default());
            for _ in 0..rng.gen_range(0..8) {
                let seg = rng.gen_range(0..4);
                let wd = widths[rng.gen_range(0..4)];
                let busy = rng.gen_bool(0.4);
                add_instance(&mut s, seg, wd, busy);
            }
            let seg = rng.gen_range(0..4);
            let need = w(widths[rng.gen_range(0..4)]);
            let expect = s
                .instances
                .iter()
                .filter(|i| !i.busy && i.segment == seg && i.width >= need)
                .min_by_key(|i| (i.width, i.created))
                .map(|i| i.created);
            assert_eq!(find_free_best_fit(&s.instances, seg, need), expect);
        }
    }

    #[test]
    fn can_load_checks_vram_and_util() {
        let profile = ModelProfile::default();
        let mut s = server(SchedulerKnobs::default());
        // Ample headroom, no sample yet.
        assert!(s.can_load(&profile, 0, w(1.0)));

        // Projection over budget.
        s.knobs.vram_budget_bytes = 1024;
        assert!(!s.can_load(&profile, 0, w(1.0)));
        s.knobs = SchedulerKnobs::default();

        // Exactly at the block threshold counts as blocked.
        s.latest_util = Some(s.knobs.util_block);
        assert!(!s.can_load(&profile, 0, w(1.0)));
        s.latest_util = Some(s.knobs.util_block - 0.01);
        assert!(s.can_load(&profile, 0, w(1.0)));
    }

    #[test]
    fn can_load_allows_exactly_full_budget() {
        let profile = ModelProfile::default();
        let mut s = server(SchedulerKnobs::default());
        s.knobs.vram_budget_bytes = param_bytes(&profile.segments[0], w(1.0));
        assert!(s.can_load(&profile, 0, w(1.0)));
    }

    #[test]
    fn scale_up_loads_only_what_fits() {
        let profile = ModelProfile::default();
        let mut knobs = SchedulerKnobs::default();
        // Budget for one full-width segment-0 instance, not two.
        knobs.vram_budget_bytes = param_bytes(&profile.segments[0], w(1.0)) * 3 / 2;
        knobs.load_time_s = 0.0;
        let mut s = server(knobs);
        let key = req(0, 0, 1.0, None).batch_key();
        let mut out = Vec::new();
        assert_eq!(s.scale_up(&profile, key, 0.0, &mut out), 1);
        assert_eq!(s.instances.len(), 1);
        assert!(s.vram_used() <= s.knobs.vram_budget_bytes);
    }

    #[test]
    fn scale_up_blocked_by_utilization() {
        let profile = ModelProfile::default();
        let mut s = server(SchedulerKnobs::default());
        s.latest_util = Some(0.99);
        let key = req(0, 0, 1.0, None).batch_key();
        let mut out = Vec::new();
        assert_eq!(s.scale_up(&profile, key, 0.0, &mut out), 0);
    }

    #[test]
    fn dispatch_happy_path_schedules_completion() {
        let profile = ModelProfile::default();
        let mut s = server(SchedulerKnobs::default());
        let id = add_instance(&mut s, 0, 0.5, false);
        s.enqueue(req(0, 0, 0.5, None), 1.0);
        s.device_state.free_at = 1.0;
        let evs = s.dispatch_step(&profile, 1.0);
        // 0.002 + 0.001 * 1.0 * 1 * 0.25
        let expected_done = 1.0 + 0.00225;
        assert_eq!(
            evs,
            vec![StepEvent::BatchStarted {
                instance: id,
                requests: vec![{
                    let mut r = req(0, 0, 0.5, None);
                    r.t_enqueue = 1.0;
                    r
                }],
                done_at: expected_done,
            }]
        );
        assert!(s.instance(id).unwrap().busy);
        assert!(s.queue.is_empty());

        s.on_complete(id, expected_done);
        let inst = s.instance(id).unwrap();
        assert!(!inst.busy);
        assert_eq!(inst.t_last, expected_done);
    }

    #[test]
    fn dispatch_serializes_on_the_device() {
        let profile = ModelProfile::default();
        let mut knobs = SchedulerKnobs::default();
        knobs.scale_max_new = 0;
        let mut s = server(knobs);
        let a = add_instance(&mut s, 0, 0.5, false);
        add_instance(&mut s, 1, 0.5, false);
        s.enqueue(req(0, 0, 0.5, None), 0.0);
        s.enqueue(req(1, 1, 0.5, Some(0.5)), 0.0);

        let first = s.dispatch_step(&profile, 0.0);
        let t0 = match &first[0] {
            StepEvent::BatchStarted { done_at, .. } => *done_at,
            other => panic!("unexpected {other:?}"),
        };
        assert!((t0 - 0.00225).abs() < 1e-12);

        // The device is executing, so nothing else starts until the
        // completion hands it back.
        assert!(s.dispatch_step(&profile, 0.001).is_empty());
        assert_eq!(s.queue.len(), 1);

        s.on_complete(a, t0);
        let second = s.dispatch_step(&profile, t0);
        let t1 = match &second[0] {
            StepEvent::BatchStarted { done_at, .. } => *done_at,
            other => panic!("unexpected {other:?}"),
        };
        // Segment 1 at width 0.5: 0.002 + 0.001 * 1.5 * 0.25 after the
        // first batch frees the device.
        assert!((t1 - (t0 + 0.002375)).abs() < 1e-12);
    }

    #[test]
    fn dispatch_failure_restores_queue_exactly() {
        let profile = ModelProfile::default();
        let mut s = server(SchedulerKnobs::default());
        // A fully busy measurement window blocks loading, so nothing can
        // dispatch and the queue must come back untouched.
        s.device_state.record_busy(9.0, 10.0);
        for i in 0..5 {
            s.enqueue(req(i, 0, 0.5, None), 10.0);
        }
        s.enqueue(req(5, 1, 0.5, Some(0.5)), 10.0);
        let before: Vec<u64> = s.queue.iter().map(|r| r.id).collect();
        let evs = s.dispatch_step(&profile, 10.0);
        assert!(evs.is_empty());
        assert_eq!(s.latest_util, Some(1.0));
        let after: Vec<u64> = s.queue.iter().map(|r| r.id).collect();
        assert_eq!(before, after);
        assert!(s.instances.is_empty());
    }

    #[test]
    fn dispatch_below_trigger_does_not_scale() {
        let profile = ModelProfile::default();
        let mut knobs = SchedulerKnobs::default();
        knobs.scale_trigger_depth = 4;
        let mut s = server(knobs);
        s.enqueue(req(0, 0, 0.5, None), 0.0);
        let evs = s.dispatch_step(&profile, 0.0);
        assert!(evs.is_empty());
        assert!(s.instances.is_empty());
        assert_eq!(s.queue.len(), 1);
    }

    #[test]
    fn dispatch_scales_up_and_runs_with_instant_load() {
        let profile = ModelProfile::default();
        let mut knobs = SchedulerKnobs::default();
        knobs.load_time_s = 0.0;
        let mut s = server(knobs);
        for i in 0..4 {
            s.enqueue(req(i, 0, 0.5, None), 0.0);
        }
        let evs = s.dispatch_step(&profile, 0.0);
        assert_eq!(evs.len(), 1);
        assert!(matches!(evs[0], StepEvent::BatchStarted { ref requests, .. } if requests.len() == 4));
        // Scale-up loaded up to two instances; one now runs the batch.
        assert_eq!(s.instances.len(), 2);
    }

    #[test]
    fn dispatch_with_slow_load_requeues_and_waits() {
        let profile = ModelProfile::default();
        let mut s = server(SchedulerKnobs::default()); // load_time 50 ms
        for i in 0..4 {
            s.enqueue(req(i, 0, 0.5, None), 0.0);
        }
        let evs = s.dispatch_step(&profile, 0.0);
        let loads: Vec<_> = evs
            .iter()
            .filter(|e| matches!(e, StepEvent::LoadStarted { .. }))
            .collect();
        // The load occupies the device, so only one replica starts.
        assert_eq!(loads.len(), 1);
        assert_eq!(s.queue.len(), 4); // batch went back
        assert!(s.instances.iter().all(|i| i.loading && i.busy));
        match loads[0] {
            StepEvent::LoadStarted { done_at, .. } => assert!((done_at - 0.05).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }

        // While the load is in flight another step must not add replicas.
        let evs = s.dispatch_step(&profile, 0.01);
        assert!(evs.is_empty());
        assert_eq!(s.instances.len(), 1);

        // After the load lands the batch dispatches on the new instance.
        let first_id = s.instances[0].created;
        s.on_complete(first_id, 0.05);
        let evs = s.dispatch_step(&profile, 0.05);
        assert!(matches!(evs[0], StepEvent::BatchStarted { .. }));
        assert_eq!(s.instances.len(), 1);
    }

    #[test]
    fn unloader_evicts_at_exact_threshold_and_frees_vram() {
        let mut s = server(SchedulerKnobs::default()); // t_idle = 2 s
        let a = add_instance(&mut s, 0, 0.5, false);
        let b = add_instance(&mut s, 1, 0.5, true);
        let c = add_instance(&mut s, 2, 0.5, false);
        s.instance_mut(a).unwrap().t_last = 1.0;
        s.instance_mut(b).unwrap().t_last = 0.0;
        s.instance_mut(c).unwrap().t_last = 2.5;

        let evicted = s.unloader_step(3.0);
        // a idles exactly 2 s (evicted), b is busy (kept), c is fresh.
        assert_eq!(evicted, vec![a]);
        let left: Vec<u64> = s.instances.iter().map(|i| i.created).collect();
        assert_eq!(left, vec![b, c]);
        let sum: u64 = s.instances.iter().map(|i| i.resident_bytes).sum();
        assert_eq!(s.vram_used(), sum);
    }

    #[test]
    fn vram_never_exceeds_budget_under_random_scale_ups() {
        let profile = ModelProfile::default();
        let widths = [0.25, 0.5, 0.75, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut knobs = SchedulerKnobs::default();
        knobs.vram_budget_bytes = 64 * 1024 * 1024;
        knobs.load_time_s = 0.0;
        let mut s = server(knobs);
        let mut out = Vec::new();
        for step in 0..500 {
            let key = BatchKey {
                segment: rng.gen_range(0..4),
                w_req: w(widths[rng.gen_range(0..4)]),
                w_prev: None,
            };
            s.scale_up(&profile, key, step as f64, &mut out);
            let sum: u64 = s.instances.iter().map(|i| i.resident_bytes).sum();
            assert_eq!(s.vram_used(), sum);
            assert!(s.vram_used() <= s.knobs.vram_budget_bytes);
            // Occasionally age everything out to keep the walk moving.
            if step % 50 == 49 {
                for inst in &mut s.instances {
                    inst.t_last = -10.0;
                    inst.busy = false;
                }
                s.unloader_step(step as f64);
            }
        }
    }
}
