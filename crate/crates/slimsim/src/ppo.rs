//! The factored PPO router: epsilon-mixed action selection, block rewards,
//! one-step advantages, the clipped-surrogate update, and the training
//! loop that couples policy and simulator.
//!
//! The action factors into three categorical heads (server, width, group).
//! Only the server head is epsilon-mixed with a uniform distribution; the
//! stored `epsilon_used` is replayed at update time so the importance
//! ratio isolates the parameter change.

use crate::accuracy::AccuracyTable;
use crate::device::{DeviceSpec, ModelProfile};
use crate::nn::{
    adam_step, backward, clip_grad_norm, forward, sample_categorical, softmax_logprob_entropy,
    AdamState, Checkpoint, GradientBuffer, HeadGrads, Layout, NnError, PolicyParams, RunningNorm,
};
use crate::sim::{run_episode, BlockOutcome, GlobalState, RouteChoice, Router, WorkloadSpec};
use crate::types::{SchedulerKnobs, WidthSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("update on an empty transition batch")]
    EmptyBatch,
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },
    #[error("config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Net(#[from] NnError),
}

/// One routing decision: indices into the server list, the width set, and
/// the group-size set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTriple {
    pub server: usize,
    pub width: usize,
    pub group: usize,
}

/// One collected decision with everything the update needs; `state` is the
/// standardized feature vector exactly as the policy saw it.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: ActionTriple,
    pub logprob_old: f64,
    pub value_old: f64,
    pub reward: f64,
    pub epsilon_used: f64,
}

/// Reward term weights; the reward is affine in each observable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// Weight on the accuracy prior of the routed block.
    pub accuracy: f64,
    /// Weight per second of block latency.
    pub latency: f64,
    /// Weight per joule of `mean_power * latency`.
    pub energy: f64,
    /// Weight on the across-server utilization variance.
    pub imbalance: f64,
    /// Constant bonus added to every reward.
    pub bonus: f64,
    /// Subtract the table mean from the accuracy prior.
    pub center_prior: bool,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            accuracy: 1.0,
            latency: 0.5,
            energy: 0.001,
            imbalance: 1.0,
            bonus: 0.0,
            center_prior: false,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("latency", self.latency),
            ("energy", self.energy),
            ("imbalance", self.imbalance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("reward weight {name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.bonus.is_finite() {
            return Err(format!("reward bonus must be finite, got {}", self.bonus));
        }
        Ok(())
    }
}

/// Linear epsilon decay for the server-head mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationSchedule {
    pub eps_min: f64,
    pub eps_max: f64,
    /// Decision steps over which epsilon anneals from max to min.
    pub decay_steps: u64,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        ExplorationSchedule { eps_min: 0.02, eps_max: 0.30, decay_steps: 20_000 }
    }
}

impl ExplorationSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 <= self.eps_min && self.eps_min <= self.eps_max && self.eps_max <= 1.0) {
            return Err(format!(
                "need 0 <= eps_min <= eps_max <= 1, got {} and {}",
                self.eps_min, self.eps_max
            ));
        }
        if self.decay_steps == 0 {
            return Err("decay_steps must be > 0".into());
        }
        Ok(())
    }
}

/// `max(eps_min, eps_max + (t / decay_steps) * (eps_min - eps_max))`.
pub fn epsilon_at(schedule: &ExplorationSchedule, t: u64) -> f64 {
    let frac = t as f64 / schedule.decay_steps as f64;
    schedule
        .eps_min
        .max(schedule.eps_max + frac * (schedule.eps_min - schedule.eps_max))
}

/// Log-likelihood of `server` under the epsilon-mixed head
/// `(1 - eps) * probs + eps / N`.
pub fn mixed_server_logprob(probs_srv: &[f64], server: usize, eps: f64) -> f64 {
    let n = probs_srv.len() as f64;
    ((1.0 - eps) * probs_srv[server] + eps / n).ln()
}

/// Joint log-likelihood of an action triple: the mixed server term plus
/// the unmixed width and group terms.
pub fn joint_logprob(
    probs_srv: &[f64],
    probs_wid: &[f64],
    probs_grp: &[f64],
    action: ActionTriple,
    eps: f64,
) -> f64 {
    mixed_server_logprob(probs_srv, action.server, eps)
        + probs_wid[action.width].ln()
        + probs_grp[action.group].ln()
}

/// Samples a triple: the server from the mixed distribution, width and
/// group from their raw heads (in that fixed draw order). Returns the
/// joint log-likelihood and the state value.
///
/// Panics if the state length does not match the network input.
pub fn select_action(
    params: &PolicyParams,
    state: &[f64],
    eps: f64,
    rng: &mut impl Rng,
) -> (ActionTriple, f64, f64) {
    let out = forward(params, state).expect("state vector length matches the policy input");
    let (p_srv, _, _) = softmax_logprob_entropy(&out.logits_srv);
    let (p_wid, _, _) = softmax_logprob_entropy(&out.logits_wid);
    let (p_grp, _, _) = softmax_logprob_entropy(&out.logits_grp);
    let n = p_srv.len() as f64;
    let mixed: Vec<f64> = p_srv.iter().map(|&p| (1.0 - eps) * p + eps / n).collect();
    let action = ActionTriple {
        server: sample_categorical(&mixed, rng),
        width: sample_categorical(&p_wid, rng),
        group: sample_categorical(&p_grp, rng),
    };
    let logprob = joint_logprob(&p_srv, &p_wid, &p_grp, action, eps);
    (action, logprob, out.value)
}

/// Scalar block reward: accuracy prior minus latency, energy
/// (`mean_power * latency`), and utilization-imbalance penalties, plus the
/// constant bonus. Utilizations must be fractions.
pub fn compute_reward(
    prior: f64,
    latency: f64,
    mean_power: f64,
    utils: &[f64],
    w: &RewardWeights,
) -> f64 {
    assert!(latency >= 0.0, "negative latency");
    assert!(
        utils.iter().all(|u| (0.0..=1.0).contains(u)),
        "utilization telemetry must be fractional"
    );
    let n = utils.len() as f64;
    let var = if utils.is_empty() {
        0.0
    } else {
        let mean = utils.iter().sum::<f64>() / n;
        utils.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / n
    };
    w.accuracy * prior - w.latency * latency - w.energy * (mean_power * latency)
        - w.imbalance * var
        + w.bonus
}

/// One-step advantages `reward - value_old`, batch-standardized with
/// population sigma (skipped for a single transition).
pub fn advantages(batch: &[Transition]) -> Vec<f64> {
    let a: Vec<f64> = batch.iter().map(|t| t.reward - t.value_old).collect();
    if a.len() < 2 {
        return a;
    }
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let sigma = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    a.iter().map(|x| (x - mean) / (sigma + 1e-8)).collect()
}

/// Clipped-surrogate hyperparameters and optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub value_weight: f64,
    pub entropy_weight: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub epochs: usize,
    /// Transitions collected per update.
    pub window: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            value_weight: 0.5,
            entropy_weight: 0.01,
            lr: 3e-4,
            max_grad_norm: 0.5,
            epochs: 3,
            window: 256,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(format!("clip must be in (0, 1), got {}", self.clip));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(format!("max_grad_norm must be positive, got {}", self.max_grad_norm));
        }
        if self.window == 0 {
            return Err("window must be >= 1".into());
        }
        if !(self.value_weight >= 0.0 && self.entropy_weight >= 0.0) {
            return Err("value_weight and entropy_weight must be >= 0".into());
        }
        Ok(())
    }
}

/// Loss components of one epoch; `total` is what gradients descend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub l_clip: f64,
    pub l_value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Per-sample clipped surrogate `min(rho * adv, clamp(rho) * adv)` and its
/// subgradient with respect to `rho` (zero where the clip is active).
pub fn clipped_surrogate(rho: f64, adv: f64, clip: f64) -> (f64, f64) {
    let unclipped = rho * adv;
    let clipped = rho.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

/// Full-batch losses and parameter gradient of the total objective
/// `-L_clip + value_weight * L_V - entropy_weight * H`.
///
/// The entropy term uses the raw (unmixed) head distributions; the
/// importance ratio replays each transition's stored epsilon.
pub fn loss_gradient(
    params: &PolicyParams,
    batch: &[Transition],
    cfg: &PpoConfig,
) -> Result<(Losses, GradientBuffer), PpoError> {
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let layout = params.layout;
    let adv = advantages(batch);
    let b = batch.len() as f64;
    let mut buf = GradientBuffer::zeros(layout);
    let (mut sum_clip, mut sum_v, mut sum_h) = (0.0, 0.0, 0.0);

    for (tr, &a_hat) in batch.iter().zip(&adv) {
        let out = forward(params, &tr.state)?;
        let (p_srv, _, h_srv) = softmax_logprob_entropy(&out.logits_srv);
        let (p_wid, _, h_wid) = softmax_logprob_entropy(&out.logits_wid);
        let (p_grp, _, h_grp) = softmax_logprob_entropy(&out.logits_grp);
        let eps = tr.epsilon_used;
        let lp = joint_logprob(&p_srv, &p_wid, &p_grp, tr.action, eps);
        let rho = (lp - tr.logprob_old).exp();
        let (surr, dsurr_drho) = clipped_surrogate(rho, a_hat, cfg.clip);
        sum_clip += surr;
        let v_err = out.value - tr.reward;
        sum_v += 0.5 * v_err * v_err;
        sum_h += h_srv + h_wid + h_grp;

        // d(total)/d(joint logprob); the ratio contributes rho itself.
        let dj_dlp = -dsurr_drho * rho / b;
        let mut seed = HeadGrads::zeros(layout);

        // Mixed server head: d log((1-e) p_a + e/N) / d logit_j.
        let n = p_srv.len() as f64;
        let p_mix = (1.0 - eps) * p_srv[tr.action.server] + eps / n;
        for (j, g) in seed.srv.iter_mut().enumerate() {
            let delta = (j == tr.action.server) as u8 as f64;
            let dlp = (1.0 - eps) * p_srv[tr.action.server] * (delta - p_srv[j]) / p_mix;
            *g = dj_dlp * dlp - cfg.entropy_weight * entropy_logit_grad(p_srv[j], h_srv) / b;
        }
        // Unmixed width and group heads: d log p_a / d logit_j = delta - p_j.
        for (j, g) in seed.wid.iter_mut().enumerate() {
            let delta = (j == tr.action.width) as u8 as f64;
            *g = dj_dlp * (delta - p_wid[j])
                - cfg.entropy_weight * entropy_logit_grad(p_wid[j], h_wid) / b;
        }
        for (j, g) in seed.grp.iter_mut().enumerate() {
            let delta = (j == tr.action.group) as u8 as f64;
            *g = dj_dlp * (delta - p_grp[j])
                - cfg.entropy_weight * entropy_logit_grad(p_grp[j], h_grp) / b;
        }
        seed.value = cfg.value_weight * v_err / b;
        backward(params, &out.tape, &seed, &mut buf);
    }

    let l_clip = sum_clip / b;
    let l_value = sum_v / b;
    let entropy = sum_h / b;
    let losses = Losses {
        l_clip,
        l_value,
        entropy,
        total: -l_clip + cfg.value_weight * l_value - cfg.entropy_weight * entropy,
    };
    Ok((losses, buf))
}

// d(-sum p ln p)/d logit_j = -p_j (ln p_j + H); zero in the p -> 0 limit.
fn entropy_logit_grad(p: f64, h: f64) -> f64 {
    if p > 0.0 {
        -p * (p.ln() + h)
    } else {
        0.0
    }
}

/// Loss components without gradients.
pub fn ppo_losses(
    params: &PolicyParams,
    batch: &[Transition],
    cfg: &PpoConfig,
) -> Result<Losses, PpoError> {
    loss_gradient(params, batch, cfg).map(|(l, _)| l)
}

/// Runs `epochs` full-batch steps on the clipped objective; the stored
/// old log-likelihoods stay fixed throughout. Aborts before applying any
/// step whose loss is non-finite, leaving the parameters at the last good
/// epoch.
pub fn update(
    params: &mut PolicyParams,
    adam: &mut AdamState,
    batch: &[Transition],
    cfg: &PpoConfig,
) -> Result<Vec<Losses>, PpoError> {
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (losses, mut grads) = loss_gradient(params, batch, cfg)?;
        if !losses.total.is_finite() {
            return Err(PpoError::NonFinite {
                epoch,
                detail: format!(
                    "l_clip={} l_value={} entropy={}",
                    losses.l_clip, losses.l_value, losses.entropy
                ),
            });
        }
        clip_grad_norm(&mut grads, cfg.max_grad_norm);
        adam_step(params, &grads, adam, cfg.lr);
        trace.push(losses);
    }
    Ok(trace)
}

/// The stateless baseline: a uniform draw per head, blind to telemetry by
/// construction. Draw order matches `select_action`.
pub fn random_router(
    n_servers: usize,
    n_widths: usize,
    n_groups: usize,
    rng: &mut impl Rng,
) -> ActionTriple {
    ActionTriple {
        server: rng.gen_range(0..n_servers),
        width: rng.gen_range(0..n_widths),
        group: rng.gen_range(0..n_groups),
    }
}

/// Whether a policy router gathers transitions or runs frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterMode {
    Collect,
    /// Normalizer frozen, no transitions stored, epsilon pinned at its
    /// floor.
    Eval,
}

#[derive(Debug)]
struct PendingDecision {
    state: Vec<f64>,
    action: ActionTriple,
    logprob: f64,
    value: f64,
    epsilon: f64,
}

/// The learned router: policy network plus feature normalizer, with
/// per-block reward bookkeeping keyed by the engine's block ids.
#[derive(Debug)]
pub struct PpoRouter {
    pub params: PolicyParams,
    pub norm: RunningNorm,
    pub widths: WidthSet,
    pub group_sizes: Vec<usize>,
    pub schedule: ExplorationSchedule,
    pub weights: RewardWeights,
    /// Subtracted from block priors when `weights.center_prior` is set.
    pub prior_mean: f64,
    pub mode: RouterMode,
    /// Lifetime decision count; drives the exploration schedule.
    pub decisions: u64,
    pending: HashMap<u64, PendingDecision>,
    transitions: Vec<(u64, Transition)>,
}

impl PpoRouter {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: PolicyParams,
        norm: RunningNorm,
        widths: WidthSet,
        group_sizes: Vec<usize>,
        schedule: ExplorationSchedule,
        weights: RewardWeights,
        prior_mean: f64,
        mode: RouterMode,
    ) -> Result<Self, PpoError> {
        let l = params.layout;
        if l.widths != widths.len() {
            return Err(PpoError::BadConfig(format!(
                "policy width head has {} outputs for {} widths",
                l.widths,
                widths.len()
            )));
        }
        if l.groups != group_sizes.len() {
            return Err(PpoError::BadConfig(format!(
                "policy group head has {} outputs for {} group sizes",
                l.groups,
                group_sizes.len()
            )));
        }
        if group_sizes.iter().any(|&g| g == 0) {
            return Err(PpoError::BadConfig("group sizes must be >= 1".into()));
        }
        schedule.validate().map_err(PpoError::BadConfig)?;
        weights.validate().map_err(PpoError::BadConfig)?;
        Ok(PpoRouter {
            params,
            norm,
            widths,
            group_sizes,
            schedule,
            weights,
            prior_mean,
            mode,
            decisions: 0,
            pending: HashMap::new(),
            transitions: Vec::new(),
        })
    }

    /// Rebuilds a router from a saved checkpoint; `decisions` resumes from
    /// the checkpoint's count when present.
    #[allow(clippy::too_many_arguments)]
    pub fn from_checkpoint(
        ck: &Checkpoint,
        widths: WidthSet,
        group_sizes: Vec<usize>,
        schedule: ExplorationSchedule,
        weights: RewardWeights,
        prior_mean: f64,
        mode: RouterMode,
    ) -> Result<Self, PpoError> {
        ck.validate()?;
        let params = PolicyParams { layout: ck.layout, theta: ck.theta.clone() };
        let mut router = PpoRouter::new(
            params,
            ck.norm.clone(),
            widths,
            group_sizes,
            schedule,
            weights,
            prior_mean,
            mode,
        )?;
        router.decisions = ck.meta.get("decisions").and_then(|v| v.as_u64()).unwrap_or(0);
        Ok(router)
    }

    /// Drains recorded transitions in decision order and forgets blocks
    /// still in flight. Outcomes arrive in completion order; replaying
    /// them by block id keeps a training window that covers the earliest
    /// decisions rather than the fastest completions.
    pub fn take_transitions(&mut self) -> Vec<Transition> {
        self.pending.clear();
        let mut out = std::mem::take(&mut self.transitions);
        out.sort_by_key(|(id, _)| *id);
        out.into_iter().map(|(_, t)| t).collect()
    }
}

impl Router for PpoRouter {
    fn decide(&mut self, block_id: u64, state: &GlobalState, rng: &mut ChaCha8Rng) -> RouteChoice {
        let raw = state.to_vector();
        assert_eq!(
            raw.len(),
            self.params.layout.input,
            "policy built for a different cluster size"
        );
        if self.mode == RouterMode::Collect {
            self.norm.update(&raw);
        }
        let x = self.norm.normalize(&raw);
        let eps = match self.mode {
            RouterMode::Collect => epsilon_at(&self.schedule, self.decisions),
            RouterMode::Eval => self.schedule.eps_min,
        };
        self.decisions += 1;
        let (action, logprob, value) = select_action(&self.params, &x, eps, rng);
        if self.mode == RouterMode::Collect {
            self.pending.insert(
                block_id,
                PendingDecision { state: x, action, logprob, value, epsilon: eps },
            );
        }
        RouteChoice {
            server: action.server,
            width: Some(self.widths.get(action.width).expect("head indexes the width set")),
            group: self.group_sizes[action.group],
        }
    }

    fn on_block_done(&mut self, block_id: u64, outcome: &BlockOutcome) {
        let Some(p) = self.pending.remove(&block_id) else {
            return;
        };
        let prior = if self.weights.center_prior {
            outcome.prior - self.prior_mean
        } else {
            outcome.prior
        };
        let reward = compute_reward(
            prior,
            outcome.latency,
            outcome.mean_power,
            &outcome.utils,
            &self.weights,
        );
        self.transitions.push((
            block_id,
            Transition {
                state: p.state,
                action: p.action,
                logprob_old: p.logprob,
                value_old: p.value,
                reward,
                epsilon_used: p.epsilon,
            },
        ));
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update: usize,
    pub mean_reward: f64,
    pub l_clip: f64,
    pub l_value: f64,
    pub entropy: f64,
    pub epsilon: f64,
}

/// Running mean and variance of raw block rewards, Welford form. Rewards
/// are standardized against it before the optimizer sees them: value
/// targets stay O(1) whatever the reward weights, so the value head fits
/// them within a training run instead of chasing their scale.
#[derive(Debug, Clone)]
struct RewardNorm {
    count: f64,
    mean: f64,
    m2: f64,
}

impl RewardNorm {
    fn new() -> Self {
        RewardNorm { count: 0.0, mean: 0.0, m2: 0.0 }
    }

    fn update(&mut self, r: f64) {
        self.count += 1.0;
        let d = r - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (r - self.mean);
    }

    fn normalize(&self, r: f64) -> f64 {
        let std = if self.count < 2.0 { 1.0 } else { (self.m2 / self.count).sqrt().max(1e-8) };
        (r - self.mean) / std
    }
}

/// Alternates collection episodes with clipped-surrogate updates; owns the
/// policy, normalizer, and optimizer state across the whole run.
pub struct Trainer {
    pub devices: Vec<DeviceSpec>,
    pub profile: ModelProfile,
    pub knobs: SchedulerKnobs,
    /// Episode template; the seed is re-derived per collection episode.
    pub workload: WorkloadSpec,
    pub group_sizes: Vec<usize>,
    pub weights: RewardWeights,
    pub schedule: ExplorationSchedule,
    pub cfg: PpoConfig,
    pub prior_mean: f64,
    pub seed: u64,

    pub params: PolicyParams,
    pub norm: RunningNorm,
    adam: AdamState,
    reward_norm: RewardNorm,
    decisions: u64,
    episodes: u64,
    updates_done: usize,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        devices: Vec<DeviceSpec>,
        profile: ModelProfile,
        knobs: SchedulerKnobs,
        workload: WorkloadSpec,
        group_sizes: Vec<usize>,
        weights: RewardWeights,
        schedule: ExplorationSchedule,
        cfg: PpoConfig,
        hidden: usize,
        prior_mean: f64,
        seed: u64,
    ) -> Result<Self, PpoError> {
        cfg.validate().map_err(PpoError::BadConfig)?;
        schedule.validate().map_err(PpoError::BadConfig)?;
        weights.validate().map_err(PpoError::BadConfig)?;
        if group_sizes.is_empty() || group_sizes.iter().any(|&g| g == 0) {
            return Err(PpoError::BadConfig("group sizes must be non-empty, all >= 1".into()));
        }
        let layout = Layout {
            input: 2 + 3 * devices.len(),
            hidden,
            servers: devices.len(),
            widths: knobs.widths.len(),
            groups: group_sizes.len(),
        };
        layout.validate()?;
        let params = PolicyParams::init(layout, &mut ChaCha8Rng::seed_from_u64(seed));
        let norm = RunningNorm::new(layout.input);
        let adam = AdamState::new(layout);
        Ok(Trainer {
            devices,
            profile,
            knobs,
            workload,
            group_sizes,
            weights,
            schedule,
            cfg,
            prior_mean,
            seed,
            params,
            norm,
            adam,
            reward_norm: RewardNorm::new(),
            decisions: 0,
            episodes: 0,
            updates_done: 0,
        })
    }

    fn collect_router(&self) -> Result<PpoRouter, PpoError> {
        let mut router = PpoRouter::new(
            self.params.clone(),
            self.norm.clone(),
            self.knobs.widths.clone(),
            self.group_sizes.clone(),
            self.schedule,
            self.weights,
            self.prior_mean,
            RouterMode::Collect,
        )?;
        router.decisions = self.decisions;
        Ok(router)
    }

    /// A frozen router carrying the current policy.
    pub fn eval_router(&self) -> Result<PpoRouter, PpoError> {
        PpoRouter::new(
            self.params.clone(),
            self.norm.clone(),
            self.knobs.widths.clone(),
            self.group_sizes.clone(),
            self.schedule,
            self.weights,
            self.prior_mean,
            RouterMode::Eval,
        )
    }

    /// Runs collection episodes until at least one update window of
    /// transitions exists, then truncates to exactly the window.
    pub fn collect(&mut self) -> Result<Vec<Transition>, PpoError> {
        let mut batch = Vec::new();
        while batch.len() < self.cfg.window {
            let mut router = self.collect_router()?;
            let mut wl = self.workload.clone();
            self.episodes += 1;
            wl.seed = self
                .seed
                .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(self.episodes));
            run_episode(
                &self.devices,
                &self.profile,
                &self.knobs,
                &wl,
                AccuracyTable::published(),
                &mut router,
            )
            .map_err(|e| PpoError::BadConfig(e.to_string()))?;
            let got = router.take_transitions();
            if got.is_empty() {
                return Err(PpoError::BadConfig(
                    "a collection episode routed no blocks; the workload generates no traffic"
                        .into(),
                ));
            }
            self.decisions = router.decisions;
            self.norm = router.norm;
            batch.extend(got);
        }
        batch.truncate(self.cfg.window);
        Ok(batch)
    }

    /// One collect-and-update cycle; the returned losses are the on-policy
    /// values before any epoch stepped. The curve reports raw rewards; the
    /// optimizer sees them standardized by the lifetime reward statistics.
    pub fn step(&mut self) -> Result<CurveRow, PpoError> {
        let mut batch = self.collect()?;
        let mean_reward = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;
        for t in &batch {
            self.reward_norm.update(t.reward);
        }
        for t in &mut batch {
            t.reward = self.reward_norm.normalize(t.reward);
        }
        let epsilon = epsilon_at(&self.schedule, self.decisions);
        let trace = update(&mut self.params, &mut self.adam, &batch, &self.cfg)?;
        let first = match trace.first() {
            Some(l) => *l,
            None => ppo_losses(&self.params, &batch, &self.cfg)?,
        };
        let row = CurveRow {
            update: self.updates_done,
            mean_reward,
            l_clip: first.l_clip,
            l_value: first.l_value,
            entropy: first.entropy,
            epsilon,
        };
        self.updates_done += 1;
        Ok(row)
    }

    pub fn run(&mut self, updates: usize) -> Result<Vec<CurveRow>, PpoError> {
        (0..updates).map(|_| self.step()).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            layout: self.params.layout,
            theta: self.params.theta.clone(),
            norm: self.norm.clone(),
            meta: serde_json::json!({
                "decisions": self.decisions,
                "episodes": self.episodes,
                "updates": self.updates_done,
                "group_sizes": self.group_sizes,
                "widths": self.knobs.widths.iter().map(|w| w.get()).collect::<Vec<f64>>(),
            }),
        }
    }
}
