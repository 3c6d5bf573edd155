//! A minimal feed-forward policy network with hand-rolled reverse-mode
//! gradients: one shared tanh trunk, three categorical heads and a value
//! head, plus softmax utilities, gradient clipping, Adam, input
//! standardization, and checkpointing.
//!
//! Parameters live in one flat vector; [`Layout`] carves it into the named
//! sections, which keeps the optimizer and the norm clip single loops over
//! contiguous memory.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has length {got}, network expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("checkpoint invalid: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Section sizes of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    /// State vector length.
    pub input: usize,
    /// Trunk width.
    pub hidden: usize,
    /// Server head arity.
    pub servers: usize,
    /// Width head arity.
    pub widths: usize,
    /// Group head arity.
    pub groups: usize,
}

/// Read-only parameter sections, in storage order.
pub struct Views<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w_srv: &'a [f64],
    pub b_srv: &'a [f64],
    pub w_wid: &'a [f64],
    pub b_wid: &'a [f64],
    pub w_grp: &'a [f64],
    pub b_grp: &'a [f64],
    pub w_val: &'a [f64],
    pub b_val: &'a [f64],
}

/// Mutable parameter sections, in storage order.
pub struct ViewsMut<'a> {
    pub w1: &'a mut [f64],
    pub b1: &'a mut [f64],
    pub w_srv: &'a mut [f64],
    pub b_srv: &'a mut [f64],
    pub w_wid: &'a mut [f64],
    pub b_wid: &'a mut [f64],
    pub w_grp: &'a mut [f64],
    pub b_grp: &'a mut [f64],
    pub w_val: &'a mut [f64],
    pub b_val: &'a mut [f64],
}

impl Layout {
    pub fn validate(&self) -> Result<(), NnError> {
        for (name, v) in [
            ("input", self.input),
            ("hidden", self.hidden),
            ("servers", self.servers),
            ("widths", self.widths),
            ("groups", self.groups),
        ] {
            if v == 0 {
                return Err(NnError::BadCheckpoint(format!("{name} dimension is zero")));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        let h = self.hidden;
        h * self.input
            + h
            + self.servers * h
            + self.servers
            + self.widths * h
            + self.widths
            + self.groups * h
            + self.groups
            + h
            + 1
    }

    pub fn views<'a>(&self, theta: &'a [f64]) -> Views<'a> {
        debug_assert_eq!(theta.len(), self.total());
        let h = self.hidden;
        let (w1, rest) = theta.split_at(h * self.input);
        let (b1, rest) = rest.split_at(h);
        let (w_srv, rest) = rest.split_at(self.servers * h);
        let (b_srv, rest) = rest.split_at(self.servers);
        let (w_wid, rest) = rest.split_at(self.widths * h);
        let (b_wid, rest) = rest.split_at(self.widths);
        let (w_grp, rest) = rest.split_at(self.groups * h);
        let (b_grp, rest) = rest.split_at(self.groups);
        let (w_val, b_val) = rest.split_at(h);
        Views { w1, b1, w_srv, b_srv, w_wid, b_wid, w_grp, b_grp, w_val, b_val }
    }

    pub fn views_mut<'a>(&self, theta: &'a mut [f64]) -> ViewsMut<'a> {
        debug_assert_eq!(theta.len(), self.total());
        let h = self.hidden;
        let (w1, rest) = theta.split_at_mut(h * self.input);
        let (b1, rest) = rest.split_at_mut(h);
        let (w_srv, rest) = rest.split_at_mut(self.servers * h);
        let (b_srv, rest) = rest.split_at_mut(self.servers);
        let (w_wid, rest) = rest.split_at_mut(self.widths * h);
        let (b_wid, rest) = rest.split_at_mut(self.widths);
        let (w_grp, rest) = rest.split_at_mut(self.groups * h);
        let (b_grp, rest) = rest.split_at_mut(self.groups);
        let (w_val, b_val) = rest.split_at_mut(h);
        ViewsMut { w1, b1, w_srv, b_srv, w_wid, b_wid, w_grp, b_grp, w_val, b_val }
    }
}

/// Trunk and head parameters as one flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub layout: Layout,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    /// Glorot-uniform weights, zero biases; the value head is shrunk by
    /// 0.1 so early value loss does not dominate the update.
    pub fn init(layout: Layout, rng: &mut impl Rng) -> Self {
        let mut theta = vec![0.0; layout.total()];
        let views = layout.views_mut(&mut theta);
        let h = layout.hidden;
        let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize, scale: f64| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt() * scale;
            for v in w.iter_mut() {
                *v = rng.gen_range(-a..=a);
            }
        };
        fill(views.w1, layout.input, h, 1.0);
        fill(views.w_srv, h, layout.servers, 1.0);
        fill(views.w_wid, h, layout.widths, 1.0);
        fill(views.w_grp, h, layout.groups, 1.0);
        fill(views.w_val, h, 1, 0.1);
        PolicyParams { layout, theta }
    }

    pub fn views(&self) -> Views<'_> {
        self.layout.views(&self.theta)
    }
}

/// Forward intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    x: Vec<f64>,
    h: Vec<f64>,
}

/// Outputs of one forward pass, with its tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits_srv: Vec<f64>,
    pub logits_wid: Vec<f64>,
    pub logits_grp: Vec<f64>,
    pub value: f64,
    pub tape: Tape,
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            bias + w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .collect()
}

/// One pass through trunk and all four heads.
pub fn forward(params: &PolicyParams, s: &[f64]) -> Result<ForwardPass, NnError> {
    let layout = params.layout;
    if s.len() != layout.input {
        return Err(NnError::DimMismatch { expected: layout.input, got: s.len() });
    }
    let v = params.views();
    let mut h = affine(v.w1, v.b1, s);
    for z in h.iter_mut() {
        *z = z.tanh();
    }
    let logits_srv = affine(v.w_srv, v.b_srv, &h);
    let logits_wid = affine(v.w_wid, v.b_wid, &h);
    let logits_grp = affine(v.w_grp, v.b_grp, &h);
    let value = affine(v.w_val, v.b_val, &h)[0];
    Ok(ForwardPass {
        logits_srv,
        logits_wid,
        logits_grp,
        value,
        tape: Tape { x: s.to_vec(), h },
    })
}

/// Upstream loss gradients at the network outputs: one vector per head of
/// logits plus the scalar value seed.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub srv: Vec<f64>,
    pub wid: Vec<f64>,
    pub grp: Vec<f64>,
    pub value: f64,
}

impl HeadGrads {
    pub fn zeros(layout: Layout) -> Self {
        HeadGrads {
            srv: vec![0.0; layout.servers],
            wid: vec![0.0; layout.widths],
            grp: vec![0.0; layout.groups],
            value: 0.0,
        }
    }
}

/// Accumulated parameter gradients, same flat layout as the parameters.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub layout: Layout,
    pub g: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros(layout: Layout) -> Self {
        GradientBuffer { layout, g: vec![0.0; layout.total()] }
    }

    pub fn zero(&mut self) {
        self.g.fill(0.0);
    }

    pub fn l2_norm(&self) -> f64 {
        self.g.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Reverse pass: accumulates `d(loss)/d(theta)` into `buf` for the scalar
/// loss whose output gradients are `up`. Requiring the tape of a prior
/// [`forward`] makes "backward without forward" unrepresentable.
pub fn backward(params: &PolicyParams, tape: &Tape, up: &HeadGrads, buf: &mut GradientBuffer) {
    let layout = params.layout;
    debug_assert_eq!(buf.layout, layout);
    let v = params.views();
    let g = layout.views_mut(&mut buf.g);
    let hid = layout.hidden;
    let mut gh = vec![0.0; hid];

    let mut head = |w: &[f64], gw: &mut [f64], gb: &mut [f64], seed: &[f64]| {
        for (r, &gr) in seed.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            gb[r] += gr;
            let row = &w[r * hid..(r + 1) * hid];
            let grow = &mut gw[r * hid..(r + 1) * hid];
            for c in 0..hid {
                gh[c] += row[c] * gr;
                grow[c] += gr * tape.h[c];
            }
        }
    };
    head(v.w_srv, g.w_srv, g.b_srv, &up.srv);
    head(v.w_wid, g.w_wid, g.b_wid, &up.wid);
    head(v.w_grp, g.w_grp, g.b_grp, &up.grp);
    head(v.w_val, g.w_val, g.b_val, &[up.value]);

    let cols = layout.input;
    for r in 0..hid {
        let gz = gh[r] * (1.0 - tape.h[r] * tape.h[r]);
        if gz == 0.0 {
            continue;
        }
        g.b1[r] += gz;
        let grow = &mut g.w1[r * cols..(r + 1) * cols];
        for c in 0..cols {
            grow[c] += gz * tape.x[c];
        }
    }
}

/// Max-shifted softmax with log-probabilities and entropy.
pub fn softmax_logprob_entropy(logits: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    assert!(!logits.is_empty(), "softmax of an empty logit vector");
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let lz = z.ln();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let logprobs: Vec<f64> = logits.iter().map(|&l| l - m - lz).collect();
    let entropy = -probs
        .iter()
        .zip(&logprobs)
        .map(|(&p, &lp)| if p > 0.0 { p * lp } else { 0.0 })
        .sum::<f64>();
    (probs, logprobs, entropy)
}

/// First index whose CDF strictly exceeds `u`; `u` in `[0, 1)`.
pub fn index_from_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    index_from_cdf(probs, rng.gen::<f64>())
}

/// Scales gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_grad_norm(buf: &mut GradientBuffer, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = buf.l2_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for v in buf.g.iter_mut() {
            *v *= s;
        }
    }
    norm
}

/// Adam first and second moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(layout: Layout) -> Self {
        let n = layout.total();
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut PolicyParams, grads: &GradientBuffer, st: &mut AdamState, lr: f64) {
    debug_assert_eq!(params.theta.len(), grads.g.len());
    st.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(st.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(st.t as i32);
    for i in 0..params.theta.len() {
        let g = grads.g[i];
        st.m[i] = ADAM_BETA1 * st.m[i] + (1.0 - ADAM_BETA1) * g;
        st.v[i] = ADAM_BETA2 * st.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = st.m[i] / c1;
        let v_hat = st.v[i] / c2;
        params.theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Welford running mean/variance used to standardize state features;
/// statistics freeze at evaluation by simply not calling `update`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        RunningNorm { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn update(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.mean.len(), "feature dimension changed");
        self.count += 1;
        let n = self.count as f64;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    /// `(x - mean) / sqrt(var + 1e-8)` per feature; identity until the
    /// first update.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.mean.len(), "feature dimension changed");
        if self.count == 0 {
            return x.to_vec();
        }
        let n = self.count as f64;
        x.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i]) / (self.m2[i] / n + 1e-8).sqrt())
            .collect()
    }
}

/// On-disk policy: shapes, flat weights, and the input statistics they
/// were trained under, plus free-form provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layout: Layout,
    pub theta: Vec<f64>,
    pub norm: RunningNorm,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<(), NnError> {
        self.layout.validate()?;
        if self.theta.len() != self.layout.total() {
            return Err(NnError::BadCheckpoint(format!(
                "weight vector has {} entries, layout needs {}",
                self.theta.len(),
                self.layout.total()
            )));
        }
        if self.norm.dim() != self.layout.input {
            return Err(NnError::BadCheckpoint(format!(
                "normalizer covers {} features, input dimension is {}",
                self.norm.dim(),
                self.layout.input
            )));
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(NnError::BadCheckpoint("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NnError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| NnError::BadCheckpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| NnError::BadCheckpoint(e.to_string()))?;
        ck.validate()?;
        Ok(ck)
    }
}
