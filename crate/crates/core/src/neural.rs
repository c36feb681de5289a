//! LSTM state encoder with MLP heads, the squashed-Gaussian policy and the
//! Q-network, with hand-written backward passes.
//!
//! Parameters of one network live in a single flat `Vec<f64>`; matrices are
//! row-major views into it. Batches of variable-length sequences are sorted
//! by decreasing length so the rows still running at any step form a prefix.

use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{ObservationSequence, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
/// Initial policy standard deviation is about exp(-1).
const INITIAL_LOG_STD: f64 = -1.0;
pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Shape of an encoder plus MLP head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub hidden: usize,
    /// Extra features concatenated to the embedding (the action, for Q).
    pub extra_input: usize,
    pub mlp: Vec<usize>,
    pub output: usize,
    pub output_tanh: bool,
}

impl NetShape {
    pub fn policy(hidden: usize, mlp: &[usize]) -> Self {
        NetShape { input: STATE_DIM, hidden, extra_input: 0, mlp: mlp.to_vec(), output: 2 * ACTION_DIM, output_tanh: true }
    }

    pub fn q(hidden: usize, mlp: &[usize]) -> Self {
        NetShape { input: STATE_DIM, hidden, extra_input: ACTION_DIM, mlp: mlp.to_vec(), output: 1, output_tanh: false }
    }

    pub fn full_policy() -> Self {
        Self::policy(256, &[128, 64])
    }

    pub fn full_q() -> Self {
        Self::q(256, &[128, 64])
    }

    fn layout(&self) -> Layout {
        let h4 = 4 * self.hidden;
        let wx = 0;
        let wh = wx + h4 * self.input;
        let b = wh + h4 * self.hidden;
        let mut off = b + h4;
        let mut layers = Vec::new();
        let mut fan_in = self.hidden + self.extra_input;
        for &out in self.mlp.iter().chain(std::iter::once(&self.output)) {
            layers.push(Dense { w: off, b: off + out * fan_in, fan_in, out });
            off += out * fan_in + out;
            fan_in = out;
        }
        Layout { wx, wh, b, layers, total: off }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    fan_in: usize,
    out: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    wx: usize,
    wh: usize,
    b: usize,
    layers: Vec<Dense>,
    total: usize,
}

fn mat(p: &[f64], off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &p[off..off + rows * cols]).expect("layout within bounds")
}

fn mat_mut(p: &mut [f64], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut p[off..off + rows * cols]).expect("layout within bounds")
}

fn vec_view(p: &[f64], off: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[off..off + n])
}

fn vec_mut(p: &mut [f64], off: usize, n: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut p[off..off + n])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// log(1 - tanh(u)^2), stable for large |u|.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// A batch of sequences, reordered by decreasing length.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    rows: usize,
    width: usize,
    /// `order[sorted_row] = original_row`.
    order: Vec<usize>,
    /// Number of still-running rows at each step.
    active: Vec<usize>,
    steps: Vec<Array2<f64>>,
}

impl SeqBatch {
    pub fn from_rows(seqs: &[Vec<&[f64]>], width: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Shape("empty sequence".into()));
            }
            if let Some(r) = s.iter().find(|r| r.len() != width) {
                return Err(Error::Shape(format!("sequence element of width {} (expected {width})", r.len())));
            }
        }
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.sort_by(|&a, &b| seqs[b].len().cmp(&seqs[a].len()).then(a.cmp(&b)));
        let max_len = seqs[order[0]].len();
        let mut active = Vec::with_capacity(max_len);
        let mut steps = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let n = order.iter().take_while(|&&r| seqs[r].len() > t).count();
            let mut x = Array2::zeros((n, width));
            for (row, &orig) in order[..n].iter().enumerate() {
                x.row_mut(row).assign(&ArrayView1::from(seqs[orig][t]));
            }
            active.push(n);
            steps.push(x);
        }
        Ok(SeqBatch { rows: seqs.len(), width, order, active, steps })
    }

    pub fn from_observations(seqs: &[&ObservationSequence]) -> Result<Self> {
        let rows: Vec<Vec<&[f64]>> = seqs.iter().map(|s| s.states.iter().map(|a| a.as_slice()).collect()).collect();
        Self::from_rows(&rows, STATE_DIM)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn max_len(&self) -> usize {
        self.steps.len()
    }
}

struct LstmStep {
    gates: Array2<f64>,
    c_prev: Array2<f64>,
    h_prev: Array2<f64>,
    tanh_c: Array2<f64>,
}

/// Saved activations of one encoder pass.
pub struct EncoderCache {
    steps: Vec<LstmStep>,
}

/// Saved activations of one MLP pass: the input and every layer output.
pub struct HeadCache {
    acts: Vec<Array2<f64>>,
}

impl HeadCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("at least one layer")
    }
}

/// An LSTM encoder followed by a dense head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub shape: NetShape,
    pub params: Vec<f64>,
}

impl Network {
    pub fn zeros(shape: NetShape) -> Self {
        let n = shape.param_count();
        Network { shape, params: vec![0.0; n] }
    }

    /// Orthogonal recurrent blocks, uniform fan-in scaling elsewhere and a
    /// forget-gate bias of one.
    pub fn init<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Self {
        let mut net = Network::zeros(shape);
        let l = net.shape.layout();
        let (h, i) = (net.shape.hidden, net.shape.input);
        let bound = 1.0 / (i as f64).sqrt();
        for v in &mut net.params[l.wx..l.wx + 4 * h * i] {
            *v = rng.random_range(-bound..bound);
        }
        for block in 0..4 {
            let g = nalgebra::DMatrix::<f64>::from_fn(h, h, |_, _| rng.sample(StandardNormal));
            let qr = g.qr();
            let (q, r) = (qr.q(), qr.r());
            for row in 0..h {
                for col in 0..h {
                    // Scaling columns by sign(diag R) makes the draw Haar-uniform.
                    let sign = if r[(col, col)] < 0.0 { -1.0 } else { 1.0 };
                    net.params[l.wh + (block * h + row) * h + col] = q[(row, col)] * sign;
                }
            }
        }
        for v in &mut net.params[l.b + h..l.b + 2 * h] {
            *v = 1.0;
        }
        for d in &l.layers {
            let bound = 1.0 / (d.fan_in as f64).sqrt();
            for v in &mut net.params[d.w..d.b + d.out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        net
    }

    /// Final hidden state per sequence, in the batch's original row order.
    pub fn encode(&self, batch: &SeqBatch) -> Result<(Array2<f64>, EncoderCache)> {
        if batch.width != self.shape.input {
            return Err(Error::Shape(format!("input width {} (expected {})", batch.width, self.shape.input)));
        }
        let l = self.shape.layout();
        let hd = self.shape.hidden;
        let p = &self.params;
        let wx = mat(p, l.wx, 4 * hd, self.shape.input);
        let wh = mat(p, l.wh, 4 * hd, hd);
        let b = vec_view(p, l.b, 4 * hd);
        let mut h = Array2::<f64>::zeros((batch.rows, hd));
        let mut c = Array2::<f64>::zeros((batch.rows, hd));
        let mut steps = Vec::with_capacity(batch.max_len());
        for (t, x) in batch.steps.iter().enumerate() {
            let n = batch.active[t];
            let h_prev = h.slice(s![..n, ..]).to_owned();
            let c_prev = c.slice(s![..n, ..]).to_owned();
            let mut gates = Array2::<f64>::zeros((n, 4 * hd));
            gates += &b;
            general_mat_mul(1.0, x, &wx.t(), 1.0, &mut gates);
            if t > 0 {
                general_mat_mul(1.0, &h_prev, &wh.t(), 1.0, &mut gates);
            }
            let mut tanh_c = Array2::<f64>::zeros((n, hd));
            for r in 0..n {
                let mut g = gates.row_mut(r);
                for j in 0..hd {
                    let ig = sigmoid(g[j]);
                    let fg = sigmoid(g[hd + j]);
                    let gg = g[2 * hd + j].tanh();
                    let og = sigmoid(g[3 * hd + j]);
                    g[j] = ig;
                    g[hd + j] = fg;
                    g[2 * hd + j] = gg;
                    g[3 * hd + j] = og;
                    let cn = fg * c_prev[(r, j)] + ig * gg;
                    let tc = cn.tanh();
                    c[(r, j)] = cn;
                    h[(r, j)] = og * tc;
                    tanh_c[(r, j)] = tc;
                }
            }
            steps.push(LstmStep { gates, c_prev, h_prev, tanh_c });
        }
        let mut out = Array2::zeros((batch.rows, hd));
        for (sorted, &orig) in batch.order.iter().enumerate() {
            out.row_mut(orig).assign(&h.row(sorted));
        }
        Ok((out, EncoderCache { steps }))
    }

    /// Accumulates encoder parameter gradients given d(loss)/d(final hidden).
    pub fn encode_backward(&self, batch: &SeqBatch, cache: &EncoderCache, d_out: &ArrayView2<f64>, grad: &mut [f64]) {
        let l = self.shape.layout();
        let hd = self.shape.hidden;
        let wh = mat(&self.params, l.wh, 4 * hd, hd);
        let mut dh = Array2::<f64>::zeros((batch.rows, hd));
        for (sorted, &orig) in batch.order.iter().enumerate() {
            dh.row_mut(sorted).assign(&d_out.row(orig));
        }
        let mut dc = Array2::<f64>::zeros((batch.rows, hd));
        for t in (0..batch.steps.len()).rev() {
            let n = batch.active[t];
            let st = &cache.steps[t];
            let mut da = Array2::<f64>::zeros((n, 4 * hd));
            for r in 0..n {
                let g = st.gates.row(r);
                for j in 0..hd {
                    let (ig, fg, gg, og) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                    let tc = st.tanh_c[(r, j)];
                    let dhv = dh[(r, j)];
                    let dcv = dc[(r, j)] + dhv * og * (1.0 - tc * tc);
                    da[(r, j)] = dcv * gg * ig * (1.0 - ig);
                    da[(r, hd + j)] = dcv * st.c_prev[(r, j)] * fg * (1.0 - fg);
                    da[(r, 2 * hd + j)] = dcv * ig * (1.0 - gg * gg);
                    da[(r, 3 * hd + j)] = dhv * tc * og * (1.0 - og);
                    dc[(r, j)] = dcv * fg;
                }
            }
            general_mat_mul(1.0, &da.t(), &batch.steps[t], 1.0, &mut mat_mut(grad, l.wx, 4 * hd, self.shape.input));
            if t > 0 {
                general_mat_mul(1.0, &da.t(), &st.h_prev, 1.0, &mut mat_mut(grad, l.wh, 4 * hd, hd));
                let dh_prev = da.dot(&wh);
                dh.slice_mut(s![..n, ..]).assign(&dh_prev);
            }
            vec_mut(grad, l.b, 4 * hd).scaled_add(1.0, &da.sum_axis(Axis(0)));
        }
    }

    /// Dense head on `[embedding | extra]`.
    pub fn head_forward(&self, embedding: &ArrayView2<f64>, extra: Option<&ArrayView2<f64>>) -> Result<HeadCache> {
        let rows = embedding.nrows();
        let input = match (extra, self.shape.extra_input) {
            (None, 0) => embedding.to_owned(),
            (Some(e), n) if n > 0 && e.ncols() == n && e.nrows() == rows => {
                ndarray::concatenate(Axis(1), &[embedding.view(), e.view()]).expect("matching rows")
            }
            _ => return Err(Error::Shape(format!("head expects {} extra inputs", self.shape.extra_input))),
        };
        if input.ncols() != self.shape.hidden + self.shape.extra_input {
            return Err(Error::Shape(format!("embedding width {}", embedding.ncols())));
        }
        let l = self.shape.layout();
        let last = l.layers.len() - 1;
        let mut acts = vec![input];
        for (k, d) in l.layers.iter().enumerate() {
            let w = mat(&self.params, d.w, d.out, d.fan_in);
            let b = vec_view(&self.params, d.b, d.out);
            let mut z = Array2::<f64>::zeros((rows, d.out));
            z += &b;
            general_mat_mul(1.0, acts.last().expect("input present"), &w.t(), 1.0, &mut z);
            if k < last || self.shape.output_tanh {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        Ok(HeadCache { acts })
    }

    /// Back-propagates `d_out` through the head, accumulating parameter
    /// gradients when `grad` is given. Returns d(loss)/d(head input).
    pub fn head_backward(&self, cache: &HeadCache, d_out: &ArrayView2<f64>, mut grad: Option<&mut [f64]>) -> Array2<f64> {
        let l = self.shape.layout();
        let last = l.layers.len() - 1;
        let mut dy = d_out.to_owned();
        for k in (0..l.layers.len()).rev() {
            let d = l.layers[k];
            let y = &cache.acts[k + 1];
            if k < last || self.shape.output_tanh {
                dy.zip_mut_with(y, |g, &y| *g *= 1.0 - y * y);
            }
            if let Some(g) = grad.as_deref_mut() {
                general_mat_mul(1.0, &dy.t(), &cache.acts[k], 1.0, &mut mat_mut(g, d.w, d.out, d.fan_in));
                vec_mut(g, d.b, d.out).scaled_add(1.0, &dy.sum_axis(Axis(0)));
            }
            dy = dy.dot(&mat(&self.params, d.w, d.out, d.fan_in));
        }
        dy
    }

    pub fn forward(&self, batch: &SeqBatch, extra: Option<&ArrayView2<f64>>) -> Result<Array2<f64>> {
        let (h, _) = self.encode(batch)?;
        Ok(self.head_forward(&h.view(), extra)?.acts.pop().expect("output layer"))
    }

    pub fn check_shape(&self, expected: &NetShape) -> Result<()> {
        if &self.shape != expected || self.params.len() != expected.param_count() {
            return Err(Error::Shape(format!("network shape {:?} does not match {:?}", self.shape, expected)));
        }
        Ok(())
    }
}

/// Policy network: 12 tanh outputs split into mean and log-std halves.
pub fn init_policy<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Network {
    let mut net = Network::init(shape, rng);
    let l = net.shape.layout();
    let d = *l.layers.last().expect("output layer");
    let t = (INITIAL_LOG_STD - LOG_STD_MIN) / (LOG_STD_MAX - LOG_STD_MIN) * 2.0 - 1.0;
    for j in ACTION_DIM..2 * ACTION_DIM {
        net.params[d.b + j] = t.atanh();
    }
    net
}

/// Maps the tanh'd log-std half of the policy output onto [LOG_STD_MIN, LOG_STD_MAX].
pub fn log_std_from_head(t: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (t + 1.0) * (LOG_STD_MAX - LOG_STD_MIN)
}

pub const LOG_STD_SLOPE: f64 = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);

/// Diagonal Gaussian over pre-squash actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianAction {
    pub mean: [f64; ACTION_DIM],
    pub log_std: [f64; ACTION_DIM],
}

impl GaussianAction {
    pub fn from_head(row: ArrayView1<f64>) -> Self {
        let mut mean = [0.0; ACTION_DIM];
        let mut log_std = [0.0; ACTION_DIM];
        for j in 0..ACTION_DIM {
            mean[j] = row[j];
            log_std[j] = log_std_from_head(row[ACTION_DIM + j]);
        }
        GaussianAction { mean, log_std }
    }

    pub fn deterministic(&self) -> [f64; ACTION_DIM] {
        self.mean.map(f64::tanh)
    }

    /// Squashed action and its log-density for a given standard-normal draw.
    pub fn squash(&self, eps: &[f64; ACTION_DIM]) -> ([f64; ACTION_DIM], f64) {
        let mut a = [0.0; ACTION_DIM];
        let mut logp = 0.0;
        for j in 0..ACTION_DIM {
            let u = self.mean[j] + self.log_std[j].exp() * eps[j];
            a[j] = u.tanh();
            logp += -0.5 * eps[j] * eps[j] - self.log_std[j] - HALF_LN_2PI - log_one_minus_tanh_sq(u);
        }
        (a, logp)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ([f64; ACTION_DIM], f64) {
        let eps: [f64; ACTION_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let (mut a, logp) = self.squash(&eps);
        // Keep samples strictly inside the open interval.
        for v in a.iter_mut() {
            *v = v.clamp(-1.0 + 1e-12, 1.0 - 1e-12);
        }
        (a, logp)
    }

    /// Log-density of a squashed action.
    pub fn log_prob(&self, action: &[f64; ACTION_DIM]) -> f64 {
        let mut logp = 0.0;
        for j in 0..ACTION_DIM {
            let u = action[j].atanh();
            let z = (u - self.mean[j]) * (-self.log_std[j]).exp();
            logp += -0.5 * z * z - self.log_std[j] - HALF_LN_2PI - log_one_minus_tanh_sq(u);
        }
        logp
    }
}

pub fn sample_action<R: Rng + ?Sized>(dist: &GaussianAction, rng: &mut R) -> ([f64; ACTION_DIM], f64) {
    dist.sample(rng)
}

/// Action distributions for a batch of observations.
pub fn policy_distributions(policy: &Network, seqs: &[&ObservationSequence]) -> Result<Vec<GaussianAction>> {
    let batch = SeqBatch::from_observations(seqs)?;
    let out = policy.forward(&batch, None)?;
    Ok(out.rows().into_iter().map(GaussianAction::from_head).collect())
}

pub fn policy_forward(policy: &Network, seq: &ObservationSequence) -> Result<GaussianAction> {
    Ok(policy_distributions(policy, &[seq])?[0])
}

pub fn q_forward(q: &Network, seq: &ObservationSequence, action: &[f64; ACTION_DIM]) -> Result<f64> {
    let batch = SeqBatch::from_observations(&[seq])?;
    let a = ArrayView2::from_shape((1, ACTION_DIM), &action[..]).expect("action row");
    Ok(q.forward(&batch, Some(&a))?[(0, 0)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Polyak averaging: target <- (1 - tau) target + tau online.
pub fn soft_update(target: &mut Network, online: &Network, tau: f64) {
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        *t = (1.0 - tau) * *t + tau * o;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub policy_shape: NetShape,
    pub q_shape: NetShape,
    pub policy: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub q1_target: Vec<f64>,
    pub q2_target: Vec<f64>,
    pub log_alpha: f64,
    pub step: u64,
}

impl Checkpoint {
    pub fn policy(&self) -> Network {
        Network { shape: self.policy_shape.clone(), params: self.policy.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Shape(format!("checkpoint schema {} unsupported", self.schema_version)));
        }
        let np = self.policy_shape.param_count();
        let nq = self.q_shape.param_count();
        let ok = self.policy.len() == np
            && [&self.q1, &self.q2, &self.q1_target, &self.q2_target].iter().all(|v| v.len() == nq)
            && self.policy_shape.output == 2 * ACTION_DIM
            && self.q_shape.output == 1
            && self.q_shape.extra_input == ACTION_DIM;
        if !ok {
            return Err(Error::Shape("checkpoint arrays do not match the declared shapes".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        c.validate()?;
        Ok(c)
    }

    /// Loads and additionally requires the given architecture.
    pub fn load_expecting(path: &Path, policy: &NetShape, q: &NetShape) -> Result<Self> {
        let c = Self::load(path)?;
        if &c.policy_shape != policy || &c.q_shape != q {
            return Err(Error::Shape(format!(
                "checkpoint shapes {:?}/{:?} differ from expected {:?}/{:?}",
                c.policy_shape, c.q_shape, policy, q
            )));
        }
        Ok(c)
    }
}
