//! Fully connected ReLU networks `(x, t) ↦ R^d` with the time-dependent
//! output truncation `τ(z; ρ_t) = sign(z) min(|z|, ρ_t)`,
//! `ρ_t = B σ_t^{-1} sqrt(log(W L))`.
//!
//! A depth-`L` network has `L` hidden layers of width `W`: affine maps
//! `(d+1) → W`, `(W → W) × (L-1)` and `W → d`. Time enters as a raw extra
//! input coordinate; an [`Encoding`] may add `ln t` as a further input and
//! divide the output by `σ_t` ahead of the truncation.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::samples::Samples;
use crate::schedule::Schedule;
use crate::score::ScoreFunction;

/// Default truncation scale `B`.
pub const DEFAULT_TRUNC_B: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    rows: usize,
    cols: usize,
    w_off: usize,
    b_off: usize,
}

/// Fixed maps around the ReLU core. The default is the plain `(x, t)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Encoding {
    /// Append `ln t` to the input `[x, t]`.
    #[serde(default)]
    pub log_time: bool,
    /// Divide the core output by `σ_t` before truncating.
    #[serde(default)]
    pub sigma_scaled: bool,
}

impl Encoding {
    pub const RAW: Encoding = Encoding {
        log_time: false,
        sigma_scaled: false,
    };
    pub const LOG_TIME_SCALED: Encoding = Encoding {
        log_time: true,
        sigma_scaled: true,
    };

    fn extra_inputs(self) -> usize {
        1 + self.log_time as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    dim: usize,
    encoding: Encoding,
    width: usize,
    depth: usize,
    trunc_b: f64,
    schedule: Schedule,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub data: Vec<f64>,
    /// Number of samples accumulated.
    pub count: usize,
}

impl Gradient {
    pub fn zeros_like(net: &ScoreNetwork) -> Self {
        Self {
            data: vec![0.0; net.params.len()],
            count: 0,
        }
    }
}

fn layout(inputs: usize, dim: usize, width: usize, depth: usize) -> (Vec<Layer>, usize) {
    let mut shapes = vec![(width, inputs)];
    for _ in 1..depth {
        shapes.push((width, width));
    }
    shapes.push((dim, width));
    let mut off = 0;
    let layers = shapes
        .into_iter()
        .map(|(rows, cols)| {
            let l = Layer {
                rows,
                cols,
                w_off: off,
                b_off: off + rows * cols,
            };
            off += rows * cols + rows;
            l
        })
        .collect();
    (layers, off)
}

impl ScoreNetwork {
    /// He-style initialization: weights `N(0, 2/fan_in)`, biases zero.
    pub fn init(dim: usize, width: usize, depth: usize, trunc_b: f64, schedule: Schedule, seed: u64) -> Result<Self> {
        Self::init_encoded(dim, width, depth, trunc_b, schedule, Encoding::RAW, seed)
    }

    pub fn init_encoded(
        dim: usize,
        width: usize,
        depth: usize,
        trunc_b: f64,
        schedule: Schedule,
        encoding: Encoding,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || width == 0 || depth == 0 {
            return Err(Error::Domain("dim, width and depth must be >= 1".into()));
        }
        if !(trunc_b > 0.0) {
            return Err(Error::Domain("truncation scale B must be positive".into()));
        }
        let (layers, total) = layout(dim + encoding.extra_inputs(), dim, width, depth);
        let mut params = vec![0.0; total];
        let mut rng = stream(seed, 0x11);
        for l in &layers {
            let normal = Normal::new(0.0, (2.0 / l.cols as f64).sqrt()).expect("valid normal");
            for w in &mut params[l.w_off..l.b_off] {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(Self {
            dim,
            encoding,
            width,
            depth,
            trunc_b,
            schedule,
            layers,
            params,
        })
    }

    /// Network with all parameters zero.
    pub fn zeros(dim: usize, width: usize, depth: usize, trunc_b: f64, schedule: Schedule) -> Self {
        Self::zeros_encoded(dim, width, depth, trunc_b, schedule, Encoding::RAW)
    }

    pub fn zeros_encoded(
        dim: usize,
        width: usize,
        depth: usize,
        trunc_b: f64,
        schedule: Schedule,
        encoding: Encoding,
    ) -> Self {
        let (layers, total) = layout(dim + encoding.extra_inputs(), dim, width, depth);
        Self {
            dim,
            encoding,
            width,
            depth,
            trunc_b,
            schedule,
            layers,
            params: vec![0.0; total],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn trunc_b(&self) -> f64 {
        self.trunc_b
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(rows, cols)` of each weight matrix, input layer first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.rows, l.cols)).collect()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight matrix (row-major, `rows × cols`) and bias of layer `k`.
    pub fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        let l = self.layers[k];
        (&self.params[l.w_off..l.b_off], &self.params[l.b_off..l.b_off + l.rows])
    }

    pub fn layer_mut(&mut self, k: usize) -> (&mut [f64], &mut [f64]) {
        let l = self.layers[k];
        let (w, rest) = self.params[l.w_off..].split_at_mut(l.rows * l.cols);
        (w, &mut rest[..l.rows])
    }

    /// Truncation threshold `ρ_t = B σ_t^{-1} sqrt(log(W L))`.
    pub fn threshold(&self, t: f64) -> Result<f64> {
        let (_, sigma) = self.schedule.m_sigma(t)?;
        if sigma == 0.0 {
            return Err(Error::Singularity("truncation threshold is infinite at t = 0".into()));
        }
        Ok(self.trunc_b / sigma * ((self.width * self.depth) as f64).ln().sqrt())
    }

    /// Input vector `[x, t]`, or `[x, t, ln t]`.
    pub fn input_vector(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.dim + 2);
        self.fill_input(x, t, &mut input);
        input
    }

    fn fill_input(&self, x: &[f64], t: f64, input: &mut Vec<f64>) {
        input.clear();
        input.extend_from_slice(x);
        input.push(t);
        if self.encoding.log_time {
            input.push(t.ln());
        }
    }

    /// Factor applied to the core output ahead of the truncation.
    fn output_scale(&self, t: f64) -> Result<f64> {
        if self.encoding.sigma_scaled {
            Ok(1.0 / self.schedule.m_sigma(t)?.1)
        } else {
            Ok(1.0)
        }
    }

    /// Output of the ReLU core (no output scaling or truncation) for a full
    /// input vector.
    pub fn forward_input(&self, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        let mut next = Vec::with_capacity(self.width.max(self.dim));
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            affine(&self.params, l, &cur, &mut next);
            if k < last {
                next.iter_mut().for_each(|z| *z = z.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Untruncated output at `(x, t)`.
    pub fn forward_raw(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let c = self.output_scale(t)?;
        let mut out = self.forward_input(&self.input_vector(x, t));
        out.iter_mut().for_each(|z| *z *= c);
        Ok(out)
    }

    /// Truncated output at `(x, t)`.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.forward_into(x, t, &mut out)?;
        Ok(out)
    }

    pub fn forward_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("expected input of dimension {}", self.dim)));
        }
        let rho = self.threshold(t)?;
        let raw = self.forward_raw(x, t)?;
        for (o, z) in out.iter_mut().zip(raw) {
            if !z.is_finite() {
                return Err(Error::Numeric("network output is not finite".into()));
            }
            *o = z.clamp(-rho, rho);
        }
        Ok(())
    }

    /// Mean squared error `mean_i ‖forward(x_i, t_i) − target_i‖²` and its
    /// exact gradient, accumulated into `grad`. The truncation has derivative
    /// 1 strictly inside `(-ρ, ρ)` and 0 otherwise; ReLU has derivative 0 at 0.
    pub fn backward(&self, xs: &Samples, ts: &[f64], targets: &Samples, grad: &mut Gradient) -> Result<f64> {
        self.backward_weighted(xs, ts, targets, None, grad)
    }

    /// As [`backward`](Self::backward) for `mean_i w_i ‖forward(x_i, t_i) − target_i‖²`.
    pub fn backward_weighted(
        &self,
        xs: &Samples,
        ts: &[f64],
        targets: &Samples,
        weights: Option<&[f64]>,
        grad: &mut Gradient,
    ) -> Result<f64> {
        let n = xs.len();
        if n == 0 {
            return Err(Error::Domain("backward needs a nonempty batch".into()));
        }
        if ts.len() != n || targets.len() != n || xs.dim() != self.dim || targets.dim() != self.dim {
            return Err(Error::Shape("batch shapes do not match the network".into()));
        }
        if weights.is_some_and(|w| w.len() != n) {
            return Err(Error::Shape("one weight per sample is required".into()));
        }
        const CHUNK: usize = 64;
        let parts: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| -> Result<(f64, Vec<f64>)> {
                let mut g = vec![0.0; self.params.len()];
                let mut loss = 0.0;
                let mut ws = Workspace::new(self);
                for i in c * CHUNK..(c * CHUNK + CHUNK).min(n) {
                    let w = weights.map_or(1.0, |w| w[i]);
                    loss += self.backward_one(xs.row(i), ts[i], targets.row(i), w, &mut g, &mut ws, n)?;
                }
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.data.iter_mut().zip(&g) {
                *a += b;
            }
        }
        grad.count += n;
        Ok(loss / n as f64)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_one(
        &self,
        x: &[f64],
        t: f64,
        target: &[f64],
        weight: f64,
        g: &mut [f64],
        ws: &mut Workspace,
        n: usize,
    ) -> Result<f64> {
        let rho = self.threshold(t)?;
        let c = self.output_scale(t)?;
        let last = self.layers.len() - 1;
        // forward pass, keeping pre-activations
        self.fill_input(x, t, &mut ws.acts[0]);
        for (k, l) in self.layers.iter().enumerate() {
            affine(&self.params, l, &ws.acts[k], &mut ws.pre[k]);
            let z = &ws.pre[k];
            let a = &mut ws.acts[k + 1];
            a.clear();
            if k < last {
                a.extend(z.iter().map(|v| v.max(0.0)));
            } else {
                a.extend(z.iter().map(|v| (c * v).clamp(-rho, rho)));
            }
        }
        let out = &ws.acts[last + 1];
        let mut loss = 0.0;
        let delta = &mut ws.delta;
        delta.clear();
        for ((o, y), z) in out.iter().zip(target).zip(&ws.pre[last]) {
            let r = o - y;
            if !r.is_finite() {
                return Err(Error::Numeric("non-finite network output in backward".into()));
            }
            loss += weight * r * r;
            let inside = (c * z).abs() < rho;
            delta.push(if inside { 2.0 * weight * c * r / n as f64 } else { 0.0 });
        }
        // backward pass
        for k in (0..=last).rev() {
            let l = self.layers[k];
            let input = &ws.acts[k];
            for r in 0..l.rows {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                g[l.b_off + r] += d;
                let row = &mut g[l.w_off + r * l.cols..l.w_off + (r + 1) * l.cols];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if k == 0 {
                break;
            }
            let prev = &mut ws.delta_prev;
            prev.clear();
            prev.resize(l.cols, 0.0);
            for (r, &d) in delta.iter().enumerate().take(l.rows) {
                if d == 0.0 {
                    continue;
                }
                let row = &self.params[l.w_off + r * l.cols..l.w_off + (r + 1) * l.cols];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, z) in prev.iter_mut().zip(&ws.pre[k - 1]) {
                if *z <= 0.0 {
                    *p = 0.0;
                }
            }
            std::mem::swap(delta, prev);
        }
        Ok(loss)
    }

    /// Distance of `(x, t)` from the nearest nondifferentiable point: the
    /// smallest hidden pre-activation magnitude, or the gap between an output
    /// and the truncation threshold.
    pub fn kink_margin(&self, x: &[f64], t: f64) -> Result<f64> {
        let rho = self.threshold(t)?;
        let c = self.output_scale(t)?;
        let mut cur = self.input_vector(x, t);
        let mut next = Vec::with_capacity(self.width.max(self.dim));
        let last = self.layers.len() - 1;
        let mut margin = f64::INFINITY;
        for (k, l) in self.layers.iter().enumerate() {
            affine(&self.params, l, &cur, &mut next);
            if k < last {
                for z in next.iter_mut() {
                    margin = margin.min(z.abs());
                    *z = z.max(0.0);
                }
            } else {
                for z in &next {
                    margin = margin.min((rho - (c * z).abs()).abs());
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(margin)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("network has non-finite parameters".into()))
        }
    }
}

struct Workspace {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn new(net: &ScoreNetwork) -> Self {
        let k = net.layers.len();
        Self {
            acts: vec![Vec::with_capacity(net.width.max(net.dim + 2)); k + 1],
            pre: vec![Vec::with_capacity(net.width.max(net.dim)); k],
            delta: Vec::with_capacity(net.width),
            delta_prev: Vec::with_capacity(net.width),
        }
    }
}

fn affine(params: &[f64], l: &Layer, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let w = &params[l.w_off..l.b_off];
    let b = &params[l.b_off..l.b_off + l.rows];
    for r in 0..l.rows {
        let row = &w[r * l.cols..(r + 1) * l.cols];
        let mut acc = b[r];
        for (a, x) in row.iter().zip(input) {
            acc += a * x;
        }
        out.push(acc);
    }
}

impl ScoreFunction for ScoreNetwork {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.forward_into(x, t, out)
    }
}

/// Run metadata stored next to the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub t_lo: f64,
    pub t_hi: f64,
    pub seed: u64,
    #[serde(default)]
    pub training: BTreeMap<String, String>,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    dim: usize,
    width: usize,
    depth: usize,
    trunc_b: f64,
    schedule: Schedule,
    schedule_id: String,
    #[serde(default)]
    encoding: Encoding,
    meta: CheckpointMeta,
    layers: Vec<LayerParams>,
}

#[derive(Serialize, Deserialize)]
struct LayerParams {
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl ScoreNetwork {
    pub fn to_checkpoint_json(&self, meta: &CheckpointMeta) -> Result<String> {
        let file = CheckpointFile {
            format: "factordiff-score-network".into(),
            version: CHECKPOINT_VERSION,
            dim: self.dim,
            width: self.width,
            depth: self.depth,
            trunc_b: self.trunc_b,
            schedule: self.schedule.clone(),
            schedule_id: self.schedule.id(),
            encoding: self.encoding,
            meta: meta.clone(),
            layers: (0..self.layers.len())
                .map(|k| {
                    let (w, b) = self.layer(k);
                    LayerParams {
                        weights: w.to_vec(),
                        biases: b.to_vec(),
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Format(format!("checkpoint: {e}")))
    }

    pub fn from_checkpoint_json(text: &str) -> Result<(Self, CheckpointMeta)> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        let mut net = Self::zeros_encoded(
            file.dim,
            file.width,
            file.depth,
            file.trunc_b,
            file.schedule,
            file.encoding,
        );
        if file.layers.len() != net.layers.len() {
            return Err(Error::Format("checkpoint layer count does not match depth".into()));
        }
        for (k, lp) in file.layers.iter().enumerate() {
            let (w, b) = net.layer_mut(k);
            if lp.weights.len() != w.len() || lp.biases.len() != b.len() {
                return Err(Error::Format(format!("checkpoint layer {k} has the wrong shape")));
            }
            w.copy_from_slice(&lp.weights);
            b.copy_from_slice(&lp.biases);
        }
        net.check_finite()?;
        Ok((net, file.meta))
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json(meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 over the parameter bits and architecture; stable across
    /// save/load.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.dim, self.width, self.depth] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(self.trunc_b.to_bits().to_le_bytes());
        h.update(self.schedule.id().as_bytes());
        if self.encoding != Encoding::RAW {
            h.update([self.encoding.log_time as u8, self.encoding.sigma_scaled as u8]);
        }
        for p in &self.params {
            h.update(p.to_bits().to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
