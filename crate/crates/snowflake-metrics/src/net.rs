//! The trainable neural snowflake: stacked tensorized activations with
//! non-negative weights and a final power layer.
//!
//! A network maps a scalar gap `t >= 0` through layers
//!
//! ```text
//! t_i = |B_i| ( sigma_{a,b}(|A_i| t_{i-1}) |C_i| )
//! ```
//!
//! and finishes with `t_I^(1 + |p|)`, optionally mixed with the identity
//! through a weighted skip connection. Non-negativity is enforced by an
//! absolute-value reparameterization of the stored weights, so gradients
//! flow through `sign(w)`. With `p = 0` the map is concave, increasing,
//! and zero at zero, hence generates a metric; with `p != 0` it generates
//! a quasi-metric with relaxation constant `2^|p|`.

use crate::quasimetric::euclidean_gap;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("input must be non-negative, got {0}")]
    NegativeInput(f64),
    #[error("dimension chain must start and end at 1 and have at least one layer")]
    BadChain,
    #[error("layer {0}: {1}")]
    BadLayer(usize, &'static str),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("exponent must be at least 1 for a power configuration, got {0}")]
    BadExponent(f64),
    #[error("checkpoint is malformed: {0}")]
    BadCheckpoint(String),
}

/// Row value of the tensorized activation at a scalar `u`:
/// `(1 - exp(-|u|), |u|^a, ln(1 + |u|)^b)`. Every component is defined to
/// vanish at `u = 0` so that networks always map 0 to 0.
#[inline]
fn activation_row(u: f64, a: f64, b: f64) -> [f64; 3] {
    let t = u.abs();
    if t == 0.0 {
        return [0.0, 0.0, 0.0];
    }
    [1.0 - (-t).exp(), t.powf(a), (1.0 + t).ln().powf(b)]
}

/// Derivative of each activation component in `u`, under the subgradient
/// convention `d|u| = 0` at `u = 0`.
#[inline]
fn activation_row_deriv(u: f64, a: f64, b: f64) -> [f64; 3] {
    let t = u.abs();
    if t == 0.0 {
        return [0.0, 0.0, 0.0];
    }
    let sign = if u > 0.0 { 1.0 } else { -1.0 };
    let log1p = (1.0 + t).ln();
    [
        sign * (-t).exp(),
        sign * a * t.powf(a - 1.0),
        sign * b * log1p.powf(b - 1.0) / (1.0 + t),
    ]
}

/// Tensorized activation: maps a length-`J` vector to the `J x 3` matrix
/// whose row `j` is `(1 - exp(-|u_j|), |u_j|^a, ln(1 + |u_j|)^b)`.
pub fn tensorized_activation(u: &DVector<f64>, a: f64, b: f64) -> DMatrix<f64> {
    DMatrix::from_fn(u.len(), 3, |j, k| activation_row(u[j], a, b)[k])
}

/// One snowflake layer. `pre` is the matrix applied before the
/// activation, `post` the one applied after, and `mix` the 3-vector
/// contracting the activation components. All three are stored raw; the
/// effective weights are their absolute values. The exponents
/// `alpha`/`beta` parameterize the activation and are fixed at 1 during
/// training.
#[derive(Debug, Clone, PartialEq)]
pub struct SnowflakeLayer {
    pub pre: DMatrix<f64>,
    pub post: DMatrix<f64>,
    pub mix: [f64; 3],
    pub alpha: f64,
    pub beta: f64,
}

impl SnowflakeLayer {
    fn validate(&self, index: usize) -> Result<(), NetError> {
        if self.pre.nrows() != self.post.ncols() {
            return Err(NetError::BadLayer(index, "pre rows must equal post cols"));
        }
        if self.pre.iter().all(|&w| w == 0.0) || self.post.iter().all(|&w| w == 0.0) {
            return Err(NetError::BadLayer(index, "a weight matrix is entirely zero"));
        }
        if self.mix.iter().all(|&w| w == 0.0) {
            return Err(NetError::BadLayer(index, "mix vector is entirely zero"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(NetError::BadLayer(index, "alpha must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(NetError::BadLayer(index, "beta must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A neural snowflake network. `p` is stored raw; the effective outer
/// exponent is `1 + |p|`. `skip_weight` in `[0, 1]` mixes the identity
/// into the output: `f(t) = skip t + (1 - skip) t_I^(1+|p|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralSnowflake {
    pub layers: Vec<SnowflakeLayer>,
    pub p: f64,
    pub skip_weight: f64,
    pub seed: Option<u64>,
}

/// Gradients of a network output with respect to every raw parameter and
/// the input, in the same shapes as the owning network.
#[derive(Debug, Clone)]
pub struct SnowflakeGradients {
    pub d_pre: Vec<DMatrix<f64>>,
    pub d_post: Vec<DMatrix<f64>>,
    pub d_mix: Vec<[f64; 3]>,
    pub d_p: f64,
    pub d_skip: f64,
    pub d_input: f64,
}

/// Scratch buffers for repeated forward/backward evaluation.
#[derive(Debug, Clone)]
pub struct SnowflakeWorkspace {
    /// `values[i]` is the layer-i output vector (`values[0]` the input).
    values: Vec<DVector<f64>>,
    /// Pre-activation vector per layer.
    pre_acts: Vec<DVector<f64>>,
    /// Activation-contracted vector per layer (sigma . mix).
    mixed: Vec<DVector<f64>>,
    d_value: Vec<DVector<f64>>,
    d_mixed: Vec<DVector<f64>>,
    d_pre_act: Vec<DVector<f64>>,
}

impl NeuralSnowflake {
    pub fn new(layers: Vec<SnowflakeLayer>, p: f64, skip_weight: f64) -> Result<Self, NetError> {
        if layers.is_empty()
            || layers[0].pre.ncols() != 1
            || layers.last().unwrap().post.nrows() != 1
        {
            return Err(NetError::BadChain);
        }
        for i in 1..layers.len() {
            if layers[i].pre.ncols() != layers[i - 1].post.nrows() {
                return Err(NetError::BadLayer(i, "input width does not match previous output"));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.validate(i)?;
        }
        if !(0.0..=1.0).contains(&skip_weight) {
            return Err(NetError::BadLayer(0, "skip weight must lie in [0, 1]"));
        }
        Ok(Self { layers, p, skip_weight, seed: None })
    }

    /// Initializes a network on the dimension chain `d_0, ..., d_I` (both
    /// ends must be 1). Each layer's inner width is `max(d_{i-1}, d_i)`,
    /// matching the published experiment configuration where every hidden
    /// width is the chain's interior size. Raw weights of an `r x c`
    /// matrix are drawn uniformly from `[0, 1/(r c))`; `alpha = beta = 1`;
    /// `p` starts at `1e-8` and `skip_weight` at `0.5`.
    pub fn init(dim_chain: &[usize], seed: u64) -> Result<Self, NetError> {
        if dim_chain.len() < 2
            || dim_chain[0] != 1
            || *dim_chain.last().unwrap() != 1
            || dim_chain.iter().any(|&d| d == 0)
        {
            return Err(NetError::BadChain);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
            let bound = 1.0 / (rows * cols) as f64;
            DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(0.0..bound))
        }
        let mut layers = Vec::with_capacity(dim_chain.len() - 1);
        for w in dim_chain.windows(2) {
            let (d_in, d_out) = (w[0], w[1]);
            let inner = d_in.max(d_out);
            let pre = uniform(&mut rng, inner, d_in);
            let post = uniform(&mut rng, d_out, inner);
            let mix_bound = 1.0 / 3.0;
            let mut mix = [0.0; 3];
            for m in &mut mix {
                *m = rng.gen_range(0.0..mix_bound);
            }
            layers.push(SnowflakeLayer { pre, post, mix, alpha: 1.0, beta: 1.0 });
        }
        let mut net = Self::new(layers, 1e-8, 0.5)?;
        net.seed = Some(seed);
        Ok(net)
    }

    /// The single-layer configuration that implements the identity:
    /// `A = B = (1)`, `C = (0, 1, 0)`, `alpha = 1`, `p = 0`.
    pub fn identity_config() -> Self {
        Self::power_config(1.0).unwrap()
    }

    /// The single-layer configuration implementing `t -> t^q` for
    /// `q >= 1`, via the fractal component and outer exponent `q`.
    pub fn power_config(exponent: f64) -> Result<Self, NetError> {
        if !exponent.is_finite() || exponent < 1.0 {
            return Err(NetError::BadExponent(exponent));
        }
        let layer = SnowflakeLayer {
            pre: DMatrix::from_element(1, 1, 1.0),
            post: DMatrix::from_element(1, 1, 1.0),
            mix: [0.0, 1.0, 0.0],
            alpha: 1.0,
            beta: 0.0,
        };
        Self::new(vec![layer], exponent - 1.0, 0.0)
    }

    /// Effective outer exponent `1 + |p|`.
    pub fn effective_exponent(&self) -> f64 {
        1.0 + self.p.abs()
    }

    /// Relaxation constant of the triangle inequality generated by the
    /// final power layer: `2^|p|` (1 when `p = 0`, i.e. a true metric).
    pub fn relaxed_triangle_constant(&self) -> f64 {
        2f64.powf(self.p.abs())
    }

    pub fn workspace(&self) -> SnowflakeWorkspace {
        let mut values = vec![DVector::zeros(1)];
        let mut pre_acts = Vec::new();
        let mut mixed = Vec::new();
        for layer in &self.layers {
            pre_acts.push(DVector::zeros(layer.pre.nrows()));
            mixed.push(DVector::zeros(layer.pre.nrows()));
            values.push(DVector::zeros(layer.post.nrows()));
        }
        SnowflakeWorkspace {
            d_value: values.clone(),
            d_mixed: mixed.clone(),
            d_pre_act: pre_acts.clone(),
            values,
            pre_acts,
            mixed,
        }
    }

    /// Forward evaluation `f(t)` using a reusable workspace.
    pub fn forward_ws(&self, t: f64, ws: &mut SnowflakeWorkspace) -> Result<f64, NetError> {
        if t < 0.0 {
            return Err(NetError::NegativeInput(t));
        }
        ws.values[0][0] = t;
        for (i, layer) in self.layers.iter().enumerate() {
            let (head, tail) = ws.values.split_at_mut(i + 1);
            let input = &head[i];
            let u = &mut ws.pre_acts[i];
            // u = |A| v ; input is elementwise non-negative by induction
            for r in 0..layer.pre.nrows() {
                let mut acc = 0.0;
                for c in 0..layer.pre.ncols() {
                    acc += layer.pre[(r, c)].abs() * input[c];
                }
                u[r] = acc;
            }
            let m = &mut ws.mixed[i];
            let mix = [layer.mix[0].abs(), layer.mix[1].abs(), layer.mix[2].abs()];
            for r in 0..u.len() {
                let row = activation_row(u[r], layer.alpha, layer.beta);
                m[r] = mix[0] * row[0] + mix[1] * row[1] + mix[2] * row[2];
            }
            let out = &mut tail[0];
            for r in 0..layer.post.nrows() {
                let mut acc = 0.0;
                for c in 0..layer.post.ncols() {
                    acc += layer.post[(r, c)].abs() * m[c];
                }
                out[r] = acc;
            }
        }
        let s = ws.values[self.layers.len()][0];
        let raw = if s == 0.0 { 0.0 } else { s.powf(self.effective_exponent()) };
        Ok(self.skip_weight * t + (1.0 - self.skip_weight) * raw)
    }

    /// Forward evaluation `f(t)`.
    pub fn forward(&self, t: f64) -> Result<f64, NetError> {
        let mut ws = self.workspace();
        self.forward_ws(t, &mut ws)
    }

    /// Reverse pass after `forward_ws`, accumulating `upstream . df` into
    /// `grads`. The input cotangent is added to `grads.d_input`.
    pub fn backward_ws(
        &self,
        t: f64,
        upstream: f64,
        ws: &mut SnowflakeWorkspace,
        grads: &mut SnowflakeGradients,
    ) {
        let n_layers = self.layers.len();
        let s = ws.values[n_layers][0];
        let q = self.effective_exponent();
        let raw = if s == 0.0 { 0.0 } else { s.powf(q) };
        let keep = 1.0 - self.skip_weight;

        grads.d_skip += upstream * (t - raw);
        if s > 0.0 {
            grads.d_p += upstream * keep * raw * s.ln() * sign(self.p);
        }
        let d_s = if s > 0.0 { upstream * keep * q * s.powf(q - 1.0) } else { 0.0 };
        ws.d_value[n_layers][0] = d_s;

        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            let (d_head, d_tail) = ws.d_value.split_at_mut(i + 1);
            let d_out = &d_tail[0];
            let m = &ws.mixed[i];
            let u = &ws.pre_acts[i];
            let input = &ws.values[i];

            // post matrix: effective |B|, gradient routed through sign(B)
            let d_m = &mut ws.d_mixed[i];
            for c in 0..layer.post.ncols() {
                let mut acc = 0.0;
                for r in 0..layer.post.nrows() {
                    acc += layer.post[(r, c)].abs() * d_out[r];
                }
                d_m[c] = acc;
            }
            for r in 0..layer.post.nrows() {
                for c in 0..layer.post.ncols() {
                    grads.d_post[i][(r, c)] += sign(layer.post[(r, c)]) * d_out[r] * m[c];
                }
            }

            let mix = [layer.mix[0].abs(), layer.mix[1].abs(), layer.mix[2].abs()];
            let d_u = &mut ws.d_pre_act[i];
            let mut d_mix_eff = [0.0f64; 3];
            for r in 0..u.len() {
                let row = activation_row(u[r], layer.alpha, layer.beta);
                let deriv = activation_row_deriv(u[r], layer.alpha, layer.beta);
                for k in 0..3 {
                    d_mix_eff[k] += d_m[r] * row[k];
                }
                d_u[r] = d_m[r] * (mix[0] * deriv[0] + mix[1] * deriv[1] + mix[2] * deriv[2]);
            }
            for k in 0..3 {
                grads.d_mix[i][k] += sign(layer.mix[k]) * d_mix_eff[k];
            }

            let d_in = &mut d_head[i];
            for c in 0..layer.pre.ncols() {
                let mut acc = 0.0;
                for r in 0..layer.pre.nrows() {
                    acc += layer.pre[(r, c)].abs() * d_u[r];
                }
                d_in[c] = acc;
            }
            for r in 0..layer.pre.nrows() {
                for c in 0..layer.pre.ncols() {
                    grads.d_pre[i][(r, c)] += sign(layer.pre[(r, c)]) * d_u[r] * input[c];
                }
            }
        }
        grads.d_input += self.skip_weight * upstream + ws.d_value[0][0];
    }

    /// Exact reverse-mode gradients of `f` at `t`.
    ///
    /// At `t = 0` the non-differentiable terms use the subgradient
    /// convention `d|u| = 0`, so all gradients except `d_skip`/`d_input`
    /// vanish there.
    pub fn backward(&self, t: f64) -> Result<SnowflakeGradients, NetError> {
        let mut ws = self.workspace();
        self.forward_ws(t, &mut ws)?;
        let mut grads = SnowflakeGradients::zeros_like(self);
        self.backward_ws(t, 1.0, &mut ws, &mut grads);
        Ok(grads)
    }

    /// The induced distance `f(||x - y||)` between two points.
    pub fn metric(&self, x: &[f64], y: &[f64]) -> Result<f64, NetError> {
        let gap = euclidean_gap(x, y)
            .map_err(|_| NetError::DimensionMismatch(x.len(), y.len()))?;
        self.forward(gap)
    }

    /// Flattened raw weight parameters (pre, post, mix per layer,
    /// row-major), excluding `p` and the skip weight.
    pub fn weight_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            push_row_major(&mut out, &layer.pre);
            push_row_major(&mut out, &layer.post);
            out.extend_from_slice(&layer.mix);
        }
        out
    }

    pub fn load_weight_params(&mut self, params: &[f64]) {
        let mut it = params.iter();
        for layer in &mut self.layers {
            read_row_major(&mut it, &mut layer.pre);
            read_row_major(&mut it, &mut layer.post);
            for m in &mut layer.mix {
                *m = *it.next().expect("parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "parameter vector too long");
    }

    pub fn to_checkpoint_json(&self) -> String {
        serde_json::to_string(&SnowflakeCheckpoint::from(self)).unwrap()
    }

    pub fn from_checkpoint_json(json: &str) -> Result<Self, NetError> {
        let ck: SnowflakeCheckpoint =
            serde_json::from_str(json).map_err(|e| NetError::BadCheckpoint(e.to_string()))?;
        ck.into_net()
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
}

fn read_row_major<'a>(it: &mut impl Iterator<Item = &'a f64>, m: &mut DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            m[(r, c)] = *it.next().expect("parameter vector too short");
        }
    }
}

impl SnowflakeGradients {
    pub fn zeros_like(net: &NeuralSnowflake) -> Self {
        Self {
            d_pre: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.pre.nrows(), l.pre.ncols()))
                .collect(),
            d_post: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.post.nrows(), l.post.ncols()))
                .collect(),
            d_mix: vec![[0.0; 3]; net.layers.len()],
            d_p: 0.0,
            d_skip: 0.0,
            d_input: 0.0,
        }
    }

    pub fn zero(&mut self) {
        for m in &mut self.d_pre {
            m.fill(0.0);
        }
        for m in &mut self.d_post {
            m.fill(0.0);
        }
        for m in &mut self.d_mix {
            *m = [0.0; 3];
        }
        self.d_p = 0.0;
        self.d_skip = 0.0;
        self.d_input = 0.0;
    }

    /// Same layout as [`NeuralSnowflake::weight_params`].
    pub fn weight_grad_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for ((pre, post), mix) in self.d_pre.iter().zip(&self.d_post).zip(&self.d_mix) {
            push_row_major(&mut out, pre);
            push_row_major(&mut out, post);
            out.extend_from_slice(mix);
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct LayerCheckpoint {
    /// Row-major raw entries of the pre-activation matrix `A`.
    a: Vec<f64>,
    /// Row-major raw entries of the post-activation matrix `B`.
    b: Vec<f64>,
    c: [f64; 3],
    alpha: f64,
    beta: f64,
}

#[derive(Serialize, Deserialize)]
struct SnowflakeCheckpoint {
    dim_chain: Vec<usize>,
    hidden_widths: Vec<usize>,
    layers: Vec<LayerCheckpoint>,
    p: f64,
    skip_weight: f64,
    seed: Option<u64>,
}

impl From<&NeuralSnowflake> for SnowflakeCheckpoint {
    fn from(net: &NeuralSnowflake) -> Self {
        let mut dim_chain = vec![1usize];
        dim_chain.extend(net.layers.iter().map(|l| l.post.nrows()));
        let hidden_widths = net.layers.iter().map(|l| l.pre.nrows()).collect();
        let layers = net
            .layers
            .iter()
            .map(|l| {
                let mut a = Vec::new();
                push_row_major(&mut a, &l.pre);
                let mut b = Vec::new();
                push_row_major(&mut b, &l.post);
                LayerCheckpoint { a, b, c: l.mix, alpha: l.alpha, beta: l.beta }
            })
            .collect();
        Self {
            dim_chain,
            hidden_widths,
            layers,
            p: net.p,
            skip_weight: net.skip_weight,
            seed: net.seed,
        }
    }
}

impl SnowflakeCheckpoint {
    fn into_net(self) -> Result<NeuralSnowflake, NetError> {
        if self.dim_chain.len() < 2
            || self.layers.len() != self.dim_chain.len() - 1
            || self.hidden_widths.len() != self.layers.len()
        {
            return Err(NetError::BadCheckpoint("chain and layer counts disagree".into()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let (d_in, d_out) = (self.dim_chain[i], self.dim_chain[i + 1]);
            let inner = self.hidden_widths[i];
            if l.a.len() != inner * d_in || l.b.len() != d_out * inner {
                return Err(NetError::BadCheckpoint(format!("layer {i} entry counts disagree")));
            }
            layers.push(SnowflakeLayer {
                pre: DMatrix::from_row_slice(inner, d_in, &l.a),
                post: DMatrix::from_row_slice(d_out, inner, &l.b),
                mix: l.c,
                alpha: l.alpha,
                beta: l.beta,
            });
        }
        let mut net = NeuralSnowflake::new(layers, self.p, self.skip_weight)?;
        net.seed = self.seed;
        Ok(net)
    }
}
