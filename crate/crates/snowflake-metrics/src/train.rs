//! Pairwise-distance regression: Adam, the three model kinds, and the
//! synthetic experiment loop.
//!
//! A run draws point pairs from the clamped-Gaussian cloud, labels each
//! pair with a target metric value of its Euclidean gap, and trains one
//! of three predictors of that value by squared-error descent:
//!
//! * `mlp_only` — `||E(x) - E(y)||` for a deep ReLU encoder `E`;
//! * `snowflake_plus_mlp` — `f(||E(x) - E(y)||)` with a neural snowflake
//!   `f` on top of a smaller encoder;
//! * `snowflake_direct` — `f(||x - y||)` in the ambient space.
//!
//! Training streams its pairs from a seeded generator, so a run needs
//! O(batch) memory at any scale and every epoch replays the identical
//! data. The snowflake exponent `p` gets its own optimizer; batches are
//! reduced over fixed-size chunks in a fixed order, which makes reports
//! bit-reproducible regardless of thread count.

use crate::graph::{clamped_normal, synthetic_target, MetricId};
use crate::mlp::{Mlp, MlpError, MlpGradients, MlpWorkspace};
use crate::net::{NetError, NeuralSnowflake, SnowflakeGradients, SnowflakeWorkspace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("parameter and gradient shapes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Which predictor a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MlpOnly,
    SnowflakePlusMlp,
    SnowflakeDirect,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::MlpOnly,
        ModelKind::SnowflakePlusMlp,
        ModelKind::SnowflakeDirect,
    ];
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ModelKind::MlpOnly => "mlp_only",
            ModelKind::SnowflakePlusMlp => "snowflake_plus_mlp",
            ModelKind::SnowflakeDirect => "snowflake_direct",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "mlp_only" => Ok(ModelKind::MlpOnly),
            "snowflake_plus_mlp" => Ok(ModelKind::SnowflakePlusMlp),
            "snowflake_direct" => Ok(ModelKind::SnowflakeDirect),
            other => Err(format!("unknown model kind: {other}")),
        }
    }
}

/// Full description of one synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub metric: MetricId,
    pub model: ModelKind,
    pub ambient_dim: usize,
    pub embed_dim: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr_main: f64,
    pub lr_p: f64,
    pub seed: u64,
    /// How training pairs relate to the underlying fully connected graph:
    /// pairs are independently resampled rather than enumerated.
    #[serde(default = "default_pair_sampling")]
    pub pair_sampling: String,
    /// Cloud model: independent standard normals clamped to [-1, 1].
    #[serde(default = "default_cloud")]
    pub cloud: String,
}

fn default_pair_sampling() -> String {
    "resampled".into()
}

fn default_cloud() -> String {
    "clamped_gaussian".into()
}

impl ExperimentConfig {
    /// Desk-scale defaults: 200k training pairs, 10k test pairs, and the
    /// published optimizer settings (batch 1000, 40 epochs, both learning
    /// rates 1e-4).
    pub fn desk_scale(metric: MetricId, model: ModelKind, seed: u64) -> Self {
        Self {
            metric,
            model,
            ambient_dim: 100,
            embed_dim: 2,
            train_pairs: 200_000,
            test_pairs: 10_000,
            batch: 1000,
            epochs: 40,
            lr_main: 1e-4,
            lr_p: 1e-4,
            seed,
            pair_sampling: default_pair_sampling(),
            cloud: default_cloud(),
        }
    }

    /// Published scale: 4M training pairs.
    pub fn published_scale(metric: MetricId, model: ModelKind, seed: u64) -> Self {
        Self {
            train_pairs: 4_000_000,
            ..Self::desk_scale(metric, model, seed)
        }
    }
}

/// Result of one run. `epoch_losses` feeds the loss-trace CSV and
/// `wall_time_secs` is diagnostic only; neither belongs to the canonical
/// result line, which must be byte-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub train_mse: f64,
    pub test_mse: f64,
    pub param_count: usize,
    #[serde(skip)]
    pub epoch_losses: Vec<f64>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Bias-corrected Adam state for one parameter group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch(params.len(), grads.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// A predictor of pairwise target distances.
#[derive(Debug, Clone)]
pub struct PairModel {
    pub kind: ModelKind,
    pub mlp: Option<Mlp>,
    pub net: Option<NeuralSnowflake>,
}

/// Gradients of one pair loss with respect to every trainable parameter.
#[derive(Debug, Clone)]
pub struct PairGradients {
    pub mlp: Option<MlpGradients>,
    pub net: Option<SnowflakeGradients>,
}

/// Hidden width shared by all published architectures.
const HIDDEN: usize = 20;

impl PairModel {
    /// Builds the published architecture for a model kind: a 10-layer
    /// encoder alone, a 5-layer encoder under a 2-layer snowflake, or the
    /// 2-layer snowflake alone. Stand-alone fits disable the skip mix.
    pub fn init(
        kind: ModelKind,
        ambient_dim: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut mlp_rng_seed = ChaCha8Rng::seed_from_u64(seed);
        mlp_rng_seed.set_stream(1);
        let mlp_seed = mlp_rng_seed.gen::<u64>();
        let mut net_rng_seed = ChaCha8Rng::seed_from_u64(seed);
        net_rng_seed.set_stream(2);
        let net_seed = net_rng_seed.gen::<u64>();

        let deep: Vec<usize> = std::iter::once(ambient_dim)
            .chain(std::iter::repeat_n(HIDDEN, 9))
            .chain(std::iter::once(embed_dim))
            .collect();
        let shallow: Vec<usize> = std::iter::once(ambient_dim)
            .chain(std::iter::repeat_n(HIDDEN, 4))
            .chain(std::iter::once(embed_dim))
            .collect();

        let snowflake = || -> Result<NeuralSnowflake, TrainError> {
            let mut net = NeuralSnowflake::init(&[1, HIDDEN, 1], net_seed)?;
            net.skip_weight = 0.0;
            Ok(net)
        };

        let (mlp, net) = match kind {
            ModelKind::MlpOnly => (Some(Mlp::init(&deep, mlp_seed)?), None),
            ModelKind::SnowflakePlusMlp => {
                (Some(Mlp::init(&shallow, mlp_seed)?), Some(snowflake()?))
            }
            ModelKind::SnowflakeDirect => (None, Some(snowflake()?)),
        };
        Ok(Self { kind, mlp, net })
    }

    /// Trainable parameter count: nonzero encoder parameters plus the
    /// snowflake weights and its exponent.
    pub fn param_count(&self) -> usize {
        let mlp = self.mlp.as_ref().map_or(0, |m| m.param_count().nonzero_params);
        let net = self.net.as_ref().map_or(0, |n| n.weight_params().len() + 1);
        mlp + net
    }

    /// Concatenated main parameter group (everything except `p`).
    pub fn main_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(mlp) = &self.mlp {
            out.extend(mlp.param_vector());
        }
        if let Some(net) = &self.net {
            out.extend(net.weight_params());
        }
        out
    }

    pub fn load_main_params(&mut self, params: &[f64]) {
        let split = self.mlp.as_ref().map_or(0, |m| m.param_vector().len());
        if let Some(mlp) = &mut self.mlp {
            mlp.load_param_vector(&params[..split]);
        }
        if let Some(net) = &mut self.net {
            net.load_weight_params(&params[split..]);
        }
    }

    pub fn workspace(&self) -> PairWorkspace {
        PairWorkspace {
            mlp_x: self.mlp.as_ref().map(|m| m.workspace()),
            mlp_y: self.mlp.as_ref().map(|m| m.workspace()),
            net: self.net.as_ref().map(|n| n.workspace()),
        }
    }

    pub fn gradients(&self) -> PairGradients {
        PairGradients {
            mlp: self.mlp.as_ref().map(MlpGradients::zeros_like),
            net: self.net.as_ref().map(SnowflakeGradients::zeros_like),
        }
    }

    /// Predicted distance for one pair.
    pub fn predict(&self, x: &[f64], y: &[f64]) -> Result<f64, TrainError> {
        let mut ws = self.workspace();
        self.predict_ws(x, y, &mut ws)
    }

    pub fn predict_ws(
        &self,
        x: &[f64],
        y: &[f64],
        ws: &mut PairWorkspace,
    ) -> Result<f64, TrainError> {
        match self.kind {
            ModelKind::MlpOnly => {
                let r = self.encoded_gap(x, y, ws)?;
                Ok(r)
            }
            ModelKind::SnowflakePlusMlp => {
                let r = self.encoded_gap(x, y, ws)?;
                let net = self.net.as_ref().unwrap();
                Ok(net.forward_ws(r, ws.net.as_mut().unwrap())?)
            }
            ModelKind::SnowflakeDirect => {
                let r = euclidean(x, y);
                let net = self.net.as_ref().unwrap();
                Ok(net.forward_ws(r, ws.net.as_mut().unwrap())?)
            }
        }
    }

    fn encoded_gap(&self, x: &[f64], y: &[f64], ws: &mut PairWorkspace) -> Result<f64, TrainError> {
        let mlp = self.mlp.as_ref().expect("encoder model");
        mlp.forward_ws(x, ws.mlp_x.as_mut().unwrap())?;
        mlp.forward_ws(y, ws.mlp_y.as_mut().unwrap())?;
        let ex = ws.mlp_x.as_ref().unwrap().output();
        let ey = ws.mlp_y.as_ref().unwrap().output();
        Ok(euclidean(ex.as_slice(), ey.as_slice()))
    }

    /// Squared-error loss of one pair and its gradient, accumulated into
    /// `grads`. Returns the loss.
    pub fn pair_loss_ws(
        &self,
        x: &[f64],
        y: &[f64],
        target: f64,
        ws: &mut PairWorkspace,
        grads: &mut PairGradients,
    ) -> Result<f64, TrainError> {
        let pred = self.predict_ws(x, y, ws)?;
        let loss = (pred - target) * (pred - target);
        let upstream = 2.0 * (pred - target);

        match self.kind {
            ModelKind::MlpOnly => {
                self.backprop_encoder_gap(upstream, ws, grads);
            }
            ModelKind::SnowflakePlusMlp => {
                let net = self.net.as_ref().unwrap();
                let net_grads = grads.net.as_mut().unwrap();
                let r = self.cached_encoded_gap(ws);
                let before = net_grads.d_input;
                net.backward_ws(r, upstream, ws.net.as_mut().unwrap(), net_grads);
                let d_r = net_grads.d_input - before;
                self.backprop_encoder_gap(d_r, ws, grads);
            }
            ModelKind::SnowflakeDirect => {
                let net = self.net.as_ref().unwrap();
                let r = euclidean(x, y);
                net.backward_ws(r, upstream, ws.net.as_mut().unwrap(), grads.net.as_mut().unwrap());
            }
        }
        Ok(loss)
    }

    fn cached_encoded_gap(&self, ws: &PairWorkspace) -> f64 {
        let ex = ws.mlp_x.as_ref().unwrap().output();
        let ey = ws.mlp_y.as_ref().unwrap().output();
        euclidean(ex.as_slice(), ey.as_slice())
    }

    /// Routes `d_loss/d_gap` through both encoder passes. At gap 0 the
    /// norm is non-differentiable and the subgradient 0 is used.
    fn backprop_encoder_gap(&self, d_gap: f64, ws: &mut PairWorkspace, grads: &mut PairGradients) {
        let mlp = self.mlp.as_ref().unwrap();
        let mlp_grads = grads.mlp.as_mut().unwrap();
        let (ex, ey) = (
            ws.mlp_x.as_ref().unwrap().output().clone_owned(),
            ws.mlp_y.as_ref().unwrap().output().clone_owned(),
        );
        let r = euclidean(ex.as_slice(), ey.as_slice());
        if r == 0.0 || d_gap == 0.0 {
            return;
        }
        let scale = d_gap / r;
        let up_x: Vec<f64> = ex.iter().zip(ey.iter()).map(|(a, b)| scale * (a - b)).collect();
        let up_y: Vec<f64> = up_x.iter().map(|v| -v).collect();
        mlp.backward_ws(ws.mlp_x.as_mut().unwrap(), &up_x, mlp_grads);
        mlp.backward_ws(ws.mlp_y.as_mut().unwrap(), &up_y, mlp_grads);
    }
}

/// Squared-error loss of one pair with fresh gradient buffers.
pub fn pair_loss(
    model: &PairModel,
    x: &[f64],
    y: &[f64],
    target: f64,
) -> Result<(f64, PairGradients), TrainError> {
    let mut ws = model.workspace();
    let mut grads = model.gradients();
    let loss = model.pair_loss_ws(x, y, target, &mut ws, &mut grads)?;
    Ok((loss, grads))
}

/// Per-thread scratch for pair evaluation.
#[derive(Debug, Clone)]
pub struct PairWorkspace {
    mlp_x: Option<MlpWorkspace>,
    mlp_y: Option<MlpWorkspace>,
    net: Option<SnowflakeWorkspace>,
}

impl PairGradients {
    fn zero(&mut self) {
        if let Some(m) = &mut self.mlp {
            m.zero();
        }
        if let Some(n) = &mut self.net {
            n.zero();
        }
    }

    fn add(&mut self, other: &Self) {
        if let (Some(a), Some(b)) = (&mut self.mlp, &other.mlp) {
            a.add_scaled(b, 1.0);
        }
        if let (Some(a), Some(b)) = (&mut self.net, &other.net) {
            add_net_grads(a, b);
        }
    }

    /// Main-group gradient vector, matching [`PairModel::main_params`].
    pub fn main_vector(&self, scale: f64) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(m) = &self.mlp {
            m.append_param_vector(&mut out);
        }
        if let Some(n) = &self.net {
            out.extend(n.weight_grad_vector());
        }
        for v in &mut out {
            *v *= scale;
        }
        out
    }
}

fn add_net_grads(a: &mut SnowflakeGradients, b: &SnowflakeGradients) {
    for (x, y) in a.d_pre.iter_mut().zip(&b.d_pre) {
        for (u, v) in x.iter_mut().zip(y.iter()) {
            *u += v;
        }
    }
    for (x, y) in a.d_post.iter_mut().zip(&b.d_post) {
        for (u, v) in x.iter_mut().zip(y.iter()) {
            *u += v;
        }
    }
    for (x, y) in a.d_mix.iter_mut().zip(&b.d_mix) {
        for k in 0..3 {
            x[k] += y[k];
        }
    }
    a.d_p += b.d_p;
    a.d_skip += b.d_skip;
    a.d_input += b.d_input;
}

fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Deterministic substreams of a run seed.
const STREAM_TRAIN: u64 = 10;
const STREAM_TEST: u64 = 11;

/// Fixed chunk width for in-batch parallelism. Chunk sums are reduced in
/// order, so results do not depend on the thread count.
const CHUNK: usize = 125;

struct PairBatch {
    xs: Vec<f64>,
    ys: Vec<f64>,
    targets: Vec<f64>,
    dim: usize,
}

impl PairBatch {
    fn with_capacity(pairs: usize, dim: usize) -> Self {
        Self {
            xs: Vec::with_capacity(pairs * dim),
            ys: Vec::with_capacity(pairs * dim),
            targets: Vec::with_capacity(pairs),
            dim,
        }
    }

    fn clear(&mut self) {
        self.xs.clear();
        self.ys.clear();
        self.targets.clear();
    }

    fn push_from(&mut self, rng: &mut ChaCha8Rng, metric: MetricId) {
        let start = self.xs.len();
        for _ in 0..self.dim {
            self.xs.push(clamped_normal(rng));
        }
        for _ in 0..self.dim {
            self.ys.push(clamped_normal(rng));
        }
        let gap = euclidean(&self.xs[start..], &self.ys[start..]);
        self.targets.push(synthetic_target(metric, gap));
    }

    fn len(&self) -> usize {
        self.targets.len()
    }

    fn pair(&self, i: usize) -> (&[f64], &[f64], f64) {
        let lo = i * self.dim;
        let hi = lo + self.dim;
        (&self.xs[lo..hi], &self.ys[lo..hi], self.targets[i])
    }
}

/// Mean loss and mean gradients over a batch, chunk-parallel but
/// order-deterministic. Gradients are omitted when `grads` is `None`
/// (evaluation mode).
fn batch_pass(
    model: &PairModel,
    batch: &PairBatch,
    mut grads: Option<&mut PairGradients>,
) -> Result<f64, TrainError> {
    let n = batch.len();
    if n == 0 {
        return Ok(0.0);
    }
    let want_grads = grads.is_some();
    let chunk_results: Vec<Result<(f64, Option<PairGradients>), TrainError>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ws = model.workspace();
            let mut local = if want_grads { Some(model.gradients()) } else { None };
            let mut loss_sum = 0.0;
            for &i in chunk {
                let (x, y, target) = batch.pair(i);
                if let Some(g) = local.as_mut() {
                    loss_sum += model.pair_loss_ws(x, y, target, &mut ws, g)?;
                } else {
                    let pred = model.predict_ws(x, y, &mut ws)?;
                    loss_sum += (pred - target) * (pred - target);
                }
            }
            Ok((loss_sum, local))
        })
        .collect();

    let mut total_loss = 0.0;
    for result in chunk_results {
        let (loss, local) = result?;
        total_loss += loss;
        if let (Some(acc), Some(local)) = (grads.as_deref_mut(), local) {
            acc.add(&local);
        }
    }
    Ok(total_loss / n as f64)
}

/// Runs one synthetic experiment end to end. Identical configs produce
/// bit-identical reports.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, TrainError> {
    let started = std::time::Instant::now();
    let mut model = PairModel::init(
        config.model,
        config.ambient_dim,
        config.embed_dim,
        config.seed,
    )?;
    let param_count = model.param_count();

    let mut main_params = model.main_params();
    let mut adam_main = AdamState::new(main_params.len());
    let mut adam_p = AdamState::new(1);

    let mut batch = PairBatch::with_capacity(config.batch.max(1), config.ambient_dim);
    let mut grads = model.gradients();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    if config.train_pairs > 0 && config.batch > 0 {
        for epoch in 0..config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(STREAM_TRAIN);
            let mut remaining = config.train_pairs;
            let mut loss_acc = 0.0;
            let mut batches = 0usize;
            while remaining > 0 {
                let size = remaining.min(config.batch);
                batch.clear();
                for _ in 0..size {
                    batch.push_from(&mut rng, config.metric);
                }
                remaining -= size;

                grads.zero();
                let mean_loss = batch_pass(&model, &batch, Some(&mut grads))?;
                if !mean_loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch });
                }
                loss_acc += mean_loss;
                batches += 1;

                let scale = 1.0 / size as f64;
                let main_grads = grads.main_vector(scale);
                adam_step(&mut adam_main, &mut main_params, &main_grads, config.lr_main)?;
                model.load_main_params(&main_params);
                if let Some(net) = &mut model.net {
                    let d_p = grads.net.as_ref().map_or(0.0, |g| g.d_p * scale);
                    let mut p = [net.p];
                    adam_step(&mut adam_p, &mut p, &[d_p], config.lr_p)?;
                    net.p = p[0];
                }
            }
            epoch_losses.push(loss_acc / batches as f64);
        }
    }

    let eval = |stream: u64, pairs: usize, model: &PairModel| -> Result<f64, TrainError> {
        if pairs == 0 {
            return Ok(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        let mut eval_batch = PairBatch::with_capacity(pairs.min(8192), config.ambient_dim);
        let mut remaining = pairs;
        let mut acc = 0.0;
        while remaining > 0 {
            let size = remaining.min(8192);
            eval_batch.clear();
            for _ in 0..size {
                eval_batch.push_from(&mut rng, config.metric);
            }
            remaining -= size;
            acc += batch_pass(model, &eval_batch, None)? * size as f64;
        }
        Ok(acc / pairs as f64)
    };

    let train_mse = eval(STREAM_TRAIN, config.train_pairs, &model)?;
    let test_mse = eval(STREAM_TEST, config.test_pairs, &model)?;
    if !train_mse.is_finite() || !test_mse.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: config.epochs });
    }

    Ok(ExperimentReport {
        config: config.clone(),
        train_mse,
        test_mse,
        param_count,
        epoch_losses,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut state = AdamState::new(3);
        let mut params = vec![1.0, -2.0, 0.5];
        adam_step(&mut state, &mut params, &[0.0; 3], 0.1).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut state = AdamState::new(2);
        let mut params = vec![0.0, 0.0];
        adam_step(&mut state, &mut params, &[0.3, -1.7], 0.01).unwrap();
        assert_relative_eq!(params[0], -0.01, max_relative = 1e-4);
        assert_relative_eq!(params[1], 0.01, max_relative = 1e-4);
    }

    #[test]
    fn adam_descends_against_a_constant_gradient() {
        let mut state = AdamState::new(1);
        let mut params = vec![5.0];
        for _ in 0..100 {
            adam_step(&mut state, &mut params, &[2.0], 0.01).unwrap();
        }
        assert!(params[0] < 5.0 - 0.9);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut state = AdamState::new(2);
        let mut params = vec![0.0; 3];
        assert!(matches!(
            adam_step(&mut state, &mut params, &[0.0; 3], 0.1),
            Err(TrainError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn coincident_pair_with_zero_target_has_zero_loss_and_gradient() {
        let model = PairModel {
            kind: ModelKind::SnowflakeDirect,
            mlp: None,
            net: Some(NeuralSnowflake::identity_config()),
        };
        let x = vec![0.3, -0.2, 0.9];
        let (loss, grads) = pair_loss(&model, &x, &x, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        let net = grads.net.unwrap();
        assert!(net.weight_grad_vector().iter().all(|&g| g == 0.0));
        assert_eq!(net.d_p, 0.0);
    }

    #[test]
    fn identity_snowflake_with_exact_targets_has_zero_loss() {
        let model = PairModel {
            kind: ModelKind::SnowflakeDirect,
            mlp: None,
            net: Some(NeuralSnowflake::identity_config()),
        };
        let x = vec![0.0, 0.0];
        let y = vec![3.0, 4.0];
        let (loss, _) = pair_loss(&model, &x, &y, 5.0).unwrap();
        assert!(loss.abs() < 1e-24);
    }

    fn finite_difference_pair_check(kind: ModelKind, seed: u64) {
        let ambient = 5;
        let mut model = PairModel::init(kind, ambient, 2, seed).unwrap();
        if let Some(net) = &mut model.net {
            net.p = 0.2;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let x: Vec<f64> = (0..ambient).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..ambient).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target = 0.7;

        let (_, grads) = pair_loss(&model, &x, &y, target).unwrap();
        let analytic = {
            let mut v = grads.main_vector(1.0);
            if let Some(net) = &grads.net {
                v.push(net.d_p);
            }
            v
        };
        let base = model.main_params();
        let n_main = base.len();
        let step = 1e-6;
        let eval = |model: &PairModel| -> f64 {
            let pred = model.predict(&x, &y).unwrap();
            (pred - target) * (pred - target)
        };
        for (i, a) in analytic.iter().enumerate() {
            let (plus, minus) = if i < n_main {
                let mut params = base.clone();
                params[i] = base[i] + step;
                model.load_main_params(&params);
                let plus = eval(&model);
                params[i] = base[i] - step;
                model.load_main_params(&params);
                let minus = eval(&model);
                model.load_main_params(&base);
                (plus, minus)
            } else {
                let p0 = model.net.as_ref().unwrap().p;
                model.net.as_mut().unwrap().p = p0 + step;
                let plus = eval(&model);
                model.net.as_mut().unwrap().p = p0 - step;
                let minus = eval(&model);
                model.net.as_mut().unwrap().p = p0;
                (plus, minus)
            };
            let fd = (plus - minus) / (2.0 * step);
            let denom = a.abs().max(fd.abs()).max(1.0);
            assert!(
                (a - fd).abs() / denom < 1e-5,
                "{kind} seed {seed} param {i}: analytic {a}, fd {fd}"
            );
        }
    }

    #[test]
    fn pair_gradients_match_finite_differences() {
        for seed in 0..3u64 {
            finite_difference_pair_check(ModelKind::MlpOnly, seed);
            finite_difference_pair_check(ModelKind::SnowflakePlusMlp, seed);
            finite_difference_pair_check(ModelKind::SnowflakeDirect, seed);
        }
    }

    fn tiny_config(model: ModelKind) -> ExperimentConfig {
        ExperimentConfig {
            ambient_dim: 8,
            train_pairs: 2000,
            test_pairs: 500,
            batch: 200,
            epochs: 3,
            ..ExperimentConfig::desk_scale(MetricId::M3, model, 7)
        }
    }

    #[test]
    fn untrained_runs_report_the_initial_error() {
        let config = ExperimentConfig {
            train_pairs: 0,
            ..tiny_config(ModelKind::SnowflakeDirect)
        };
        let report = run_experiment(&config).unwrap();
        assert!(report.epoch_losses.is_empty());
        assert!(report.test_mse > 0.0);
    }

    #[test]
    fn training_reduces_the_loss() {
        let report = run_experiment(&tiny_config(ModelKind::SnowflakeDirect)).unwrap();
        assert!(report.epoch_losses.last().unwrap() < report.epoch_losses.first().unwrap());
        let untrained = run_experiment(&ExperimentConfig {
            train_pairs: 0,
            ..tiny_config(ModelKind::SnowflakeDirect)
        })
        .unwrap();
        assert!(report.test_mse < untrained.test_mse);
    }

    #[test]
    fn reports_are_bit_reproducible() {
        let config = tiny_config(ModelKind::SnowflakePlusMlp);
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        assert_eq!(a.train_mse.to_bits(), b.train_mse.to_bits());
        assert_eq!(a.test_mse.to_bits(), b.test_mse.to_bits());
        for (x, y) in a.epoch_losses.iter().zip(&b.epoch_losses) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn published_parameter_totals_per_model_kind() {
        let mlp_only = PairModel::init(ModelKind::MlpOnly, 100, 2, 0).unwrap();
        assert_eq!(mlp_only.param_count(), 5422);
        let combined = PairModel::init(ModelKind::SnowflakePlusMlp, 100, 2, 0).unwrap();
        assert_eq!(combined.param_count(), 4169);
        let direct = PairModel::init(ModelKind::SnowflakeDirect, 100, 2, 0).unwrap();
        assert_eq!(direct.param_count(), 847);
    }

    #[test]
    fn model_kind_strings_round_trip() {
        for kind in ModelKind::ALL {
            assert_eq!(kind.to_string().parse::<ModelKind>().unwrap(), kind);
        }
        assert!("nope".parse::<ModelKind>().is_err());
    }
}
