//! Latent graph inference at desk scale.
//!
//! A point cloud is encoded into a latent space, pairwise edge
//! probabilities `p_ij = exp(-T d(x_i, x_j)^2)` are formed in a chosen
//! similarity space, a sparse graph is drawn with Gumbel top-k sampling,
//! and a small graph-convolution stack classifies the nodes. The
//! classifier trains on cross-entropy; the (non-differentiable) edge
//! sampler trains on the reward-weighted loss
//! `L_GL = sum_i delta_i sum_(i,j) log p_ij`, whose gradient with respect
//! to each sampled `log p_ij` is exactly the reward `delta_i`.

use crate::mlp::{Mlp, MlpError, MlpGradients, MlpWorkspace};
use crate::net::{NetError, NeuralSnowflake, SnowflakeGradients};
use crate::train::{adam_step, AdamState, TrainError};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("k = {k} must be smaller than the node count {n}")]
    BadK { k: usize, n: usize },
    #[error("noise values must lie strictly inside (0, 1)")]
    BadNoise,
    #[error("edge ({0}, {1}) out of range")]
    EdgeOutOfRange(usize, usize),
    #[error("need {0} log-probability layers, got {1}")]
    LayerCountMismatch(usize, usize),
    #[error("need at least 2 classes and 2 nodes per class")]
    DegenerateDataset,
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("loss became non-finite in epoch {0}")]
    NonFiniteLoss(usize),
}

/// Which geometry measures similarity between latent representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySpace {
    Euclidean,
    SnowflakeActivation,
    NeuralSnowflake,
}

impl std::fmt::Display for SimilaritySpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SimilaritySpace::Euclidean => "euclidean",
            SimilaritySpace::SnowflakeActivation => "snowflake_activation",
            SimilaritySpace::NeuralSnowflake => "neural_snowflake",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for SimilaritySpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "euclidean" => Ok(SimilaritySpace::Euclidean),
            "snowflake_activation" | "snowflake" => Ok(SimilaritySpace::SnowflakeActivation),
            "neural_snowflake" => Ok(SimilaritySpace::NeuralSnowflake),
            other => Err(format!("unknown similarity space: {other}")),
        }
    }
}

/// Closed-form snowflake activation with trainable component weights and
/// exponent; the inner exponents are pinned at 1. Weights are stored raw
/// and take effect through their absolute values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnowflakeActParams {
    pub c: [f64; 3],
    pub p: f64,
}

impl Default for SnowflakeActParams {
    fn default() -> Self {
        Self { c: [1.0, 1.0, 1.0], p: 1e-8 }
    }
}

impl SnowflakeActParams {
    fn components(s: f64) -> [f64; 3] {
        [1.0 - (-s).exp(), s, (1.0 + s).ln()]
    }

    pub fn eval(&self, s: f64) -> f64 {
        let comp = Self::components(s);
        let base: f64 = (0..3).map(|k| self.c[k].abs() * comp[k]).sum();
        if base == 0.0 {
            0.0
        } else {
            base.powf(1.0 + self.p.abs())
        }
    }

    /// Gradients of `eval` with respect to raw weights, `p`, and `s`.
    fn grads(&self, s: f64) -> ActGradients {
        let comp = Self::components(s);
        let base: f64 = (0..3).map(|k| self.c[k].abs() * comp[k]).sum();
        let q = 1.0 + self.p.abs();
        if base <= 0.0 {
            return ActGradients::default();
        }
        let value = base.powf(q);
        let d_base = q * base.powf(q - 1.0);
        let comp_deriv = [(-s).exp(), 1.0, 1.0 / (1.0 + s)];
        let mut d_c = [0.0; 3];
        for k in 0..3 {
            d_c[k] = sign(self.c[k]) * d_base * comp[k];
        }
        let d_s = d_base * (0..3).map(|k| self.c[k].abs() * comp_deriv[k]).sum::<f64>();
        let d_p = value * base.ln() * sign(self.p);
        ActGradients { d_c, d_p, d_s }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct ActGradients {
    d_c: [f64; 3],
    d_p: f64,
    d_s: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Edge probabilities `p_ij = exp(-phi)` with
/// `phi = T * dist(x_i, x_j)^2` in the configured similarity space. The
/// temperature is trainable and kept positive through a softplus.
#[derive(Debug, Clone)]
pub struct EdgeProbabilityModel {
    pub space: SimilaritySpace,
    /// Raw temperature parameter; the effective `T` is `softplus(theta)`.
    pub theta: f64,
    pub act: SnowflakeActParams,
    pub net: Option<NeuralSnowflake>,
}

impl EdgeProbabilityModel {
    pub fn new(space: SimilaritySpace, seed: u64) -> Result<Self, LatentError> {
        let net = match space {
            SimilaritySpace::NeuralSnowflake => {
                // latent graph inference keeps the weighted skip mix
                Some(NeuralSnowflake::init(&[1, 8, 1], seed)?)
            }
            _ => None,
        };
        Ok(Self {
            space,
            // softplus(theta) = 1
            theta: (std::f64::consts::E - 1.0).ln(),
            act: SnowflakeActParams::default(),
            net,
        })
    }

    pub fn temperature(&self) -> f64 {
        softplus(self.theta)
    }

    /// Distance between two latent points in the configured space.
    pub fn space_distance(&self, gap: f64) -> f64 {
        match self.space {
            SimilaritySpace::Euclidean => gap,
            SimilaritySpace::SnowflakeActivation => self.act.eval(gap),
            SimilaritySpace::NeuralSnowflake => self
                .net
                .as_ref()
                .expect("neural snowflake space carries a network")
                .forward(gap)
                .expect("non-negative gap"),
        }
    }
}

/// Matrix of `log p_ij = -T dist(x_i, x_j)^2` over all ordered pairs;
/// the diagonal is negative infinity so a node never samples itself.
pub fn edge_log_probs(model: &EdgeProbabilityModel, embeddings: &[Vec<f64>]) -> DMatrix<f64> {
    let n = embeddings.len();
    let t = model.temperature();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = f64::NEG_INFINITY;
        for j in (i + 1)..n {
            let gap = euclidean(&embeddings[i], &embeddings[j]);
            let d = model.space_distance(gap);
            let logp = -t * d * d;
            out[(i, j)] = logp;
            out[(j, i)] = logp;
        }
    }
    out
}

/// Indices of the `k` largest keys `log p_j - ln(-ln(q_j))`.
///
/// With every `q_j = exp(-1)` the perturbation vanishes and the result is
/// the plain top-k of the row. Ties break toward the smaller index.
pub fn gumbel_top_k(
    log_probs_row: &[f64],
    k: usize,
    noise: &[f64],
) -> Result<Vec<usize>, LatentError> {
    let n = log_probs_row.len();
    if k >= n {
        return Err(LatentError::BadK { k, n });
    }
    if noise.len() != n || noise.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
        return Err(LatentError::BadNoise);
    }
    let mut keyed: Vec<(f64, usize)> = (0..n)
        .map(|j| (log_probs_row[j] - (-noise[j].ln()).ln(), j))
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().take(k).map(|(_, j)| j).collect())
}

/// Exponential moving estimate of per-sample accuracy, decayed with
/// `beta = 0.9` from the neutral prior 0.5.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningAccuracy {
    values: Vec<f64>,
}

const ACCURACY_DECAY: f64 = 0.9;
const ACCURACY_UPDATE: f64 = 0.1;

impl RunningAccuracy {
    pub fn new(n: usize) -> Self {
        Self { values: vec![0.5; n] }
    }

    pub fn expected(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn update(&mut self, i: usize, correct: bool) {
        self.values[i] = update_running_accuracy(self.values[i], if correct { 1.0 } else { 0.0 });
    }
}

/// One decay step of the expected accuracy: `0.9 E + 0.1 ac`.
pub fn update_running_accuracy(expected: f64, ac: f64) -> f64 {
    debug_assert!(ac == 0.0 || ac == 1.0);
    ACCURACY_DECAY * expected + ACCURACY_UPDATE * ac
}

/// Reward of a prediction: expected accuracy minus achieved accuracy.
/// Negative when the prediction beats its running estimate.
pub fn reward(y_true: usize, y_pred: usize, expected_acc: f64) -> f64 {
    let ac = if y_true == y_pred { 1.0 } else { 0.0 };
    expected_acc - ac
}

/// The reward-weighted graph-learning loss and its gradient with respect
/// to every log-probability entry: `delta_i` on sampled edges, 0
/// elsewhere.
pub fn graph_learning_loss(
    rewards: &[f64],
    sampled_edges: &[Vec<(usize, usize)>],
    log_probs: &[DMatrix<f64>],
) -> Result<(f64, Vec<DMatrix<f64>>), LatentError> {
    if sampled_edges.len() != log_probs.len() {
        return Err(LatentError::LayerCountMismatch(sampled_edges.len(), log_probs.len()));
    }
    let n = rewards.len();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(log_probs.len());
    for (edges, logp) in sampled_edges.iter().zip(log_probs) {
        let mut grad = DMatrix::zeros(logp.nrows(), logp.ncols());
        for &(i, j) in edges {
            if i >= n || j >= logp.ncols() {
                return Err(LatentError::EdgeOutOfRange(i, j));
            }
            loss += rewards[i] * logp[(i, j)];
            grad[(i, j)] += rewards[i];
        }
        grads.push(grad);
    }
    Ok((loss, grads))
}

/// One graph-convolution layer: degree-normalized mean over the node and
/// its sampled neighbours, a linear map, and an ELU.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weight: DMatrix<f64>,
}

/// Forward cache of one GCN layer application.
pub struct GcnCache {
    /// Aggregated inputs, one row per node.
    means: DMatrix<f64>,
    /// Pre-activations, one row per node.
    pre: DMatrix<f64>,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn elu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

impl GcnLayer {
    pub fn init(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / input_dim as f64).sqrt();
        Self {
            weight: DMatrix::from_fn(output_dim, input_dim, |_, _| {
                rng.gen_range(-bound..bound)
            }),
        }
    }

    /// `out_i = ELU(W . mean_{j in N(i) + {i}} h_j)`, rows are nodes.
    pub fn forward(
        &self,
        features: &DMatrix<f64>,
        neighbors: &[Vec<usize>],
    ) -> (DMatrix<f64>, GcnCache) {
        let n = features.nrows();
        let d = features.ncols();
        let mut means = DMatrix::zeros(n, d);
        for i in 0..n {
            let degree = (neighbors[i].len() + 1) as f64;
            for c in 0..d {
                let mut acc = features[(i, c)];
                for &j in &neighbors[i] {
                    acc += features[(j, c)];
                }
                means[(i, c)] = acc / degree;
            }
        }
        let pre = &means * self.weight.transpose();
        let out = pre.map(elu);
        (out, GcnCache { means, pre })
    }

    /// Reverse pass; returns the gradient for the layer weight and the
    /// input features.
    pub fn backward(
        &self,
        cache: &GcnCache,
        neighbors: &[Vec<usize>],
        d_out: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = cache.means.nrows();
        let d_pre = DMatrix::from_fn(d_out.nrows(), d_out.ncols(), |i, c| {
            d_out[(i, c)] * elu_deriv(cache.pre[(i, c)])
        });
        let d_weight = d_pre.transpose() * &cache.means;
        let d_means = &d_pre * &self.weight;
        let mut d_features = DMatrix::zeros(n, cache.means.ncols());
        for i in 0..n {
            let degree = (neighbors[i].len() + 1) as f64;
            for c in 0..d_features.ncols() {
                let share = d_means[(i, c)] / degree;
                d_features[(i, c)] += share;
                for &j in &neighbors[i] {
                    d_features[(j, c)] += share;
                }
            }
        }
        (d_weight, d_features)
    }
}

/// Configuration of the synthetic node-classification harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGraphConfig {
    #[serde(alias = "similarity_space")]
    pub similarity: SimilaritySpace,
    pub nodes: usize,
    pub classes: usize,
    pub ambient_dim: usize,
    pub latent_dim: usize,
    /// Edges sampled per node.
    pub k: usize,
    pub encoder_hidden: usize,
    pub gcn_hidden: usize,
    pub epochs: usize,
    pub splits: usize,
    pub train_fraction: f64,
    pub lr_main: f64,
    pub lr_p: f64,
    /// Standard deviation of the class centers.
    pub center_scale: f64,
    /// Standard deviation of the per-point noise around its center.
    pub noise_scale: f64,
    /// Route the graph-learning loss into the shared encoder as well as
    /// the edge model. Off by default; the two losses stay separated.
    pub l_gl_into_encoder: bool,
    pub seed: u64,
    /// Explicit per-split seeds; when set, one split runs per entry and
    /// `splits` is ignored. The dataset itself still derives from `seed`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

impl LatentGraphConfig {
    pub fn desk_scale(similarity: SimilaritySpace, seed: u64) -> Self {
        Self {
            similarity,
            nodes: 400,
            classes: 4,
            ambient_dim: 16,
            latent_dim: 4,
            k: 7,
            encoder_hidden: 32,
            gcn_hidden: 16,
            epochs: 60,
            splits: 10,
            train_fraction: 0.5,
            lr_main: 1e-2,
            lr_p: 1e-4,
            center_scale: 3.0,
            noise_scale: 1.0,
            l_gl_into_encoder: false,
            seed,
            seeds: None,
        }
    }
}

/// Accuracy over the configured splits, plus the functional form of the
/// similarity exponent so reports are self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentGraphReport {
    pub config: LatentGraphConfig,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub per_split_accuracy: Vec<f64>,
    /// The chosen form of `phi` in `p_ij = exp(-phi)`.
    pub phi: String,
    #[serde(skip)]
    pub epoch_losses_per_split: Vec<Vec<f64>>,
}

pub const PHI_FORM: &str = "temperature * space_distance^2";

struct LatentModel {
    encoder: Mlp,
    edge: EdgeProbabilityModel,
    gcn: Vec<GcnLayer>,
    head_weight: DMatrix<f64>,
    head_bias: Vec<f64>,
}

impl LatentModel {
    fn init(cfg: &LatentGraphConfig, seed: u64) -> Result<Self, LatentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::init(
            &[cfg.ambient_dim, cfg.encoder_hidden, cfg.latent_dim],
            rng.gen(),
        )?;
        let edge = EdgeProbabilityModel::new(cfg.similarity, rng.gen())?;
        let gcn = vec![
            GcnLayer::init(cfg.latent_dim, cfg.gcn_hidden, rng.gen()),
            GcnLayer::init(cfg.gcn_hidden, cfg.gcn_hidden, rng.gen()),
            GcnLayer::init(cfg.gcn_hidden, cfg.gcn_hidden, rng.gen()),
        ];
        // the head reads the diffused features next to the raw latents,
        // so classification survives even a fully mixing graph
        let head_in = cfg.gcn_hidden + cfg.latent_dim;
        let bound = (6.0 / head_in as f64).sqrt();
        let head_weight =
            DMatrix::from_fn(cfg.classes, head_in, |_, _| rng.gen_range(-bound..bound));
        let head_bias = vec![0.0; cfg.classes];
        Ok(Self { encoder, edge, gcn, head_weight, head_bias })
    }

    /// Main parameter group: everything except the snowflake exponent.
    fn main_params(&self) -> Vec<f64> {
        let mut out = self.encoder.param_vector();
        for layer in &self.gcn {
            push_matrix(&mut out, &layer.weight);
        }
        push_matrix(&mut out, &self.head_weight);
        out.extend_from_slice(&self.head_bias);
        out.push(self.edge.theta);
        match self.edge.space {
            SimilaritySpace::Euclidean => {}
            SimilaritySpace::SnowflakeActivation => out.extend_from_slice(&self.edge.act.c),
            SimilaritySpace::NeuralSnowflake => {
                let net = self.edge.net.as_ref().unwrap();
                out.extend(net.weight_params());
                out.push(net.skip_weight);
            }
        }
        out
    }

    fn load_main_params(&mut self, params: &[f64]) {
        let mut pos = self.encoder.param_vector().len();
        self.encoder.load_param_vector(&params[..pos]);
        for layer in &mut self.gcn {
            pos += read_matrix(&params[pos..], &mut layer.weight);
        }
        pos += read_matrix(&params[pos..], &mut self.head_weight);
        for b in &mut self.head_bias {
            *b = params[pos];
            pos += 1;
        }
        self.edge.theta = params[pos];
        pos += 1;
        match self.edge.space {
            SimilaritySpace::Euclidean => {}
            SimilaritySpace::SnowflakeActivation => {
                self.edge.act.c.copy_from_slice(&params[pos..pos + 3]);
                pos += 3;
            }
            SimilaritySpace::NeuralSnowflake => {
                let net = self.edge.net.as_mut().unwrap();
                let n_w = net.weight_params().len();
                net.load_weight_params(&params[pos..pos + n_w]);
                pos += n_w;
                net.skip_weight = params[pos].clamp(0.0, 1.0);
                pos += 1;
            }
        }
        debug_assert_eq!(pos, params.len());
    }

    fn p(&self) -> f64 {
        match self.edge.space {
            SimilaritySpace::Euclidean => 0.0,
            SimilaritySpace::SnowflakeActivation => self.edge.act.p,
            SimilaritySpace::NeuralSnowflake => self.edge.net.as_ref().unwrap().p,
        }
    }

    fn set_p(&mut self, p: f64) {
        match self.edge.space {
            SimilaritySpace::Euclidean => {}
            SimilaritySpace::SnowflakeActivation => self.edge.act.p = p,
            SimilaritySpace::NeuralSnowflake => self.edge.net.as_mut().unwrap().p = p,
        }
    }
}

fn push_matrix(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
}

fn read_matrix(params: &[f64], m: &mut DMatrix<f64>) -> usize {
    let mut pos = 0;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            m[(r, c)] = params[pos];
            pos += 1;
        }
    }
    pos
}

fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Gaussian class blobs: centers at scale `center_scale`, points spread
/// `noise_scale` around them. Labels cycle through the classes.
pub fn sample_blobs(
    n: usize,
    classes: usize,
    dim: usize,
    center_scale: f64,
    noise_scale: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| center_scale * {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    })
                .collect()
        })
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let point: Vec<f64> = centers[class]
            .iter()
            .map(|&c| c + noise_scale * {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                })
            .collect();
        points.push(point);
        labels.push(class);
    }
    (points, labels)
}

fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for i in 0..out.nrows() {
        let mut max = f64::NEG_INFINITY;
        for c in 0..out.ncols() {
            max = max.max(out[(i, c)]);
        }
        let mut sum = 0.0;
        for c in 0..out.ncols() {
            let e = (out[(i, c)] - max).exp();
            out[(i, c)] = e;
            sum += e;
        }
        for c in 0..out.ncols() {
            out[(i, c)] /= sum;
        }
    }
    out
}

struct ForwardState {
    latents: Vec<Vec<f64>>,
    encoder_ws: Vec<MlpWorkspace>,
    log_probs: DMatrix<f64>,
    neighbors: Vec<Vec<usize>>,
    gcn_caches: Vec<GcnCache>,
    head_input: DMatrix<f64>,
    logits: DMatrix<f64>,
}

fn forward_pass(
    model: &LatentModel,
    points: &[Vec<f64>],
    cfg: &LatentGraphConfig,
    noise: Option<&mut ChaCha8Rng>,
) -> Result<ForwardState, LatentError> {
    let n = points.len();
    let mut latents = Vec::with_capacity(n);
    let mut encoder_ws = Vec::with_capacity(n);
    for point in points {
        let mut ws = model.encoder.workspace();
        model.encoder.forward_ws(point, &mut ws)?;
        latents.push(ws.output().as_slice().to_vec());
        encoder_ws.push(ws);
    }

    let log_probs = edge_log_probs(&model.edge, &latents);
    let mut neighbors = Vec::with_capacity(n);
    match noise {
        Some(rng) => {
            let mut row_noise = vec![0.0f64; n];
            for i in 0..n {
                for q in row_noise.iter_mut() {
                    // (0, 1) strictly; a zero draw retries
                    *q = loop {
                        let u: f64 = rng.gen();
                        if u > 0.0 {
                            break u;
                        }
                    };
                }
                neighbors.push(gumbel_top_k(log_probs.row(i).transpose().as_slice(), cfg.k, &row_noise)?);
            }
        }
        None => {
            // deterministic evaluation: q = exp(-1) zeroes the perturbation
            let row_noise = vec![(-1.0f64).exp(); n];
            for i in 0..n {
                neighbors.push(gumbel_top_k(log_probs.row(i).transpose().as_slice(), cfg.k, &row_noise)?);
            }
        }
    }

    let mut features = DMatrix::from_fn(n, cfg.latent_dim, |i, c| latents[i][c]);
    let latent_features = features.clone();
    let mut gcn_caches = Vec::with_capacity(model.gcn.len());
    for layer in &model.gcn {
        let (out, cache) = layer.forward(&features, &neighbors);
        gcn_caches.push(cache);
        features = out;
    }

    let mut head_input = DMatrix::zeros(n, cfg.gcn_hidden + cfg.latent_dim);
    for i in 0..n {
        for c in 0..cfg.gcn_hidden {
            head_input[(i, c)] = features[(i, c)];
        }
        for c in 0..cfg.latent_dim {
            head_input[(i, cfg.gcn_hidden + c)] = latent_features[(i, c)];
        }
    }
    let mut logits = &head_input * model.head_weight.transpose();
    for i in 0..n {
        for c in 0..logits.ncols() {
            logits[(i, c)] += model.head_bias[c];
        }
    }

    Ok(ForwardState {
        latents,
        encoder_ws,
        log_probs,
        neighbors,
        gcn_caches,
        head_input,
        logits,
    })
}

/// Runs the node-classification harness over the configured splits and
/// reports mean and standard deviation of the test accuracy.
pub fn run_latent_graph_experiment(
    cfg: &LatentGraphConfig,
) -> Result<LatentGraphReport, LatentError> {
    if cfg.classes < 2 || cfg.nodes < 2 * cfg.classes {
        return Err(LatentError::DegenerateDataset);
    }
    if cfg.k >= cfg.nodes {
        return Err(LatentError::BadK { k: cfg.k, n: cfg.nodes });
    }

    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(999);
    let (points, labels) = sample_blobs(
        cfg.nodes,
        cfg.classes,
        cfg.ambient_dim,
        cfg.center_scale,
        cfg.noise_scale,
        data_rng.gen(),
    );
    let n = cfg.nodes;

    // (seed, stream) per split: derived from the run seed, or taken
    // from the explicit seed list when one is configured
    let split_streams: Vec<(u64, u64)> = match &cfg.seeds {
        Some(list) => list.iter().map(|&s| (s, 1000)).collect(),
        None => (0..cfg.splits).map(|s| (cfg.seed, 1000 + s as u64)).collect(),
    };
    if split_streams.is_empty() {
        return Err(LatentError::DegenerateDataset);
    }
    let mut per_split_accuracy = Vec::with_capacity(split_streams.len());
    let mut epoch_losses_per_split = Vec::with_capacity(split_streams.len());

    for &(split_seed, stream) in &split_streams {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
        rng.set_stream(stream);

        // random train/test split
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
        let train_nodes = &order[..n_train];
        let test_nodes = &order[n_train..];

        let mut model = LatentModel::init(cfg, rng.gen())?;
        let mut main_params = model.main_params();
        let mut adam_main = AdamState::new(main_params.len());
        let mut adam_p = AdamState::new(1);
        let mut running = RunningAccuracy::new(n);
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            let state = forward_pass(&model, &points, cfg, Some(&mut rng))?;
            let probs = softmax_rows(&state.logits);

            // cross-entropy over the training nodes
            let mut ce = 0.0;
            for &i in train_nodes {
                ce -= probs[(i, labels[i])].max(1e-300).ln();
            }
            ce /= n_train as f64;
            if !ce.is_finite() {
                return Err(LatentError::NonFiniteLoss(epoch));
            }
            epoch_losses.push(ce);

            // rewards against the running accuracy, then tracker update
            let mut rewards = vec![0.0f64; n];
            for &i in train_nodes {
                let predicted = argmax_row(&state.logits, i);
                rewards[i] = reward(labels[i], predicted, running.expected(i));
                running.update(i, predicted == labels[i]);
            }
            let edges: Vec<(usize, usize)> = state
                .neighbors
                .iter()
                .enumerate()
                .flat_map(|(i, js)| js.iter().map(move |&j| (i, j)))
                .collect();
            let (l_gl, logp_grads) =
                graph_learning_loss(&rewards, &[edges], std::slice::from_ref(&state.log_probs))?;
            if !l_gl.is_finite() {
                return Err(LatentError::NonFiniteLoss(epoch));
            }

            let grads = backward_pass(&model, cfg, &state, train_nodes, labels.len(), &labels, &probs, &logp_grads[0])?;

            let mut main_grads = grads.main;
            if main_grads.len() != main_params.len() {
                return Err(LatentError::Train(TrainError::ShapeMismatch(
                    main_grads.len(),
                    main_params.len(),
                )));
            }
            clip(&mut main_grads, 10.0);
            adam_step(&mut adam_main, &mut main_params, &main_grads, cfg.lr_main)?;
            model.load_main_params(&main_params);
            if cfg.similarity != SimilaritySpace::Euclidean {
                let mut p = [model.p()];
                adam_step(&mut adam_p, &mut p, &[grads.d_p], cfg.lr_p)?;
                model.set_p(p[0]);
            }
        }

        // deterministic evaluation with the perturbation zeroed
        let state = forward_pass(&model, &points, cfg, None)?;
        let correct = test_nodes
            .iter()
            .filter(|&&i| argmax_row(&state.logits, i) == labels[i])
            .count();
        per_split_accuracy.push(correct as f64 / test_nodes.len() as f64);
        epoch_losses_per_split.push(epoch_losses);
    }

    let mean = per_split_accuracy.iter().sum::<f64>() / per_split_accuracy.len() as f64;
    let var = per_split_accuracy
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / per_split_accuracy.len() as f64;

    Ok(LatentGraphReport {
        config: cfg.clone(),
        accuracy_mean: mean,
        accuracy_std: var.sqrt(),
        per_split_accuracy,
        phi: PHI_FORM.to_string(),
        epoch_losses_per_split,
    })
}

fn argmax_row(m: &DMatrix<f64>, i: usize) -> usize {
    let mut best = 0;
    for c in 1..m.ncols() {
        if m[(i, c)] > m[(i, best)] {
            best = c;
        }
    }
    best
}

fn clip(grads: &mut [f64], max_abs: f64) {
    for g in grads {
        *g = g.clamp(-max_abs, max_abs);
    }
}

struct LatentGradients {
    main: Vec<f64>,
    d_p: f64,
}

/// Backpropagation of cross-entropy through head, GCN stack, and encoder,
/// plus the graph-learning gradient into the edge model (and optionally
/// the encoder).
#[allow(clippy::too_many_arguments)]
fn backward_pass(
    model: &LatentModel,
    cfg: &LatentGraphConfig,
    state: &ForwardState,
    train_nodes: &[usize],
    n: usize,
    labels: &[usize],
    probs: &DMatrix<f64>,
    logp_grad: &DMatrix<f64>,
) -> Result<LatentGradients, LatentError> {
    let n_train = train_nodes.len() as f64;
    let classes = cfg.classes;

    // d CE / d logits
    let mut d_logits = DMatrix::zeros(n, classes);
    for &i in train_nodes {
        for c in 0..classes {
            let one = if c == labels[i] { 1.0 } else { 0.0 };
            d_logits[(i, c)] = (probs[(i, c)] - one) / n_train;
        }
    }

    // head
    let d_head_weight = d_logits.transpose() * &state.head_input;
    let mut d_head_bias = vec![0.0f64; classes];
    for i in 0..n {
        for c in 0..classes {
            d_head_bias[c] += d_logits[(i, c)];
        }
    }
    let d_head_input = &d_logits * &model.head_weight;

    // split the head input cotangent back into GCN output and latents
    let mut d_gcn_out = DMatrix::zeros(n, cfg.gcn_hidden);
    let mut d_latents = DMatrix::zeros(n, cfg.latent_dim);
    for i in 0..n {
        for c in 0..cfg.gcn_hidden {
            d_gcn_out[(i, c)] = d_head_input[(i, c)];
        }
        for c in 0..cfg.latent_dim {
            d_latents[(i, c)] = d_head_input[(i, cfg.gcn_hidden + c)];
        }
    }

    // GCN stack in reverse
    let mut d_gcn_weights = Vec::with_capacity(model.gcn.len());
    let mut d_features = d_gcn_out;
    for (layer, cache) in model.gcn.iter().zip(&state.gcn_caches).rev() {
        let (d_w, d_in) = layer.backward(cache, &state.neighbors, &d_features);
        d_gcn_weights.push(d_w);
        d_features = d_in;
    }
    d_gcn_weights.reverse();
    d_latents += d_features;

    // graph-learning gradient into the edge model
    let mut d_theta = 0.0;
    let mut d_act_c = [0.0f64; 3];
    let mut d_p = 0.0;
    let mut d_net = model.edge.net.as_ref().map(SnowflakeGradients::zeros_like);
    let mut net_ws = model.edge.net.as_ref().map(|net| net.workspace());
    let temperature = model.edge.temperature();
    let d_temp_d_theta = sigmoid(model.edge.theta);
    for i in 0..n {
        for j in 0..n {
            let coeff = logp_grad[(i, j)];
            if coeff == 0.0 {
                continue;
            }
            let gap = euclidean(&state.latents[i], &state.latents[j]);
            let dist = model.edge.space_distance(gap);
            // log p = -T dist^2
            d_theta += coeff * (-dist * dist) * d_temp_d_theta;
            let d_dist = coeff * (-temperature) * 2.0 * dist;
            match model.edge.space {
                SimilaritySpace::Euclidean => {
                    if cfg.l_gl_into_encoder && gap > 0.0 {
                        let scale = d_dist / gap;
                        accumulate_latent_gap(&mut d_latents, &state.latents, i, j, scale);
                    }
                }
                SimilaritySpace::SnowflakeActivation => {
                    let g = model.edge.act.grads(gap);
                    for k in 0..3 {
                        d_act_c[k] += d_dist * g.d_c[k];
                    }
                    d_p += d_dist * g.d_p;
                    if cfg.l_gl_into_encoder && gap > 0.0 {
                        let scale = d_dist * g.d_s / gap;
                        accumulate_latent_gap(&mut d_latents, &state.latents, i, j, scale);
                    }
                }
                SimilaritySpace::NeuralSnowflake => {
                    let net = model.edge.net.as_ref().unwrap();
                    let grads = d_net.as_mut().unwrap();
                    let ws = net_ws.as_mut().unwrap();
                    net.forward_ws(gap, ws)?;
                    let before = grads.d_input;
                    net.backward_ws(gap, d_dist, ws, grads);
                    if cfg.l_gl_into_encoder && gap > 0.0 {
                        let d_gap = grads.d_input - before;
                        let scale = d_gap / gap;
                        accumulate_latent_gap(&mut d_latents, &state.latents, i, j, scale);
                        grads.d_input = before;
                    }
                }
            }
        }
    }
    if let Some(grads) = d_net.as_ref() {
        d_p += grads.d_p;
    }

    // encoder
    let mut d_encoder = MlpGradients::zeros_like(&model.encoder);
    let mut encoder_ws = state.encoder_ws.clone();
    for i in 0..n {
        let upstream: Vec<f64> = (0..cfg.latent_dim).map(|c| d_latents[(i, c)]).collect();
        if upstream.iter().all(|&u| u == 0.0) {
            continue;
        }
        model
            .encoder
            .backward_ws(&mut encoder_ws[i], &upstream, &mut d_encoder);
    }

    // assemble the main gradient vector in main_params order
    let mut main = d_encoder.to_param_vector();
    for d_w in &d_gcn_weights {
        push_matrix(&mut main, d_w);
    }
    push_matrix(&mut main, &d_head_weight);
    main.extend_from_slice(&d_head_bias);
    main.push(d_theta);
    match model.edge.space {
        SimilaritySpace::Euclidean => {}
        SimilaritySpace::SnowflakeActivation => main.extend_from_slice(&d_act_c),
        SimilaritySpace::NeuralSnowflake => {
            let grads = d_net.as_ref().unwrap();
            main.extend(grads.weight_grad_vector());
            main.push(grads.d_skip);
        }
    }

    Ok(LatentGradients { main, d_p })
}

fn accumulate_latent_gap(
    d_latents: &mut DMatrix<f64>,
    latents: &[Vec<f64>],
    i: usize,
    j: usize,
    scale: f64,
) {
    for c in 0..d_latents.ncols() {
        let diff = latents[i][c] - latents[j][c];
        d_latents[(i, c)] += scale * diff;
        d_latents[(j, c)] -= scale * diff;
    }
}
