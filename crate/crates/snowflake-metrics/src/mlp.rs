//! Plain ReLU multi-layer perceptron with hand-written reverse-mode
//! gradients and parameter accounting.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MlpError {
    #[error("input has dimension {got}, expected {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("layer {0} output dimension {1} does not match layer {2} input dimension {3}")]
    ShapeChain(usize, usize, usize, usize),
    #[error("network must have at least one affine layer")]
    Empty,
    #[error("checkpoint is malformed: {0}")]
    BadCheckpoint(String),
}

/// One affine layer `z = W h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// A ReLU MLP: affine layers with the rectifier applied between
/// consecutive layers (never after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<AffineLayer>,
    pub seed: Option<u64>,
}

/// Gradients of a scalar function of the network output with respect to
/// every weight, bias, and the input.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub input: DVector<f64>,
}

/// Scratch buffers reused across forward/backward calls.
#[derive(Debug, Clone)]
pub struct MlpWorkspace {
    /// Layer inputs: `inputs[l]` feeds layer `l`; one extra slot holds the output.
    inputs: Vec<DVector<f64>>,
    /// Pre-activations per layer.
    zs: Vec<DVector<f64>>,
    d_z: Vec<DVector<f64>>,
}

/// Nonzero-parameter count, width, and depth of a network.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ParamCount {
    pub nonzero_params: usize,
    pub width: usize,
    pub depth: usize,
    /// Whether `nonzero_params <= width^2 * depth` holds.
    pub bound_satisfied: bool,
}

impl MlpWorkspace {
    /// Output of the most recent forward pass.
    pub fn output(&self) -> &DVector<f64> {
        self.inputs.last().unwrap()
    }
}

impl Mlp {
    pub fn new(layers: Vec<AffineLayer>) -> Result<Self, MlpError> {
        if layers.is_empty() {
            return Err(MlpError::Empty);
        }
        for i in 1..layers.len() {
            let prev_out = layers[i - 1].weight.nrows();
            let this_in = layers[i].weight.ncols();
            if prev_out != this_in {
                return Err(MlpError::ShapeChain(i - 1, prev_out, i, this_in));
            }
        }
        for layer in &layers {
            if layer.bias.len() != layer.weight.nrows() {
                return Err(MlpError::BadCheckpoint("bias length != weight rows".into()));
            }
        }
        Ok(Self { layers, seed: None })
    }

    /// Kaiming-style uniform initialization scaled by fan-in, deterministic
    /// per seed. `sizes` lists every layer dimension from input to output.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self, MlpError> {
        if sizes.len() < 2 {
            return Err(MlpError::Empty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let w_bound = (6.0 / fan_in as f64).sqrt();
            let b_bound = 1.0 / (fan_in as f64).sqrt();
            let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| {
                rng.gen_range(-w_bound..w_bound)
            });
            let bias = DVector::from_fn(fan_out, |_, _| rng.gen_range(-b_bound..b_bound));
            layers.push(AffineLayer { weight, bias });
        }
        let mut mlp = Self::new(layers)?;
        mlp.seed = Some(seed);
        Ok(mlp)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn workspace(&self) -> MlpWorkspace {
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        inputs.push(DVector::zeros(self.input_dim()));
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut d_z = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            zs.push(DVector::zeros(layer.weight.nrows()));
            d_z.push(DVector::zeros(layer.weight.nrows()));
            inputs.push(DVector::zeros(layer.weight.nrows()));
        }
        MlpWorkspace { inputs, zs, d_z }
    }

    /// Forward pass into a reusable workspace; the result lives in the
    /// workspace's last slot and is also returned as a slice.
    pub fn forward_ws<'w>(
        &self,
        x: &[f64],
        ws: &'w mut MlpWorkspace,
    ) -> Result<&'w DVector<f64>, MlpError> {
        if x.len() != self.input_dim() {
            return Err(MlpError::InputDimension { expected: self.input_dim(), got: x.len() });
        }
        ws.inputs[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.inputs.split_at_mut(l + 1);
            let h = &before[l];
            let z = &mut ws.zs[l];
            z.copy_from(&layer.bias);
            z.gemv(1.0, &layer.weight, h, 1.0);
            let out = &mut after[0];
            if l < last {
                for (o, &v) in out.iter_mut().zip(z.iter()) {
                    *o = if v > 0.0 { v } else { 0.0 };
                }
            } else {
                out.copy_from(z);
            }
        }
        Ok(&ws.inputs[self.layers.len()])
    }

    /// Allocating convenience wrapper around [`Mlp::forward_ws`].
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        let mut ws = self.workspace();
        Ok(self.forward_ws(x, &mut ws)?.as_slice().to_vec())
    }

    /// Reverse pass over the workspace of the most recent forward call,
    /// accumulating into `grads` (callers zero them per batch). Returns
    /// nothing; the input cotangent lands in `grads.input` (added).
    pub fn backward_ws(
        &self,
        ws: &mut MlpWorkspace,
        upstream: &[f64],
        grads: &mut MlpGradients,
    ) {
        let last = self.layers.len() - 1;
        ws.d_z[last].copy_from_slice(upstream);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let (dz_before, dz_after) = ws.d_z.split_at_mut(l);
            let d_z = &dz_after[0];
            grads.weights[l].ger(1.0, d_z, &ws.inputs[l], 1.0);
            grads.biases[l] += d_z;
            if l > 0 {
                let d_h = &mut dz_before[l - 1];
                d_h.gemv_tr(1.0, &layer.weight, d_z, 0.0);
                // ReLU subgradient: zero at and below the kink
                for (g, &z) in d_h.iter_mut().zip(ws.zs[l - 1].iter()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            } else {
                let mut d_x = DVector::zeros(self.input_dim());
                d_x.gemv_tr(1.0, &layer.weight, d_z, 0.0);
                grads.input += d_x;
            }
        }
    }

    /// One-shot gradients of `upstream . f(x)` with respect to all
    /// parameters and the input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<MlpGradients, MlpError> {
        let mut ws = self.workspace();
        self.forward_ws(x, &mut ws)?;
        let mut grads = MlpGradients::zeros_like(self);
        self.backward_ws(&mut ws, upstream, &mut grads);
        Ok(grads)
    }

    /// Counts nonzero parameters and checks the width/depth bound.
    pub fn param_count(&self) -> ParamCount {
        let nonzero: usize = self
            .layers
            .iter()
            .map(|l| {
                l.weight.iter().filter(|&&w| w != 0.0).count()
                    + l.bias.iter().filter(|&&b| b != 0.0).count()
            })
            .sum();
        let width = self
            .layers
            .iter()
            .map(|l| l.weight.nrows())
            .chain(std::iter::once(self.input_dim()))
            .max()
            .unwrap();
        let depth = self.layers.len();
        ParamCount {
            nonzero_params: nonzero,
            width,
            depth,
            bound_satisfied: nonzero <= width * width * depth,
        }
    }

    /// Flattened parameters: per layer, weight entries row-major then bias.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for r in 0..layer.weight.nrows() {
                for c in 0..layer.weight.ncols() {
                    out.push(layer.weight[(r, c)]);
                }
            }
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn load_param_vector(&mut self, params: &[f64]) {
        let mut it = params.iter();
        for layer in &mut self.layers {
            for r in 0..layer.weight.nrows() {
                for c in 0..layer.weight.ncols() {
                    layer.weight[(r, c)] = *it.next().expect("parameter vector too short");
                }
            }
            for b in layer.bias.iter_mut() {
                *b = *it.next().expect("parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "parameter vector too long");
    }

    pub fn to_checkpoint_json(&self) -> String {
        serde_json::to_string(&MlpCheckpoint::from(self)).unwrap()
    }

    pub fn from_checkpoint_json(json: &str) -> Result<Self, MlpError> {
        let ck: MlpCheckpoint =
            serde_json::from_str(json).map_err(|e| MlpError::BadCheckpoint(e.to_string()))?;
        ck.into_mlp()
    }
}

impl MlpGradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
            biases: mlp
                .layers
                .iter()
                .map(|l| DVector::zeros(l.bias.len()))
                .collect(),
            input: DVector::zeros(mlp.input_dim()),
        }
    }

    pub fn zero(&mut self) {
        for w in &mut self.weights {
            w.fill(0.0);
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
        self.input.fill(0.0);
    }

    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += scale * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.axpy(scale, b, 1.0);
        }
        self.input.axpy(scale, &other.input, 1.0);
    }

    /// Same layout as [`Mlp::param_vector`].
    pub fn to_param_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.push(w[(r, c)]);
                }
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn append_param_vector(&self, out: &mut Vec<f64>) {
        out.extend(self.to_param_vector());
    }
}

#[derive(Serialize, Deserialize)]
struct MlpCheckpoint {
    sizes: Vec<usize>,
    /// Per layer: weight entries row-major, then bias entries.
    layers: Vec<Vec<f64>>,
    seed: Option<u64>,
}

impl From<&Mlp> for MlpCheckpoint {
    fn from(mlp: &Mlp) -> Self {
        let mut sizes = vec![mlp.input_dim()];
        sizes.extend(mlp.layers.iter().map(|l| l.weight.nrows()));
        let layers = mlp
            .layers
            .iter()
            .map(|l| {
                let mut data = Vec::with_capacity(l.weight.len() + l.bias.len());
                for r in 0..l.weight.nrows() {
                    for c in 0..l.weight.ncols() {
                        data.push(l.weight[(r, c)]);
                    }
                }
                data.extend(l.bias.iter());
                data
            })
            .collect();
        Self { sizes, layers, seed: mlp.seed }
    }
}

impl MlpCheckpoint {
    fn into_mlp(self) -> Result<Mlp, MlpError> {
        if self.sizes.len() < 2 || self.layers.len() != self.sizes.len() - 1 {
            return Err(MlpError::BadCheckpoint("size chain and layers disagree".into()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, data) in self.layers.iter().enumerate() {
            let (rows, cols) = (self.sizes[i + 1], self.sizes[i]);
            if data.len() != rows * cols + rows {
                return Err(MlpError::BadCheckpoint(format!(
                    "layer {i} has {} entries, expected {}",
                    data.len(),
                    rows * cols + rows
                )));
            }
            let weight = DMatrix::from_row_slice(rows, cols, &data[..rows * cols]);
            let bias = DVector::from_column_slice(&data[rows * cols..]);
            layers.push(AffineLayer { weight, bias });
        }
        let mut mlp = Mlp::new(layers)?;
        mlp.seed = self.seed;
        Ok(mlp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Straightforward nested-loop re-implementation used as an oracle.
    fn reference_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = x.to_vec();
        for (l, layer) in mlp.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.weight.nrows()];
            for r in 0..layer.weight.nrows() {
                let mut acc = layer.bias[r];
                for c in 0..layer.weight.ncols() {
                    acc += layer.weight[(r, c)] * h[c];
                }
                z[r] = acc;
            }
            if l + 1 < mlp.layers.len() {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            h = z;
        }
        h
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let layers = vec![AffineLayer {
            weight: DMatrix::zeros(3, 4),
            bias: DVector::zeros(3),
        }];
        let mlp = Mlp::new(layers).unwrap();
        assert_eq!(mlp.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
        assert_eq!(mlp.param_count().nonzero_params, 0);
    }

    #[test]
    fn identity_layer_is_the_identity() {
        let mlp = Mlp::new(vec![AffineLayer {
            weight: DMatrix::identity(3, 3),
            bias: DVector::zeros(3),
        }])
        .unwrap();
        let x = [0.4, -1.0, 2.5];
        assert_eq!(mlp.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_reference_reimplementation() {
        for seed in 0..10u64 {
            let mlp = Mlp::init(&[7, 11, 5, 3], seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = mlp.forward(&x).unwrap();
            let want = reference_forward(&mlp, &x);
            for (g, w) in got.iter().zip(&want) {
                assert_relative_eq!(g, w, max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn linear_layer_weight_gradient_is_the_outer_product() {
        let mlp = Mlp::init(&[3, 2], 5).unwrap();
        let x = [0.5, -1.0, 2.0];
        let upstream = [1.5, -0.5];
        let grads = mlp.backward(&x, &upstream).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_relative_eq!(
                    grads.weights[0][(r, c)],
                    upstream[r] * x[c],
                    max_relative = 1e-15
                );
            }
        }
        assert_eq!(grads.biases[0].as_slice(), &upstream);
    }

    #[test]
    fn dead_relu_blocks_hidden_gradients() {
        // Large negative biases kill every hidden unit.
        let mut mlp = Mlp::init(&[2, 4, 4, 1], 3).unwrap();
        mlp.layers[0].bias.fill(-100.0);
        let grads = mlp.backward(&[0.1, 0.2], &[1.0]).unwrap();
        assert!(grads.weights[1].iter().all(|&g| g == 0.0));
        assert!(grads.weights[0].iter().all(|&g| g == 0.0));
        assert!(grads.input.iter().all(|&g| g == 0.0));
        // final bias still learns
        assert_eq!(grads.biases[2][0], 1.0);
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let step = 1e-6;
        for seed in 0..8u64 {
            let mut mlp = Mlp::init(&[4, 6, 3], seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let upstream: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let analytic = mlp.backward(&x, &upstream).unwrap().to_param_vector();
            let base = mlp.param_vector();
            let scalar = |m: &Mlp| -> f64 {
                m.forward(&x)
                    .unwrap()
                    .iter()
                    .zip(&upstream)
                    .map(|(o, u)| o * u)
                    .sum()
            };
            for (i, a) in analytic.iter().enumerate() {
                let mut params = base.clone();
                params[i] = base[i] + step;
                mlp.load_param_vector(&params);
                let plus = scalar(&mlp);
                params[i] = base[i] - step;
                mlp.load_param_vector(&params);
                let minus = scalar(&mlp);
                let fd = (plus - minus) / (2.0 * step);
                let denom = a.abs().max(fd.abs()).max(1.0);
                assert!(
                    (a - fd).abs() / denom < 1e-5,
                    "seed {seed} param {i}: analytic {a}, fd {fd}"
                );
            }
            mlp.load_param_vector(&base);
        }
    }

    #[test]
    fn published_parameter_totals() {
        // stand-alone encoder: 10 affine layers, hidden width 20, 100 -> 2
        let sizes = [100, 20, 20, 20, 20, 20, 20, 20, 20, 20, 2];
        let mlp = Mlp::init(&sizes, 0).unwrap();
        let count = mlp.param_count();
        assert_eq!(count.nonzero_params, 5422);
        assert_eq!(count.width, 100);
        assert_eq!(count.depth, 10);
        assert!(count.bound_satisfied);

        // companion encoder: 5 affine layers, hidden width 20, 100 -> 2
        let mlp = Mlp::init(&[100, 20, 20, 20, 20, 2], 0).unwrap();
        assert_eq!(mlp.param_count().nonzero_params, 3322);
    }

    #[test]
    fn positively_homogeneous_with_zero_biases() {
        let mut mlp = Mlp::init(&[3, 5, 2], 9).unwrap();
        for layer in &mut mlp.layers {
            layer.bias.fill(0.0);
        }
        let x = [0.7, -0.3, 1.1];
        let fx = mlp.forward(&x).unwrap();
        for lambda in [0.5, 2.0, 7.3] {
            let xs: Vec<f64> = x.iter().map(|v| v * lambda).collect();
            let fxs = mlp.forward(&xs).unwrap();
            for (a, b) in fxs.iter().zip(&fx) {
                assert_relative_eq!(*a, lambda * b, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mlp = Mlp::init(&[5, 8, 2], 77).unwrap();
        let json = mlp.to_checkpoint_json();
        let back = Mlp::from_checkpoint_json(&json).unwrap();
        assert_eq!(back, mlp);
        assert_eq!(back.seed, Some(77));
    }

    #[test]
    fn shape_chain_is_validated() {
        let layers = vec![
            AffineLayer { weight: DMatrix::zeros(3, 2), bias: DVector::zeros(3) },
            AffineLayer { weight: DMatrix::zeros(2, 4), bias: DVector::zeros(2) },
        ];
        assert!(matches!(Mlp::new(layers), Err(MlpError::ShapeChain(..))));
        let mlp = Mlp::init(&[2, 2], 0).unwrap();
        assert!(matches!(
            mlp.forward(&[1.0, 2.0, 3.0]),
            Err(MlpError::InputDimension { .. })
        ));
    }

    #[test]
    fn same_seed_gives_identical_networks() {
        assert_eq!(Mlp::init(&[4, 4, 1], 21).unwrap(), Mlp::init(&[4, 4, 1], 21).unwrap());
    }
}
