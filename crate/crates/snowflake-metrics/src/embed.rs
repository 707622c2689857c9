//! Analytic, training-free embedding oracles.
//!
//! Three constructions are implemented:
//!
//! * the **critical snowflake exponent** `log2(1 + 1/(I-1)) / 2` at which
//!   every `I`-point metric space embeds isometrically into some
//!   Euclidean space once snowflaked;
//! * **classical-MDS embedding** of a snowflaked metric: double-center
//!   the squared distances, eigendecompose, and read coordinates off the
//!   non-negative eigenpairs (a negative eigenvalue certifies that no
//!   Euclidean embedding exists);
//! * **exponential-sum interpolation** `Y(t) = sum_i beta_i (1 - e^{-alpha_i t})`
//!   fitted by variable projection (linear solve for the weights, outer
//!   search over the rates).
//!
//! Composing the first two with a pure power-law snowflake network
//! reconstructs any geodesic matrix exactly at desk scale, which is the
//! checkable core of the universality claim.

use crate::graph::{distortion, geodesic_distances, DistanceMatrix, GraphError, WeightedGraph};
use crate::net::NeuralSnowflake;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("epsilon must lie in (0, 1], got {0}")]
    BadEpsilon(f64),
    #[error("need at least 2 sample points, got {0}")]
    TooFewSamples(usize),
    #[error("term count must be at least 1")]
    NoTerms,
    #[error("sample abscissae must be non-negative, sorted, and distinct")]
    BadAbscissae(usize),
    #[error("sample value count {0} does not match abscissa count {1}")]
    SampleCountMismatch(usize, usize),
    #[error("graph error: {0}")]
    Graph(#[from] GraphError),
    #[error("snowflaked metric is not Euclidean-embeddable: min eigenvalue {min_eigenvalue}")]
    NotEmbeddable { min_eigenvalue: f64 },
}

/// Relative tolerance below which a negative Gram eigenvalue is treated
/// as floating-point noise rather than an embeddability obstruction.
pub const PSD_TOLERANCE: f64 = 1e-8;
/// Relative eigenvalue threshold for keeping an embedding dimension.
pub const DIMENSION_CUTOFF: f64 = 1e-10;

/// Critical snowflake exponent for `node_count` points:
/// `log2(1 + 1/(I-1)) / 2`, or 1/2 for trees.
pub fn critical_exponent(node_count: usize, is_tree: bool) -> Result<f64, EmbedError> {
    if node_count < 2 {
        return Err(EmbedError::TooFewNodes(node_count));
    }
    if is_tree {
        return Ok(0.5);
    }
    Ok((1.0 + 1.0 / (node_count as f64 - 1.0)).log2() / 2.0)
}

/// A successful Euclidean embedding of a snowflaked metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingResult {
    pub coords: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub min_eigenvalue: f64,
    /// Max relative deviation of embedded distances from `d^epsilon`.
    pub residual: f64,
}

/// Outcome of [`schoenberg_embed`]: either coordinates reproducing
/// `d^epsilon`, or the eigenvalue certifying non-embeddability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Embedding {
    Feasible(EmbeddingResult),
    Infeasible {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },
}

impl Embedding {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Embedding::Feasible(_))
    }

    pub fn feasible(self) -> Option<EmbeddingResult> {
        match self {
            Embedding::Feasible(r) => Some(r),
            Embedding::Infeasible { .. } => None,
        }
    }
}

/// Classical-MDS embedding of the snowflaked metric `d^epsilon`.
///
/// Forms `S = d^{2 epsilon}`, double-centers it into the Gram matrix
/// `G = -1/2 J S J`, and reads coordinates off the eigenpairs. The
/// metric embeds isometrically into Euclidean space exactly when `G` is
/// positive semidefinite; eigenvalues below `-1e-8 * lambda_max` report
/// infeasibility instead of being rounded away.
pub fn schoenberg_embed(
    d_matrix: &DistanceMatrix,
    epsilon: f64,
) -> Result<Embedding, EmbedError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(EmbedError::BadEpsilon(epsilon));
    }
    let n = d_matrix.n();
    if n < 2 {
        return Err(EmbedError::TooFewNodes(n));
    }

    let snowflaked = d_matrix.powf(epsilon);
    let squared = d_matrix.powf(2.0 * epsilon);
    let mut gram = DMatrix::zeros(n, n);
    let mut row_mean = vec![0.0f64; n];
    let mut grand = 0.0f64;
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += squared.get(i, j);
        }
        row_mean[i] = acc / n as f64;
        grand += acc;
    }
    grand /= (n * n) as f64;
    for i in 0..n {
        for j in 0..n {
            gram[(i, j)] = -0.5 * (squared.get(i, j) - row_mean[i] - row_mean[j] + grand);
        }
    }

    let eigen = nalgebra::SymmetricEigen::new(gram);
    let max_eigenvalue = eigen.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min_eigenvalue = eigen.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min_eigenvalue < -PSD_TOLERANCE * max_eigenvalue.max(0.0) {
        return Ok(Embedding::Infeasible { min_eigenvalue, max_eigenvalue });
    }

    let keep: Vec<usize> = (0..n)
        .filter(|&k| eigen.eigenvalues[k] > DIMENSION_CUTOFF * max_eigenvalue.max(0.0))
        .collect();
    let coords: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            keep.iter()
                .map(|&k| eigen.eigenvalues[k].sqrt() * eigen.eigenvectors[(i, k)])
                .collect()
        })
        .collect();

    let mut residual = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let target = snowflaked.get(i, j);
            if target == 0.0 {
                continue;
            }
            let got = euclid(&coords[i], &coords[j]);
            residual = residual.max((got - target).abs() / target);
        }
    }

    Ok(Embedding::Feasible(EmbeddingResult {
        coords,
        epsilon,
        min_eigenvalue,
        residual,
    }))
}

fn euclid(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// A bounded exponential sum `Y(t) = sum_i beta_i (1 - e^{-alpha_i t})`,
/// which always vanishes at 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExponentialSum {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl ExponentialSum {
    pub fn eval(&self, t: f64) -> f64 {
        self.alphas
            .iter()
            .zip(&self.betas)
            .map(|(&a, &b)| b * (1.0 - (-a * t).exp()))
            .sum()
    }

    pub fn term_count(&self) -> usize {
        self.alphas.len()
    }
}

/// An exponential sum together with its worst interpolation residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpSumFit {
    pub sum: ExponentialSum,
    pub max_residual: f64,
}

/// Given rates, solve the linear least-squares problem for the weights.
/// Returns the weights and the residual sum of squares.
fn solve_weights(ts: &[f64], ys: &[f64], log_alphas: &[f64]) -> (Vec<f64>, f64) {
    let n = ts.len();
    let m = log_alphas.len();
    let design = DMatrix::from_fn(n, m, |i, j| 1.0 - (-log_alphas[j].exp() * ts[i]).exp());
    let rhs = DVector::from_column_slice(ys);
    let svd = design.clone().svd(true, true);
    let beta = svd
        .solve(&rhs, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(m));
    let rss = (&design * &beta - &rhs).norm_squared();
    (beta.as_slice().to_vec(), rss)
}

/// Derivative-free simplex minimization over the log-rates.
fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, start: &[f64], iters: usize) -> Vec<f64> {
    let dim = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((start.to_vec(), f(start)));
    for i in 0..dim {
        let mut v = start.to_vec();
        v[i] += 0.35;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for _ in 0..iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if (worst - best).abs() <= 1e-18 * (1.0 + best.abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|k| simplex[..dim].iter().map(|(v, _)| v[k]).sum::<f64>() / dim as f64)
            .collect();
        let reflect: Vec<f64> = (0..dim)
            .map(|k| centroid[k] + alpha * (centroid[k] - simplex[dim].0[k]))
            .collect();
        let f_reflect = f(&reflect);
        if f_reflect < simplex[0].1 {
            let expand: Vec<f64> = (0..dim)
                .map(|k| centroid[k] + gamma * (reflect[k] - centroid[k]))
                .collect();
            let f_expand = f(&expand);
            simplex[dim] = if f_expand < f_reflect {
                (expand, f_expand)
            } else {
                (reflect, f_reflect)
            };
            continue;
        }
        if f_reflect < simplex[dim - 1].1 {
            simplex[dim] = (reflect, f_reflect);
            continue;
        }
        let contract: Vec<f64> = (0..dim)
            .map(|k| centroid[k] + rho * (simplex[dim].0[k] - centroid[k]))
            .collect();
        let f_contract = f(&contract);
        if f_contract < simplex[dim].1 {
            simplex[dim] = (contract, f_contract);
            continue;
        }
        let best_point = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            for k in 0..dim {
                entry.0[k] = best_point[k] + sigma * (entry.0[k] - best_point[k]);
            }
            entry.1 = f(&entry.0);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0].0.clone()
}

/// Fits `Y(t) = sum beta_i (1 - e^{-alpha_i t})` to the samples by
/// variable projection: weights by linear least squares, rates by a
/// multi-start simplex search over a log grid spanning [1e-3, 1e3].
///
/// Terms are added greedily — each fit with `m` terms starts from the
/// refined `m - 1` solution — so the residual is non-increasing in `m`.
pub fn fit_exponential_sum(
    ts: &[f64],
    ys: &[f64],
    term_count: usize,
) -> Result<ExpSumFit, EmbedError> {
    if ts.len() < 2 {
        return Err(EmbedError::TooFewSamples(ts.len()));
    }
    if ys.len() != ts.len() {
        return Err(EmbedError::SampleCountMismatch(ys.len(), ts.len()));
    }
    if term_count == 0 {
        return Err(EmbedError::NoTerms);
    }
    if ts[0] < 0.0 || ts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EmbedError::BadAbscissae(ts.len()));
    }

    const GRID_POINTS: usize = 17;
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| {
            let lo = 1e-3f64.ln();
            let hi = 1e3f64.ln();
            lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64
        })
        .collect();
    let objective = |log_alphas: &[f64]| solve_weights(ts, ys, log_alphas).1;

    let mut current: Vec<f64> = Vec::new();
    for m in 1..=term_count {
        let mut starts: Vec<(Vec<f64>, f64)> = grid
            .iter()
            .map(|&g| {
                let mut cand = current.clone();
                cand.push(g);
                let obj = objective(&cand);
                (cand, obj)
            })
            .collect();
        starts.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut best: Option<(Vec<f64>, f64)> = None;
        for (start, _) in starts.into_iter().take(3) {
            let refined = nelder_mead(&objective, &start, 120 * m + 200);
            let obj = objective(&refined);
            if best.as_ref().map_or(true, |(_, b)| obj < *b) {
                best = Some((refined, obj));
            }
        }
        current = best.unwrap().0;
    }

    let (betas, _) = solve_weights(ts, ys, &current);
    let sum = ExponentialSum {
        alphas: current.iter().map(|&l| l.exp()).collect(),
        betas,
    };
    let max_residual = ts
        .iter()
        .zip(ys)
        .map(|(&t, &y)| (sum.eval(t) - y).abs())
        .fold(0.0f64, f64::max);
    Ok(ExpSumFit { sum, max_residual })
}

/// Desk-scale certificate that a graph's geodesic metric is exactly
/// representable by a Euclidean embedding composed with a power-law
/// snowflake.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniversalityReport {
    pub node_count: usize,
    pub epsilon: f64,
    pub embedding_dim: usize,
    /// Max relative deviation of the MDS embedding from `d^epsilon`.
    pub embed_residual: f64,
    /// Bi-Lipschitz constants of the snowflake reconstruction against the
    /// geodesic matrix; (1, 1) certifies an isometry.
    pub distortion: (f64, f64),
    /// Triangle relaxation `2^{1/epsilon - 1}` of the power snowflake.
    pub relaxed_triangle_constant: f64,
}

impl UniversalityReport {
    pub fn is_isometric(&self, tolerance: f64) -> bool {
        (self.distortion.0 - 1.0).abs() <= tolerance
            && (self.distortion.1 - 1.0).abs() <= tolerance
    }
}

/// Embeds the graph's geodesic metric at the critical exponent, lifts the
/// embedding back through the snowflake power network `t -> t^{1/eps}`,
/// and reports how exactly the geodesics are reproduced.
pub fn verify_snowflake_universality(
    graph: &WeightedGraph,
) -> Result<UniversalityReport, EmbedError> {
    let n = graph.node_count();
    let geodesics = geodesic_distances(graph)?;
    let epsilon = critical_exponent(n, false)?;
    let embedding = match schoenberg_embed(&geodesics, epsilon)? {
        Embedding::Feasible(e) => e,
        Embedding::Infeasible { min_eigenvalue, .. } => {
            return Err(EmbedError::NotEmbeddable { min_eigenvalue })
        }
    };

    let power = 1.0 / epsilon;
    let net = NeuralSnowflake::power_config(power).expect("power >= 1 by construction");
    let mut reconstructed = DistanceMatrix::zeros(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = euclid(&embedding.coords[i], &embedding.coords[j]);
            reconstructed.set(i, j, net.forward(gap).expect("non-negative gap"));
        }
    }
    let distortion = distortion(&reconstructed, &geodesics)?;
    let embedding_dim = embedding.coords.first().map_or(0, |c| c.len());

    Ok(UniversalityReport {
        node_count: n,
        epsilon,
        embedding_dim,
        embed_residual: embedding.residual,
        distortion,
        relaxed_triangle_constant: net.relaxed_triangle_constant(),
    })
}
