//! Weighted graphs, all-pairs geodesics, distortion, and the synthetic
//! target metrics for the embedding experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge ({0}, {1}) out of range for {2} nodes")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("edge weight must be strictly positive, got {0}")]
    NonPositiveWeight(f64),
    #[error("edge and weight counts differ: {0} vs {1}")]
    WeightCountMismatch(usize, usize),
    #[error("graph is disconnected: node {0} unreachable from node 0")]
    Disconnected(usize),
    #[error("distance matrices have different sizes: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("target distance is zero where embedded distance is {0}")]
    ZeroTargetDistance(f64),
    #[error("unknown metric id: {0}")]
    UnknownMetric(String),
    #[error("matrix is not symmetric with a zero diagonal")]
    NotADistanceMatrix,
}

/// An undirected weighted graph over points in Euclidean space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightedGraph {
    pub coords: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
}

impl WeightedGraph {
    /// Builds a graph, normalizing each edge to `(min, max)` order.
    pub fn new(
        coords: Vec<Vec<f64>>,
        edges: Vec<(usize, usize)>,
        weights: Vec<f64>,
    ) -> Result<Self, GraphError> {
        let n = coords.len();
        if edges.len() != weights.len() {
            return Err(GraphError::WeightCountMismatch(edges.len(), weights.len()));
        }
        let mut normalized = Vec::with_capacity(edges.len());
        for (&(u, v), &w) in edges.iter().zip(&weights) {
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            if u >= n || v >= n {
                return Err(GraphError::EdgeOutOfRange(u, v, n));
            }
            if !w.is_finite() || w <= 0.0 {
                return Err(GraphError::NonPositiveWeight(w));
            }
            normalized.push((u.min(v), u.max(v)));
        }
        Ok(Self {
            coords,
            edges: normalized,
            weights,
        })
    }

    /// Unit-weight graph on unnamed nodes (coordinates default to 1-d indices).
    pub fn unit(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let coords = (0..n).map(|i| vec![i as f64]).collect();
        let weights = vec![1.0; edges.len()];
        Self::new(coords, edges.to_vec(), weights)
    }

    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.node_count()];
        for (&(u, v), &w) in self.edges.iter().zip(&self.weights) {
            adj[u].push((v, w));
            adj[v].push((u, w));
        }
        adj
    }
}

/// Symmetric non-negative distance matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    /// Builds from a symmetric closure over index pairs.
    pub fn from_fn<F: FnMut(usize, usize) -> f64>(n: usize, mut f: F) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = f(i, j);
                m.set(i, j, d);
            }
        }
        m
    }

    /// Validates symmetry and the zero diagonal of a raw row-major buffer.
    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self, GraphError> {
        if data.len() != n * n {
            return Err(GraphError::NotADistanceMatrix);
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(GraphError::NotADistanceMatrix);
            }
            for j in 0..i {
                if data[i * n + j] != data[j * n + i] || data[i * n + j] < 0.0 {
                    return Err(GraphError::NotADistanceMatrix);
                }
            }
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, d: f64) {
        self.data[i * self.n + j] = d;
        self.data[j * self.n + i] = d;
    }

    /// Elementwise power of all entries (the snowflake transform).
    pub fn powf(&self, e: f64) -> Self {
        let data = self
            .data
            .iter()
            .map(|&d| if d == 0.0 { 0.0 } else { d.powf(e) })
            .collect();
        Self { n: self.n, data }
    }

    /// CSV export with a header row of node indices.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.n).map(|i| i.to_string()).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{}", self.get(i, j))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Heap entry ordered by distance; `f64` is totally ordered here because
/// path lengths are finite sums of positive weights.
#[derive(PartialEq)]
struct HeapEntry(f64, usize);

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let n = adj.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Reverse(HeapEntry(0.0, source)));
    while let Some(Reverse(HeapEntry(d, u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let cand = d + w;
            if cand < dist[v] {
                dist[v] = cand;
                heap.push(Reverse(HeapEntry(cand, v)));
            }
        }
    }
    dist
}

/// All-pairs shortest-path distances under the edge weights.
pub fn geodesic_distances(g: &WeightedGraph) -> Result<DistanceMatrix, GraphError> {
    let n = g.node_count();
    let adj = g.adjacency();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| dijkstra(&adj, s))
        .collect();
    for (i, row) in rows.iter().enumerate() {
        if let Some(j) = row.iter().position(|d| !d.is_finite()) {
            let _ = i;
            return Err(GraphError::Disconnected(j));
        }
    }
    let mut m = DistanceMatrix::zeros(n);
    for i in 0..n {
        for j in (i + 1)..n {
            // Dijkstra rows agree on undirected graphs; copy the upper half.
            m.set(i, j, rows[i][j]);
        }
    }
    Ok(m)
}

/// Largest pairwise distance over the smallest nonzero one; 1 for n <= 1.
pub fn aspect_ratio(d: &DistanceMatrix) -> f64 {
    let n = d.n();
    let mut max = 0.0f64;
    let mut min = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = d.get(i, j);
            max = max.max(v);
            if v > 0.0 {
                min = min.min(v);
            }
        }
    }
    if !min.is_finite() || max == 0.0 {
        1.0
    } else {
        max / min
    }
}

/// One coordinate of the synthetic clouds: standard normal clamped to
/// the unit interval.
pub(crate) fn clamped_normal<R: Rng>(rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z.clamp(-1.0, 1.0)
}

/// Standard-normal cloud clamped to the unit hypercube, per-seed deterministic.
pub fn sample_pointcloud(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| clamped_normal(&mut rng)).collect())
        .collect()
}

/// The six synthetic target metrics of the embedding experiments, as
/// functions of the Euclidean gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricId {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
}

impl MetricId {
    pub const ALL: [MetricId; 6] = [
        MetricId::M1,
        MetricId::M2,
        MetricId::M3,
        MetricId::M4,
        MetricId::M5,
        MetricId::M6,
    ];

    /// Human-readable formula, matching the experiment tables.
    pub fn formula(&self) -> &'static str {
        match self {
            MetricId::M1 => "s^0.5 * ln(1+s)^0.5",
            MetricId::M2 => "s^0.1 * ln(1+s)^0.9",
            MetricId::M3 => "1 - 1/(1+s^0.5)",
            MetricId::M4 => "1 - exp(-(s-1)/ln(s))",
            MetricId::M5 => "1 - 1/(1+s)^0.2",
            MetricId::M6 => "1 - 1/(1+s^0.2+s^0.5)",
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", *self as usize + 1)
    }
}

impl std::str::FromStr for MetricId {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, GraphError> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(MetricId::M1),
            "M2" => Ok(MetricId::M2),
            "M3" => Ok(MetricId::M3),
            "M4" => Ok(MetricId::M4),
            "M5" => Ok(MetricId::M5),
            "M6" => Ok(MetricId::M6),
            other => Err(GraphError::UnknownMetric(other.to_string())),
        }
    }
}

/// Evaluates the named target metric at gap `s >= 0`.
///
/// M4 has a removable singularity at `s = 1`; its continuous extension is
/// used there (value `1 - 1/e`), and the limit value 0 at `s = 0`.
pub fn synthetic_target(metric: MetricId, s: f64) -> f64 {
    debug_assert!(s >= 0.0);
    match metric {
        MetricId::M1 => s.sqrt() * (1.0 + s).ln().sqrt(),
        MetricId::M2 => s.powf(0.1) * (1.0 + s).ln().powf(0.9),
        MetricId::M3 => 1.0 - 1.0 / (1.0 + s.sqrt()),
        MetricId::M4 => {
            if s == 0.0 {
                return 0.0;
            }
            // (s-1)/ln(s) -> 1 as s -> 1; switch to the series nearby.
            let ratio = if (s - 1.0).abs() < 1e-7 {
                1.0 + 0.5 * (s - 1.0)
            } else {
                (s - 1.0) / s.ln()
            };
            1.0 - (-ratio).exp()
        }
        MetricId::M5 => 1.0 - (1.0 + s).powf(-0.2),
        MetricId::M6 => 1.0 - 1.0 / (1.0 + s.powf(0.2) + s.sqrt()),
    }
}

/// Bi-Lipschitz constants `(s, L)` of `embedded` relative to `target`:
/// the extreme ratios `embedded/target` over distinct pairs.
pub fn distortion(
    embedded: &DistanceMatrix,
    target: &DistanceMatrix,
) -> Result<(f64, f64), GraphError> {
    if embedded.n() != target.n() {
        return Err(GraphError::SizeMismatch(embedded.n(), target.n()));
    }
    let n = embedded.n();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let e = embedded.get(i, j);
            let t = target.get(i, j);
            if t == 0.0 {
                if e == 0.0 {
                    continue;
                }
                return Err(GraphError::ZeroTargetDistance(e));
            }
            let r = e / t;
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    if !lo.is_finite() {
        // no distinct pairs with a nonzero target: an isometry by default
        lo = 1.0;
        hi = 1.0;
    }
    Ok((lo, hi))
}

/// The five-node graph whose geodesic metric defeats every Riemannian
/// representation space: edges {A,E}, {A,D}, {E,B}, {B,D}, {D,C} with
/// unit weights (nodes indexed A=0, B=1, C=2, D=3, E=4).
pub fn five_node_impossibility_graph() -> WeightedGraph {
    WeightedGraph::unit(5, &[(0, 4), (0, 3), (4, 1), (1, 3), (3, 2)]).unwrap()
}

/// Unit-weight cycle on `n` nodes.
pub fn cycle_graph(n: usize) -> WeightedGraph {
    let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    WeightedGraph::unit(n, &edges).unwrap()
}

/// Seeded random connected graph: a random spanning tree plus extra edges
/// with probability 0.3, positive weights in [0.3, 2.5).
pub fn random_connected_graph(n: usize, seed: u64) -> WeightedGraph {
    assert!(n >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    for v in 1..n {
        let u = rng.gen_range(0..v);
        edges.push((u, v));
        weights.push(rng.gen_range(0.3..2.5));
    }
    for u in 0..n {
        for v in (u + 1)..n {
            if edges.contains(&(u, v)) {
                continue;
            }
            if rng.gen_bool(0.3) {
                edges.push((u, v));
                weights.push(rng.gen_range(0.3..2.5));
            }
        }
    }
    let coords = (0..n).map(|i| vec![i as f64]).collect();
    WeightedGraph::new(coords, edges, weights).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quasimetric::check_quasimetric;
    use approx::assert_relative_eq;

    #[test]
    fn path_graph_geodesics_add_up() {
        let g = WeightedGraph::unit(3, &[(0, 1), (1, 2)]).unwrap();
        let mut g = g;
        g.weights = vec![1.0, 2.0];
        let d = geodesic_distances(&g).unwrap();
        assert_eq!(d.get(0, 2), 3.0);
        assert_eq!(d.get(0, 1), 1.0);
        assert_eq!(aspect_ratio(&d), 3.0);
    }

    #[test]
    fn triangle_consistent_complete_graph_keeps_its_weights() {
        let g = WeightedGraph::new(
            (0..3).map(|i| vec![i as f64]).collect(),
            vec![(0, 1), (1, 2), (0, 2)],
            vec![1.0, 1.2, 1.5],
        )
        .unwrap();
        let d = geodesic_distances(&g).unwrap();
        assert_eq!(d.get(0, 1), 1.0);
        assert_eq!(d.get(1, 2), 1.2);
        assert_eq!(d.get(0, 2), 1.5);
    }

    #[test]
    fn five_node_graph_distances_match_breadth_first_search() {
        let d = geodesic_distances(&five_node_impossibility_graph()).unwrap();
        // C is node 2, A node 0, B node 1
        assert_eq!(d.get(2, 0), 2.0);
        assert_eq!(d.get(2, 1), 2.0);
        assert_eq!(d.get(0, 1), 2.0);
        assert_eq!(d.get(2, 4), 3.0);
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let g = WeightedGraph::unit(4, &[(0, 1), (2, 3)]).unwrap();
        assert!(matches!(
            geodesic_distances(&g),
            Err(GraphError::Disconnected(_))
        ));
    }

    #[test]
    fn geodesics_satisfy_the_triangle_inequality() {
        let g = WeightedGraph::new(
            (0..8).map(|i| vec![i as f64]).collect(),
            vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (0, 7), (2, 6)],
            vec![0.5, 1.3, 2.0, 0.7, 1.1, 0.9, 1.8, 2.2, 0.4],
        )
        .unwrap();
        let d = geodesic_distances(&g).unwrap();
        let pts: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let report = check_quasimetric(
            |x, y| d.get(x[0] as usize, y[0] as usize),
            &pts,
            1e-12,
        )
        .unwrap();
        assert!(report.implied_c <= 1.0 + 1e-12);
    }

    #[test]
    fn aspect_ratio_degenerate_cases() {
        assert_eq!(aspect_ratio(&DistanceMatrix::zeros(1)), 1.0);
        let two = DistanceMatrix::from_fn(2, |_, _| 1.7);
        assert_eq!(aspect_ratio(&two), 1.0);
    }

    #[test]
    fn pointcloud_is_deterministic_and_clamped() {
        let a = sample_pointcloud(50, 7, 42);
        let b = sample_pointcloud(50, 7, 42);
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|&v| (-1.0..=1.0).contains(&v)));
        assert_ne!(a, sample_pointcloud(50, 7, 43));
    }

    #[test]
    fn clipped_gaussian_mean_is_near_zero() {
        let cloud = sample_pointcloud(1_000_000, 1, 9);
        let mean: f64 = cloud.iter().map(|p| p[0]).sum::<f64>() / cloud.len() as f64;
        assert!(mean.abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn target_metric_values() {
        assert_eq!(synthetic_target(MetricId::M3, 0.0), 0.0);
        assert_relative_eq!(synthetic_target(MetricId::M3, 1.0), 0.5, max_relative = 1e-15);
        assert_relative_eq!(
            synthetic_target(MetricId::M4, 1.0),
            1.0 - (-1.0f64).exp(),
            max_relative = 1e-12
        );
        assert_eq!(synthetic_target(MetricId::M4, 0.0), 0.0);
        // continuity across the extension point
        let eps = 3e-8;
        let left = synthetic_target(MetricId::M4, 1.0 - eps);
        let right = synthetic_target(MetricId::M4, 1.0 + eps);
        assert_relative_eq!(left, right, max_relative = 1e-6);
    }

    #[test]
    fn bounded_metrics_stay_below_one() {
        for metric in [MetricId::M3, MetricId::M4, MetricId::M5, MetricId::M6] {
            for i in 0..400 {
                let s = i as f64 * 0.25;
                let v = synthetic_target(metric, s);
                assert!((0.0..1.0).contains(&v), "{metric} at {s} gave {v}");
            }
        }
    }

    #[test]
    fn all_targets_are_metric_generators() {
        let grid: Vec<f64> = (0..200).map(|i| 20.0 * i as f64 / 199.0).collect();
        for metric in MetricId::ALL {
            let report = crate::quasimetric::check_metric_generator(
                |s| synthetic_target(metric, s),
                &grid,
                1e-9,
            )
            .unwrap();
            assert!(report.passes(), "{metric} failed: {report:?}");
        }
    }

    #[test]
    fn distortion_extreme_ratios() {
        let target = DistanceMatrix::from_fn(3, |i, j| ((i + j) * (j - i)) as f64);
        assert_eq!(distortion(&target, &target).unwrap(), (1.0, 1.0));

        let mut doubled = target.clone();
        for i in 0..3 {
            for j in (i + 1)..3 {
                doubled.set(i, j, 2.0 * target.get(i, j));
            }
        }
        assert_eq!(distortion(&doubled, &target).unwrap(), (2.0, 2.0));

        let base = DistanceMatrix::from_fn(2, |_, _| 4.0);
        let mut with_one = DistanceMatrix::zeros(3);
        with_one.set(0, 1, 1.0);
        with_one.set(0, 2, 4.0);
        with_one.set(1, 2, 4.0);
        let _ = base;
        let rooted = with_one.powf(0.5);
        let (s, l) = distortion(&rooted, &with_one).unwrap();
        assert_eq!((s, l), (0.5, 1.0));
    }

    #[test]
    fn distortion_rejects_zero_targets_with_nonzero_embeddings() {
        let mut embedded = DistanceMatrix::zeros(2);
        embedded.set(0, 1, 1.0);
        let target = DistanceMatrix::zeros(2);
        assert!(matches!(
            distortion(&embedded, &target),
            Err(GraphError::ZeroTargetDistance(_))
        ));
    }

    #[test]
    fn graph_json_round_trips() {
        let g = WeightedGraph::new(
            vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]],
            vec![(0, 1), (1, 2)],
            vec![0.3, 0.7],
        )
        .unwrap();
        let json = serde_json::to_string(&g).unwrap();
        let back: WeightedGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(back.coords, g.coords);
        assert_eq!(back.edges, g.edges);
        assert_eq!(back.weights, g.weights);
        assert!(json.contains("\"edges\":[[0,1],[1,2]]"));
    }

    #[test]
    fn graph_validation_errors() {
        assert_eq!(
            WeightedGraph::unit(2, &[(0, 0)]).unwrap_err(),
            GraphError::SelfLoop(0)
        );
        assert_eq!(
            WeightedGraph::unit(2, &[(0, 3)]).unwrap_err(),
            GraphError::EdgeOutOfRange(0, 3, 2)
        );
        assert!(matches!(
            WeightedGraph::new(vec![vec![0.0]; 2], vec![(0, 1)], vec![0.0]),
            Err(GraphError::NonPositiveWeight(_))
        ));
    }

    #[test]
    fn csv_export_has_index_header() {
        let d = DistanceMatrix::from_fn(2, |_, _| 1.5);
        let csv = d.to_csv();
        assert!(csv.starts_with("0,1\n"));
        assert!(csv.contains("0,1.5\n"));
    }
}
