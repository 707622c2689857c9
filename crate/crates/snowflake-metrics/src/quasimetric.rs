//! The closed-form snowflake activation distance and numeric verifiers
//! for metric and quasi-metric axioms.
//!
//! A quasi-metric keeps identity of indiscernibles and symmetry but only
//! asks for a relaxed triangle inequality `d(x,y) <= C (d(x,z) + d(z,y))`
//! with some constant `C >= 1`. The snowflake activation combines a
//! bounded, a fractal, and an irregular-fractal component of the input
//! gap and raises the mix to the `(1 + p)`-th power; for `p = 0` it is a
//! genuine metric, for `p > 0` the relaxation constant is `2^p`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("all component weights are zero")]
    DegenerateWeights,
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("empty grid")]
    EmptyGrid,
    #[error("grid must be sorted ascending and start at 0")]
    BadGrid,
    #[error("grid too small for order {order}: need at least {needed} points")]
    GridTooSmall { order: usize, needed: usize },
    #[error("grid must be strictly positive with uniform spacing")]
    NonUniformGrid,
}

/// Parameters of the snowflake activation distance.
///
/// The distance between `x` and `y` with gap `t = ||x - y||` is
///
/// ```text
/// ( c1 (1 - exp(-gamma t)) + c2 t^alpha + c3 ln(1 + t)^beta )^(1 + p)
/// ```
///
/// Component weights must be non-negative and not all zero; `alpha` lies
/// in `(0, 1]`, `beta` in `[0, 1]`, and `gamma`, `p` are non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnowflakeParams {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub p: f64,
}

impl SnowflakeParams {
    pub fn new(
        c: [f64; 3],
        alpha: f64,
        beta: f64,
        gamma: f64,
        p: f64,
    ) -> Result<Self, MetricError> {
        let params = Self {
            c1: c[0],
            c2: c[1],
            c3: c[2],
            alpha,
            beta,
            gamma,
            p,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if self.c1 < 0.0 || self.c2 < 0.0 || self.c3 < 0.0 {
            return Err(MetricError::InvalidParameter("component weights must be >= 0"));
        }
        if self.c1 == 0.0 && self.c2 == 0.0 && self.c3 == 0.0 {
            return Err(MetricError::DegenerateWeights);
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(MetricError::InvalidParameter("alpha must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(MetricError::InvalidParameter("beta must lie in [0, 1]"));
        }
        if self.gamma < 0.0 {
            return Err(MetricError::InvalidParameter("gamma must be >= 0"));
        }
        if self.p < 0.0 {
            return Err(MetricError::InvalidParameter("p must be >= 0"));
        }
        Ok(())
    }

    /// Base curve before the outer power: value at gap `t >= 0`.
    pub fn base(&self, t: f64) -> f64 {
        self.c1 * (1.0 - (-self.gamma * t).exp())
            + self.c2 * t.powf(self.alpha)
            + self.c3 * (1.0 + t).ln().powf(self.beta)
    }

    /// Full activation value at gap `t >= 0`, including the `(1 + p)` power.
    pub fn eval(&self, t: f64) -> f64 {
        let base = self.base(t);
        if base == 0.0 {
            0.0
        } else {
            base.powf(1.0 + self.p)
        }
    }
}

pub(crate) fn euclidean_gap(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::DimensionMismatch(x.len(), y.len()));
    }
    Ok(x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Snowflake activation distance between two points of equal dimension.
pub fn snowflake_distance(
    x: &[f64],
    y: &[f64],
    params: &SnowflakeParams,
) -> Result<f64, MetricError> {
    params.validate()?;
    let t = euclidean_gap(x, y)?;
    Ok(params.eval(t))
}

/// Worst-case axiom violations of a black-box distance over a point sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuasiMetricReport {
    /// Largest `d(x,y) / (d(x,z) + d(z,y))` over the sampled triples.
    pub max_triangle_ratio: f64,
    /// Largest `|d(x,y) - d(y,x)|` over sampled pairs.
    pub symmetry_defect: f64,
    /// Largest `|d(x,x)|` over the sample.
    pub identity_defect: f64,
    /// Smallest admissible relaxation constant on the sample (at least 1).
    #[serde(rename = "implied_C")]
    pub implied_c: f64,
}

/// Exhaustive triple check for up to this many points; Monte-Carlo beyond.
const EXHAUSTIVE_LIMIT: usize = 64;
const MONTE_CARLO_TRIPLES: usize = 100_000;

/// Checks the quasi-metric axioms of `distance` on a point sample.
///
/// For `n <= 64` every unordered triple is examined in all three
/// orientations; larger samples are probed with 10^5 seeded random
/// triples. `tolerance` (relative to the largest sampled distance)
/// guards the triangle ratio against near-zero denominators.
pub fn check_quasimetric<D>(
    distance: D,
    points: &[Vec<f64>],
    tolerance: f64,
) -> Result<QuasiMetricReport, MetricError>
where
    D: Fn(&[f64], &[f64]) -> f64,
{
    let n = points.len();
    if n < 3 {
        return Err(MetricError::TooFewPoints { needed: 3, got: n });
    }

    let mut d = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = distance(&points[i], &points[j]);
        }
    }

    let mut identity_defect = 0.0f64;
    let mut symmetry_defect = 0.0f64;
    let mut max_dist = 0.0f64;
    for i in 0..n {
        identity_defect = identity_defect.max(d[i * n + i].abs());
        for j in (i + 1)..n {
            symmetry_defect = symmetry_defect.max((d[i * n + j] - d[j * n + i]).abs());
            max_dist = max_dist.max(d[i * n + j].abs());
        }
    }

    let floor = tolerance.max(0.0) * max_dist;
    let ratio = |i: usize, j: usize, k: usize| -> f64 {
        let denom = d[i * n + k] + d[k * n + j];
        if denom > floor && denom > 0.0 {
            d[i * n + j] / denom
        } else {
            0.0
        }
    };

    let mut max_triangle_ratio = 0.0f64;
    if n <= EXHAUSTIVE_LIMIT {
        for i in 0..n {
            for j in (i + 1)..n {
                for k in 0..n {
                    if k == i || k == j {
                        continue;
                    }
                    max_triangle_ratio = max_triangle_ratio.max(ratio(i, j, k));
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5f0_773);
        let mut drawn = 0;
        while drawn < MONTE_CARLO_TRIPLES {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            let k = rng.gen_range(0..n);
            if i == j || j == k || i == k {
                continue;
            }
            max_triangle_ratio = max_triangle_ratio.max(ratio(i, j, k));
            drawn += 1;
        }
    }

    Ok(QuasiMetricReport {
        max_triangle_ratio,
        symmetry_defect,
        identity_defect,
        implied_c: max_triangle_ratio.max(1.0),
    })
}

impl QuasiMetricReport {
    /// True when the sample is consistent with a metric (`C = 1`) at the
    /// given absolute tolerance.
    pub fn is_metric(&self, tolerance: f64) -> bool {
        self.implied_c <= 1.0 + tolerance
            && self.symmetry_defect <= tolerance
            && self.identity_defect <= tolerance
    }
}

/// Outcome of the metric-generator conditions on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub vanishes_at_zero: bool,
    pub strictly_increasing: bool,
    pub midpoint_concave: bool,
}

impl GeneratorReport {
    pub fn passes(&self) -> bool {
        self.vanishes_at_zero && self.strictly_increasing && self.midpoint_concave
    }
}

/// Checks that `f` is a metric generator on the grid: `f(0) = 0`, strict
/// monotone growth, and midpoint concavity
/// `f((s+t)/2) >= (f(s)+f(t))/2 - tolerance` over all grid pairs.
pub fn check_metric_generator<F>(
    f: F,
    grid: &[f64],
    tolerance: f64,
) -> Result<GeneratorReport, MetricError>
where
    F: Fn(f64) -> f64,
{
    if grid.is_empty() {
        return Err(MetricError::EmptyGrid);
    }
    if grid[0] != 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MetricError::BadGrid);
    }

    let values: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
    let vanishes_at_zero = values[0].abs() <= tolerance;
    let strictly_increasing = values.windows(2).all(|w| w[1] > w[0]);

    let mut midpoint_concave = true;
    'outer: for i in 0..grid.len() {
        for j in (i + 1)..grid.len() {
            let mid = f(0.5 * (grid[i] + grid[j]));
            if mid < 0.5 * (values[i] + values[j]) - tolerance {
                midpoint_concave = false;
                break 'outer;
            }
        }
    }

    Ok(GeneratorReport {
        vanishes_at_zero,
        strictly_increasing,
        midpoint_concave,
    })
}

/// Outcome of the complete-monotonicity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteMonotonicityReport {
    pub orders_checked: usize,
    /// Most negative value of `(-1)^n f^(n)` seen across the grid.
    pub worst_violation: f64,
    pub passes: bool,
}

/// Checks sign alternation `(-1)^n f^(n)(t) >= 0` for `n = 1..=max_order`
/// using forward-difference derivative estimates on a uniform grid.
pub fn check_complete_monotonicity<F>(
    f: F,
    grid: &[f64],
    max_order: usize,
    tolerance: f64,
) -> Result<CompleteMonotonicityReport, MetricError>
where
    F: Fn(f64) -> f64,
{
    if grid.len() < 2 {
        return Err(MetricError::GridTooSmall { order: max_order, needed: max_order + 1 });
    }
    let order = max_order.clamp(1, 4);
    if grid.len() <= order {
        return Err(MetricError::GridTooSmall { order, needed: order + 1 });
    }
    let h = grid[1] - grid[0];
    if grid[0] <= 0.0 || h <= 0.0 {
        return Err(MetricError::NonUniformGrid);
    }
    let uniform = grid
        .windows(2)
        .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.max(1.0));
    if !uniform {
        return Err(MetricError::NonUniformGrid);
    }

    let values: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
    let mut diffs = values.clone();
    let mut worst = f64::INFINITY;
    for n in 1..=order {
        // forward difference of the previous order, scaled to a derivative
        for i in 0..diffs.len() - 1 {
            diffs[i] = diffs[i + 1] - diffs[i];
        }
        diffs.pop();
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        let scale = h.powi(n as i32);
        for &d in &diffs {
            worst = worst.min(sign * d / scale);
        }
    }

    Ok(CompleteMonotonicityReport {
        orders_checked: order,
        worst_violation: worst,
        passes: worst >= -tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn euclid(x: &[f64], y: &[f64]) -> f64 {
        euclidean_gap(x, y).unwrap()
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect()
    }

    #[test]
    fn distance_vanishes_at_coincident_points() {
        let params = SnowflakeParams::new([1.0, 1.0, 1.0], 0.5, 1.0, 1.0, 0.3).unwrap();
        let x = vec![0.3, -1.2, 4.0];
        assert_eq!(snowflake_distance(&x, &x, &params).unwrap(), 0.0);
    }

    #[test]
    fn distance_at_unit_gap_matches_direct_evaluation() {
        let params = SnowflakeParams::new([1.0, 1.0, 1.0], 0.5, 1.0, 1.0, 0.0).unwrap();
        let d = snowflake_distance(&[0.0, 0.0], &[1.0, 0.0], &params).unwrap();
        let expected = (1.0 - (-1.0f64).exp()) + 1.0 + 2.0f64.ln();
        assert_relative_eq!(d, expected, max_relative = 1e-15);
        assert_relative_eq!(d, 2.325268, max_relative = 1e-6);
    }

    #[test]
    fn pure_fractal_term_with_p_one_squares_the_gap() {
        let params = SnowflakeParams::new([0.0, 1.0, 0.0], 1.0, 0.0, 0.0, 1.0).unwrap();
        let d = snowflake_distance(&[0.0], &[2.0], &params).unwrap();
        assert_eq!(d, 4.0);
    }

    #[test]
    fn rejects_dimension_mismatch_and_zero_weights() {
        let params = SnowflakeParams::new([1.0, 0.0, 0.0], 1.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(
            snowflake_distance(&[0.0], &[0.0, 1.0], &params),
            Err(MetricError::DimensionMismatch(1, 2))
        );
        assert_eq!(
            SnowflakeParams::new([0.0, 0.0, 0.0], 1.0, 1.0, 1.0, 0.0),
            Err(MetricError::DegenerateWeights)
        );
    }

    #[test]
    fn euclidean_sample_is_a_metric() {
        let pts = random_points(100, 3, 7);
        let report = check_quasimetric(euclid, &pts, 1e-12).unwrap();
        assert!(report.implied_c <= 1.0 + 1e-12, "C = {}", report.implied_c);
        assert_eq!(report.symmetry_defect, 0.0);
        assert_eq!(report.identity_defect, 0.0);
    }

    #[test]
    fn squared_euclidean_has_relaxation_constant_two() {
        let pts = random_points(60, 3, 11);
        let report =
            check_quasimetric(|x, y| euclid(x, y).powi(2), &pts, 1e-12).unwrap();
        assert!(report.implied_c <= 2.0 + 1e-12, "C = {}", report.implied_c);
        assert!(report.implied_c > 1.0);
    }

    #[test]
    fn root_snowflake_of_euclidean_is_a_metric() {
        let pts = random_points(60, 3, 13);
        let report =
            check_quasimetric(|x, y| euclid(x, y).sqrt(), &pts, 1e-12).unwrap();
        assert!(report.implied_c <= 1.0 + 1e-12, "C = {}", report.implied_c);
    }

    #[test]
    fn monte_carlo_mode_engages_beyond_the_exhaustive_limit() {
        let pts = random_points(80, 2, 17);
        let report = check_quasimetric(euclid, &pts, 1e-12).unwrap();
        assert!(report.implied_c <= 1.0 + 1e-12);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts = random_points(2, 2, 1);
        assert!(matches!(
            check_quasimetric(euclid, &pts, 1e-12),
            Err(MetricError::TooFewPoints { .. })
        ));
    }

    fn grid(n: usize, max: f64) -> Vec<f64> {
        (0..n).map(|i| max * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn sqrt_and_log_power_pass_generator_conditions() {
        let g = grid(200, 10.0);
        assert!(check_metric_generator(|t| t.sqrt(), &g, 1e-9).unwrap().passes());
        assert!(check_metric_generator(|t: f64| (1.0 + t).ln().powf(0.9), &g, 1e-9)
            .unwrap()
            .passes());
    }

    #[test]
    fn square_fails_concavity() {
        let g = grid(100, 4.0);
        let report = check_metric_generator(|t| t * t, &g, 1e-9).unwrap();
        assert!(!report.midpoint_concave);
        assert!(!report.passes());
    }

    #[test]
    fn generator_check_rejects_bad_grids() {
        assert_eq!(
            check_metric_generator(|t| t, &[], 1e-9),
            Err(MetricError::EmptyGrid)
        );
        assert_eq!(
            check_metric_generator(|t| t, &[1.0, 2.0], 1e-9),
            Err(MetricError::BadGrid)
        );
    }

    fn uniform_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn decaying_exponential_is_completely_monotone() {
        let g = uniform_grid(0.1, 8.0, 200);
        let report = check_complete_monotonicity(|t: f64| (-t).exp(), &g, 4, 1e-9).unwrap();
        assert!(report.passes, "worst {}", report.worst_violation);
        assert_eq!(report.orders_checked, 4);
    }

    #[test]
    fn inverse_of_one_plus_sqrt_is_completely_monotone() {
        let g = uniform_grid(0.05, 6.0, 300);
        let report =
            check_complete_monotonicity(|t: f64| 1.0 / (1.0 + t.sqrt()), &g, 4, 1e-9).unwrap();
        assert!(report.passes, "worst {}", report.worst_violation);
    }

    #[test]
    fn exotic_kernel_is_completely_monotone_away_from_its_singularity() {
        let f = |t: f64| (-(t - 1.0) / t.ln()).exp();
        let low = uniform_grid(0.05, 0.95, 150);
        let high = uniform_grid(1.05, 8.0, 200);
        assert!(check_complete_monotonicity(f, &low, 4, 1e-6).unwrap().passes);
        assert!(check_complete_monotonicity(f, &high, 4, 1e-6).unwrap().passes);
    }

    #[test]
    fn growing_function_fails_complete_monotonicity() {
        let g = uniform_grid(0.1, 5.0, 100);
        let report = check_complete_monotonicity(|t| t, &g, 2, 1e-9).unwrap();
        assert!(!report.passes);
    }

    #[test]
    fn monotonicity_check_validates_the_grid() {
        assert_eq!(
            check_complete_monotonicity(|t| t, &[0.0, 1.0, 2.0], 2, 1e-9),
            Err(MetricError::NonUniformGrid)
        );
        assert_eq!(
            check_complete_monotonicity(|t| t, &[1.0, 2.0, 4.0], 2, 1e-9),
            Err(MetricError::NonUniformGrid)
        );
        assert!(matches!(
            check_complete_monotonicity(|t| t, &[1.0, 2.0], 3, 1e-9),
            Err(MetricError::GridTooSmall { .. })
        ));
    }

    #[test]
    fn report_serializes_with_the_declared_field_names() {
        let report = QuasiMetricReport {
            max_triangle_ratio: 0.9,
            symmetry_defect: 0.0,
            identity_defect: 0.0,
            implied_c: 1.0,
        };
        let json = serde_json::to_value(&report).unwrap();
        assert!(json.get("implied_C").is_some());
        assert!(json.get("max_triangle_ratio").is_some());
    }
}
