//! Trainable snowflake quasi-metrics and the machinery to study them.
//!
//! The crate is organized around a single idea: a *snowflake* transform
//! `f` turns one distance into another by post-composition, `d_f(x, y) =
//! f(d(x, y))`. When `f` is concave, increasing, and vanishes at zero the
//! result is again a metric; raising it to a power `1 + |p|` relaxes the
//! triangle inequality by a known constant and buys considerable extra
//! representation power. Everything here is built on that transform:
//!
//! * [`quasimetric`] — the closed-form snowflake activation distance and
//!   numeric verifiers for metric/quasi-metric axioms.
//! * [`net`] — the trainable neural snowflake: stacked tensorized
//!   activations with non-negative weights and a final power layer,
//!   with exact reverse-mode gradients.
//! * [`mlp`] — a plain ReLU encoder with manual gradients.
//! * [`graph`] — weighted graphs, geodesics, distortion, and the
//!   synthetic target metrics used by the experiment harness.
//! * [`embed`] — analytic, training-free embedding oracles: the critical
//!   snowflake exponent, classical-MDS embedding of snowflaked metrics,
//!   and exponential-sum interpolation.
//! * [`train`] — Adam, pairwise-distance regression, and the synthetic
//!   experiment loop.
//! * [`latent`] — latent graph inference: edge probabilities, Gumbel
//!   top-k sampling, reward-weighted graph-learning loss, and a minimal
//!   graph-convolution stack.
//! * [`suites`] — named verification suites for the CLI and CI.
//!
//! The `book/` directory in the repository root walks through the same
//! material chapter by chapter; its code snippets are compiled as
//! doc-tests of this crate.

pub mod embed;
pub mod graph;
pub mod latent;
pub mod mlp;
pub mod net;
pub mod quasimetric;
pub mod suites;
pub mod train;

mod book;

pub use embed::{
    critical_exponent, fit_exponential_sum, schoenberg_embed, verify_snowflake_universality,
    Embedding, EmbeddingResult, ExponentialSum,
};
pub use graph::{
    aspect_ratio, distortion, geodesic_distances, sample_pointcloud, synthetic_target,
    DistanceMatrix, MetricId, WeightedGraph,
};
pub use mlp::{Mlp, MlpGradients};
pub use net::{tensorized_activation, NeuralSnowflake, SnowflakeGradients, SnowflakeLayer};
pub use quasimetric::{
    check_complete_monotonicity, check_metric_generator, check_quasimetric, snowflake_distance,
    QuasiMetricReport, SnowflakeParams,
};
pub use train::{adam_step, run_experiment, AdamState, ExperimentConfig, ExperimentReport, ModelKind};
