//! Binds the mdbook guide's chapters into the crate so every code block
//! in `book/src` compiles and runs under `cargo test --doc`. mdbook
//! cannot inject crate dependencies into its own test runner, so the
//! chapters are re-included here and rustdoc does the work.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/quasimetrics.md")]
mod quasimetrics {}

#[doc = include_str!("../../../book/src/neural_snowflake.md")]
mod neural_snowflake {}

#[doc = include_str!("../../../book/src/graphs.md")]
mod graphs {}

#[doc = include_str!("../../../book/src/embedding_oracles.md")]
mod embedding_oracles {}

#[doc = include_str!("../../../book/src/training.md")]
mod training {}

#[doc = include_str!("../../../book/src/latent_graphs.md")]
mod latent_graphs {}

#[doc = include_str!("../../../book/src/cli.md")]
mod cli {}
