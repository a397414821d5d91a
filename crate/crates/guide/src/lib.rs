//! The book's chapters, included so `cargo test` runs their snippets.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/collapsed.md")]
pub mod collapsed {}

#[doc = include_str!("../../../book/src/optimal_v.md")]
pub mod optimal_v {}

#[doc = include_str!("../../../book/src/stochastic.md")]
pub mod stochastic {}

#[doc = include_str!("../../../book/src/poisson.md")]
pub mod poisson {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
