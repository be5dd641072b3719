//! The rendered user guide, pulled in so its examples compile and run.
//!
//! Each chapter under `book/` is included as the documentation of an empty
//! module, which makes every fenced Rust snippet in the guide a doc-test.
//! The book can never claim something the crate no longer does.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/cascade.md")]
pub mod cascade {}

#[doc = include_str!("../../../book/src/confidence.md")]
pub mod confidence {}

#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}

#[doc = include_str!("../../../book/src/cost-accounting.md")]
pub mod cost_accounting {}

#[doc = include_str!("../../../book/src/record-replay.md")]
pub mod record_replay {}

#[doc = include_str!("../../../book/src/sweeps.md")]
pub mod sweeps {}

#[doc = include_str!("../../../book/src/sandbox.md")]
pub mod sandbox {}

#[doc = include_str!("../../../book/src/datasets.md")]
pub mod datasets {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
