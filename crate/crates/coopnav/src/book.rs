//! Doc-test bridge for the guide under `book/`.
//!
//! Each chapter of the mdbook is included verbatim as the documentation of
//! one module below, so `cargo test` compiles and runs every fenced Rust
//! snippet in the book and the prose can never drift from the API.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/environment.md")]
pub mod environment {}

#[doc = include_str!("../../../book/src/goals.md")]
pub mod goals {}

#[doc = include_str!("../../../book/src/coordination.md")]
pub mod coordination {}

#[doc = include_str!("../../../book/src/learning.md")]
pub mod learning {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
