//! The guide in `book/` compiled as documentation, so that `cargo test`
//! runs every code block of every chapter as a doc-test. One module per
//! chapter keeps a failing snippet traceable to its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/forecasting.md")]
pub mod forecasting {}

#[doc = include_str!("../../../book/src/gradients.md")]
pub mod gradients {}

#[doc = include_str!("../../../book/src/environments.md")]
pub mod environments {}

#[doc = include_str!("../../../book/src/agents.md")]
pub mod agents {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[doc = include_str!("../../../book/src/self_checks.md")]
pub mod self_checks {}
