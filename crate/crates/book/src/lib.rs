//! mdbook cannot run snippets that depend on workspace crates, so each
//! chapter is pulled in here as a doc comment and `cargo test --doc` runs it.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/canvas.md")]
pub mod canvas {}
#[doc = include_str!("../../../book/src/scores.md")]
pub mod scores {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/operators.md")]
pub mod operators {}
#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
