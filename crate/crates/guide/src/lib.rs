//! The chapters of `book/` as doc-tests, so every snippet in the guide is
//! compiled and run by `cargo test`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/feature-store.md")]
pub mod feature_store {}

#[doc = include_str!("../../../book/src/ssd.md")]
pub mod ssd {}

#[doc = include_str!("../../../book/src/encoder.md")]
pub mod encoder {}

#[doc = include_str!("../../../book/src/pretraining.md")]
pub mod pretraining {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/interpretability.md")]
pub mod interpretability {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
