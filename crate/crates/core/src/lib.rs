//! Region-of-interest VQA toolkit: load and split region-annotated VQA
//! corpora, generate region questions, composite box overlays with alpha
//! blending, score answers, and evaluate models through pluggable adapters.
//!
//! The [`fusion`] module is a small numeric model of a feature-fusion
//! projector with analytic gradients.
//!
//! A guide with runnable examples lives in `book/`.

pub mod compositor;
pub mod corpus;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod roiqa;
pub mod rng;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data-model.md")]
    mod data_model {}
    #[doc = include_str!("../../../book/src/blending.md")]
    mod blending {}
    #[doc = include_str!("../../../book/src/roi-questions.md")]
    mod roi_questions {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
