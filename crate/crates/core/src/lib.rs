//! Retrieve, refactor, generate: retrieval-augmented code generation with a
//! trainable refactorer between the retriever and the generator.
//!
//! Stages, in pipeline order: [`corpus`] builds the knowledge base,
//! [`retrieval`] finds similar examples, [`refactor`] condenses them,
//! [`generate`] calls the generator, [`rl`] tunes the refactorer against
//! the generator's output quality and [`metrics`] scores results.
//! [`pipeline`] wires them into experiment stages and reports.

pub mod corpus;
pub mod metrics;
pub mod parser;
pub mod retrieval;
pub mod tokenizer;
pub mod refactor;
pub mod generate;
pub mod rl;
pub mod pipeline;
pub mod synth;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/refactorer.md")]
    mod refactorer {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}
