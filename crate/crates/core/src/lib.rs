//! Retrieval-augmented language modeling on a CPU: a tape-based autodiff
//! engine, a small decoder-only transformer, an exact nearest-neighbour
//! datastore, kNN-LM scoring and the memory decoder that learns to imitate
//! retrieval.
//!
//! The guide in `book/` walks through each module; its snippets run as
//! doctests of this crate.

pub mod corpus;
pub mod datastore;
pub mod distribution;
pub mod error;
pub mod eval;
pub mod lm;
pub mod synth;
pub(crate) mod io;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/corpora.md")]
    mod corpora {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/memory-decoder.md")]
    mod memory_decoder {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/persistence.md")]
    mod persistence {}
}
