//! File formats, the LLM gateway and the stage pipeline around
//! [`diffrank_core`].

pub mod digest;
pub mod gateway;
pub mod io;
pub mod pipeline;

pub use diffrank_core::{augment, datamodel, eval, gspo, irt, nn, ranker, rng, stats};
