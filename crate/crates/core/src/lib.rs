//! Variable codebook-size quantization laboratory.
//!
//! Position `t` of a token sequence may only use the first `K_t` entries of
//! a shared codebook, with `K_t` growing along the sequence. The crate covers
//! the closed-form schedule arithmetic ([`schedule`]), the prefix-restricted
//! quantizer ([`quantizer`]), exact empirical conditional entropy of token
//! corpora ([`entropy`]), a count-based autoregressive model with
//! codebook-size-aware guidance ([`generation`]) and a small end-to-end
//! image pipeline that exercises all of them ([`toylab`]).
//!
//! Batch work runs on rayon when the `parallel` feature is enabled (the
//! default); see [`Execution`].

pub mod corpus;
pub mod entropy;
mod error;
mod exec;
pub mod format;
pub mod generation;
pub mod quantizer;
pub mod schedule;
pub mod toylab;

pub use corpus::TokenCorpus;
pub use error::{Result, VcqError};
pub use exec::Execution;
pub use quantizer::Codebook;
pub use schedule::{Family, Schedule};
