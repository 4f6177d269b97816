//! Next-item recommendation with a small decoder-only language model that
//! reads collaborative-filtering embeddings.
//!
//! User and item factors come from weighted alternating least squares
//! ([`wals`]). Two independent MLPs ([`projectors`]) map them into the token
//! embedding space of a from-scratch transformer ([`nanolm`]), where they
//! replace the user id and history item positions of a prompt rendered from
//! a fixed template set ([`prompts`]). Training ([`train`]) runs in two
//! stages: projectors only against the frozen backbone, then projectors
//! together with LoRA adapters. [`eval`] ranks the whole catalog at the
//! target position and reports HR@k / NDCG@k.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod nanolm;
pub mod pipeline;
pub mod projectors;
pub mod prompts;
pub mod recommender;
pub mod rng;
#[cfg(test)]
mod testutil;
pub mod train;
pub mod wals;

pub use error::{Error, Result};
