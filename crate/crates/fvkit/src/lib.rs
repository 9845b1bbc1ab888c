//! Function-vector extraction and steering toolkit for causal language
//! models.
//!
//! The crate extracts compact task representations from a model's attention
//! heads — from in-context demonstrations and from textual instructions —
//! scores each head's causal contribution on uninformative baseline prompts,
//! and evaluates the assembled vectors as additive residual-stream
//! interventions. A bundled miniature transformer backs every numeric test.

pub mod analysis;
pub mod baselines;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fv;
pub mod gateway;
pub mod instructions;
pub mod model;
pub mod pipeline;
pub mod store;
pub mod tokenizer;
pub mod toy;

pub use error::{FvError, Result};
