//! Multimodal deep face representation pipeline.
//!
//! End to end: geometric multimodal input generation ([`geometry`]), a
//! small trainable CNN engine ([`nn`]), stacked-auto-encoder feature
//! fusion ([`fusion`]), cosine / Joint Bayesian matching ([`matcher`]),
//! verification and identification protocols ([`eval`]), and dataset
//! plumbing ([`data`]). [`pipeline`] ties the pieces into the single-call
//! representation path.

pub mod data;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod io_util;
pub mod matcher;
pub mod nn;
pub mod pipeline;
