//! Universal few-shot representations distilled from per-domain teachers.
//!
//! The crate covers the whole desk-scale pipeline: a small autodiff engine
//! ([`tensor`]), MLP backbones with per-domain heads and adapters ([`nets`]),
//! the feature and prediction matching losses ([`losses`]), a synthetic
//! multi-domain benchmark with episode sampling ([`data`]), single-domain,
//! multi-domain and distillation training ([`train`]) and the meta-test
//! classifiers plus retrieval metrics ([`eval`]).

pub mod tensor;
pub mod rng;
pub mod nets;
pub mod losses;
pub mod data;
pub mod train;
pub mod eval;
pub mod cli;
