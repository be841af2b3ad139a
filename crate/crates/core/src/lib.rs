#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x >= 0.0)` also rejects NaN

pub mod batch_planner;
pub mod cli;
pub mod curation_service;
pub mod error;
pub mod fixture;
pub mod knowledge_graph;
pub mod pair_builder;
pub mod pipeline;
pub mod profiler;
pub mod record_store;
pub mod vector_engine;

pub use error::{Error, Result};
