//! Graph-based approximate nearest neighbor search.

pub mod dataset;
pub mod distance;
pub mod graph;
pub mod reorder;
pub mod search;
pub mod quantization;
pub mod index;
pub mod persistence;
pub mod bench;
pub mod tune;
