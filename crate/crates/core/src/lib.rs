//! Flood extent mapping on elevation-ordered hidden Markov trees.
//!
//! A DEM is turned into a flow tree where every pixel's parents are the
//! lower regions that drain into it. Flood labels obey a partial order along
//! the tree (a flooded node implies flooded parents) and spectral bands
//! supply per-pixel Gaussian evidence. Exact posteriors and the MAP map come
//! from message passing; parameters are fit by EM.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod cli;
pub mod eval;
pub mod infer;
pub mod learn;
pub mod model;
pub mod raster;
pub mod synth;
pub mod tree;

pub use infer::{max_sum, sum_product, Evidence, NodeFeatures, Posteriors};
pub use learn::{em_fit, EmConfig, EmTrace};
pub use model::ModelParams;
pub use raster::{Grid, SceneBundle};
pub use tree::{build_flow_tree, Connectivity, FlowTree};
