//! Control plane for instruction-level weight shaping: a typed, versioned
//! knowledge state edited by reflection-proposed deltas that are deployed
//! provisionally and kept only when user ratings improve significantly.

pub mod knowledge;
pub mod stats;
pub mod gate;
pub mod reflection;
pub mod tools;
pub mod store;
pub mod distill;
pub mod engine;
pub mod backbone;
pub mod config;
pub mod service;
pub mod sim;
