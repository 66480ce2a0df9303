//! Dynamic half of the toolkit: training-phase capture and crawling,
//! model generation, and the enforcing proxy.

pub mod enforcer;
pub mod http;
pub mod model;
pub mod trainer;
