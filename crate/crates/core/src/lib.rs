//! Robust GNSS positioning: factor-graph fusion of pseudorange and Doppler
//! with graduated non-convexity outlier weighting, plus baselines, a
//! scenario simulator and evaluation diagnostics.

pub mod baselines;
pub mod diagnostics;
pub mod geo;
pub mod gnc;
pub mod graph;
pub mod obs_model;
pub mod sim;
