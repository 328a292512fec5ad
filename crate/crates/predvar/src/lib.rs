//! Predictive-variance decomposition of finite-width deep ensembles.
//!
//! The crate builds linearized (kernel) and gradient-descent-trained MLP
//! ensembles, isolates the functional-initialization and kernel noise sources
//! in their predictive variance, and evaluates the resulting terms for width
//! scaling laws and out-of-distribution detection.

pub mod linalg;
pub mod nn;
pub mod ntk;
pub mod experiments;
pub mod io;
pub mod seeds;
pub mod analytic;
pub mod data;
pub mod gd_models;
pub mod kernel_models;
pub mod metrics;
pub mod variance;

pub(crate) mod par;
