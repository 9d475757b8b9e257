//! Stochastic flows of diffeomorphisms: simulation of flows and their
//! derivative flows, analytic growth criteria, Monte Carlo moment estimators
//! and semigroup gradient checks.

pub mod app;
pub mod criteria;
pub mod error;
pub mod estimators;
pub mod expr;
pub mod geometry;
pub mod flow;
pub mod scenarios;
pub mod semigroup;
pub mod systems;

pub use error::{FlowError, Result};
