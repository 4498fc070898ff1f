//! Volatility-surface forecasting: Black-Scholes pricing, surface
//! construction, the forecasting models and their training harness.

pub mod black_scholes;
pub mod error;
pub mod models;
pub mod surface;
pub mod train;
