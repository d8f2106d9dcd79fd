//! Multivariate time series forecasting that keeps working when entire
//! variables go missing.
//!
//! Sensor networks lose nodes: a loop detector dies, an air-quality station
//! goes offline, and every reading for that variable is gone for the whole
//! horizon. Classical forecasters assume a complete input matrix, and the
//! usual patch of imputing first and forecasting second propagates the
//! imputation error into the forecast. This crate implements an end-to-end
//! alternative: missing variables are recovered *inside* the forecaster from
//! the variables that still report, using attention over a learned
//! correspondence between variables, and the recovered representations feed a
//! graph-convolutional recurrent network that produces all forecast horizons
//! in one shot.
//!
//! The crate is self-contained: it ships its own reverse-mode automatic
//! differentiation tape ([`tensor`]), graph construction utilities
//! ([`graph`]), the attention-based variable recovery ([`ia`]), the recurrent
//! forecasting model ([`model`]), a training engine ([`train`]), a dataset
//! pipeline with controlled variable masking ([`data`]), and an experiment
//! layer with a command line interface ([`experiment`]).
//!
//! The accompanying book under `book/` walks through each concept; its code
//! snippets are compiled and run as doctests via the [`guide`] module.

pub mod baseline;
pub mod data;
pub mod experiment;
pub mod graph;
pub mod guide;
pub mod ia;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod params;
pub mod snapshot;
pub mod tensor;
pub mod train;

pub use tensor::{GradCheckReport, Real, Tape, Tensor, TensorError};
