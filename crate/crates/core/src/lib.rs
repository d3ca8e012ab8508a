//! Long-horizon forecasting with multi-period decomposition and
//! period-sized tokens.
//!
//! Data flows `data` -> `spectral` (period detection) -> `decomposition`
//! (seasonal/trend components) -> `model` (one branch per component) ->
//! `training`. The autodiff engine lives in `tensor`.

pub mod bench;
pub mod config;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod model;
pub mod series;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use config::{AblationFlags, ModelConfig, RunConfig, TrainConfig};
pub use data::{Dataset, NormStats, Split, WindowSample};
pub use decomposition::{mpsd, PeriodSpec, SeriesGroup};
pub use error::{Error, Result};
pub use model::{Forecast, Model};
pub use series::Series;
pub use spectral::{rfft_magnitude, top_k_periods, PeriodDetection};
pub use tensor::{grad_check, GradCheck, Gradients, Scalar, Tape, Tensor, Var};
pub use training::{EvalReport, History};
