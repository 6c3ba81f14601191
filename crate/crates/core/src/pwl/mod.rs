//! Piecewise-linear approximation of scalar nonlinear functions.
//!
//! The elastic approximation combines three steps: adaptive segment widths
//! ([`horizontal_size_optimization`]), chord fitting ([`chord_fit`]) and
//! per-segment intercept shifts that match the function's mean
//! ([`vertical_bias_correction`]). [`build_elastic`] runs all three.

mod analysis;
mod correction;
mod fit;
mod func;
mod horizontal;
pub mod quad;
mod table;

pub use analysis::{max_abs_error, mse, segment_mse, Weighting};
pub use correction::{expectation_bias, expectation_biases, segment_mean, vertical_bias_correction};
pub use fit::{
    build_elastic, build_elastic_detailed, chord_fit, fit_uniform, fit_uniform_corrected,
    uniform_breakpoints,
};
pub use func::{
    gelu_f32, gelu_stationary_point, Affine, Monotonicity, MonotonePiece, NonlinearFunc,
    ScalarFunction,
};
pub use horizontal::{horizontal_size_optimization, HorizontalPlan, StepWarning};
pub use table::{ElasticConfig, PwlTable};
