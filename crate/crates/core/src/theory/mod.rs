//! Empirical checks of the perturbation, gradient-bias, value-amplification
//! and entropy results on small instances.

pub mod entropy;
pub mod gradient_bias;
pub mod repr_bound;
pub mod suites;
pub mod value_amp;

use serde::Serialize;

pub use entropy::{measure_entropy_delta, sign_test_p, EntropyReport};
pub use gradient_bias::{measure_gradient_bias, policy_gradient_lipschitz, GradientBiasCheck};
pub use repr_bound::{certify_latent, linear_bound_check, verify_repr_bound, ReprBoundReport};
pub use suites::{run_suite, SuiteReport, SuiteScale, SUITES};
pub use value_amp::{verify_value_amplification, ValueAmpConfig, ValueAmpReport};

/// Relative slack allowed for floating-point error in bound comparisons.
pub const BOUND_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheckResult {
    pub measured: f64,
    pub bound: f64,
    pub holds: bool,
    /// `bound / measured`, infinite when nothing was measured.
    pub slack_ratio: f64,
}

impl BoundCheckResult {
    pub fn new(measured: f64, bound: f64) -> Self {
        let slack_ratio = if measured == 0.0 {
            f64::INFINITY
        } else {
            bound / measured
        };
        Self {
            measured,
            bound,
            holds: measured <= bound * (1.0 + BOUND_RTOL),
            slack_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub per_layer: Vec<f64>,
    pub product: f64,
}

impl LipschitzEstimate {
    pub fn from_factors(per_layer: Vec<f64>) -> Self {
        let product = per_layer.iter().product();
        Self { per_layer, product }
    }
}
