//! Second-order error calculus and its numerical checks.

pub mod approximation;
pub mod bias_operators;
pub mod error;
pub mod error_algebra;
pub mod fisher;
pub mod functions;
pub mod linalg;
pub mod mc;
pub mod structures;

pub use approximation::{
    classify_regime, estimate_moments, make_scheme, propagate_through, ApproximationScheme,
    SchemeKind, SchemeParams,
};
pub use bias_operators::{OperatorKind, TestFunctionBasis, WeakOperatorEstimate};
pub use error::{Error, Result};
pub use error_algebra::{
    gauss_covariance, naive_propagate, propagate, square_identity_residual, ErroneousValue,
    NaiveErrorValue, SmoothMap,
};
pub use fisher::{FisherMethod, ParametricModel};
pub use functions::TestFunction;
pub use mc::Estimate;
pub use structures::{ErrorStructure, StructureKind, StructureParams};
