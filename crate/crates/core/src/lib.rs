//! Tensorized ordinary least squares (T-OLS) for learning functions generated by
//! deep networks, plus the orthogonal-polynomial tooling used to bound the
//! conditioning of the monomial design.

// guards of the form `!(x > 0.0)` reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approx;
pub mod data_io;
pub mod distributions;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod networks;
pub mod orthopoly;
pub mod tensorize;
pub mod tols;

pub use approx::{Activation, PolyApprox};
pub use distributions::{MeasureSpec, Moments, SupportSize};
pub use error::{Error, IdxError, Result};
pub use harness::{Experiment, ExperimentConfig, RunOutcome};
pub use imaging::{ImageDataset, StackedClassifier};
pub use networks::NetworkParams;
pub use orthopoly::{EigenBounds, OrthoBasis, SigmaDecomposition};
pub use tensorize::{ConvFeatureMap, FeatureVector, GradedOrder, MultiIndex, MultiplicitiesSet};
pub use tols::{DesignMatrix, Predictor, SolverDiagnostics};
