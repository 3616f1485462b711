//! Detection of epidemic (rectangular) change-sets in lattice data.
//!
//! The crate scans every axis-aligned block of a d-dimensional lattice with a
//! CUSUM-type statistic in a Hilbert space, either the plain Euclidean mean
//! scan or a Cramér–von Mises scan built on weighted indicator functions, and
//! calibrates the maximum with a dependent wild bootstrap driven by Gaussian
//! multiplier fields.
//!
//! The numerical core is generic over the scalar type (see [`Scalar`]); the
//! prefix-sum layer in [`lattice`] works for any additive type, including
//! exact integers. Concrete `f64`/`f32` aliases are exported below.

pub mod bootstrap;
pub mod error;
pub mod hilbert;
pub mod io;
pub mod lattice;
pub mod multiplier;
pub mod rng;
pub mod scalar;
pub mod scan;
pub mod sim;

pub use bootstrap::{
    bootstrap_quantile, bootstrap_statistic, p_value, run_test, BootstrapWorkspace, Decision,
    MeanEstimator, StatisticKind, TestConfig, TestReport,
};
pub use error::{Error, Result};
pub use hilbert::{
    center_gram, gram_euclidean, gram_indicator_cvm, weight_survival, CoordinateWeight,
    GramMatrix, MeanAssignment, ObservationField, WeightSpec,
};
pub use lattice::{
    enumerate_blocks, Additive, Block, LatticeShape, PairPrefixTensor, PrefixTensor,
    VolumeBounds, DEFAULT_MEMORY_CAP_BYTES,
};
pub use multiplier::{
    empirical_multiplier_cov, sample_ar_field, sample_ma_field, KernelKind, KernelSpec,
    MonteCarloEstimate, MultiplierField,
};
pub use scalar::Scalar;
pub use scan::{
    estimate_change_set, lrv_estimate, scan_gram, scan_mean_change, Convention, CovMatrix,
    LagWeight, ScanOptions, ScanResult, ZeroLagKernel,
};
pub use sim::{
    gen_ar_field, gen_skewness_change, inject_mean_change, run_experiment, ExperimentConfig,
    FractionalBlock, RejectionRow, RejectionTable, Scenario,
};

pub type ObservationFieldF64 = ObservationField<f64>;
pub type ObservationFieldF32 = ObservationField<f32>;
pub type GramMatrixF64 = GramMatrix<f64>;
pub type GramMatrixF32 = GramMatrix<f32>;
pub type ScanResultF64 = ScanResult<f64>;
pub type ScanResultF32 = ScanResult<f32>;
pub type MultiplierFieldF64 = MultiplierField<f64>;
pub type MultiplierFieldF32 = MultiplierField<f32>;
pub type PrefixTensorF64 = PrefixTensor<f64>;
pub type PairPrefixTensorF64 = PairPrefixTensor<f64>;
