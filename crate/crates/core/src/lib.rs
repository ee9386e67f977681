//! Simulation and averaging toolkit for slow-fast stochastic differential
//! equations.
//!
//! The crate simulates coupled systems
//!
//! ```text
//! dX = (1/eps)   b(X, Y) dt + (1/sqrt(eps)) sigma(X, Y) dW1
//! dY = F(t, X, Y) dt       +                G(t, X, Y) dW2
//! ```
//!
//! with Hölder-continuous slow coefficients, estimates the invariant
//! measure of the frozen fast equation, builds the averaged (effective)
//! slow equation from it, and measures how fast the slow component
//! converges to the effective one as eps shrinks, both pathwise and in
//! distribution. Mollified coefficient approximations and the Poisson
//! equation of the fast generator, the two analytic devices behind those
//! convergence rates, are exercised numerically as well.
//!
//! All randomness is counter-based: every Gaussian draw is a pure function
//! of (seed, stream, index), so results are reproducible bit for bit at
//! any thread count.

pub mod averaging;
pub mod error;
pub mod field;
pub mod harness;
pub mod integrate;
pub mod linalg;
pub mod mollify;
pub mod noise;
pub mod poisson;
pub mod system;
pub mod validate;
pub mod zoo;

pub use averaging::{
    autocorr_time, averaged_diffusion, averaged_drift, build_effective_system,
    effective_sample_size, estimate_invariant_measure, AveragingOptions, EffectiveSystem,
    InvariantMeasureEstimate, MeasureConfig, Provenance,
};
pub use error::{SfError, SfResult};
pub use field::{
    matrix_field, vector_field, CoefficientField, HolderMeta, OutputShape, Reads,
};
pub use harness::{
    fit_rate, localized_convergence_smoke, pde_limit_experiment, refinement_gate, strong_error,
    weak_error, ErrorTable, LocalizedSmoke, Observable, PdeLimitResult, PdeProbe, RateFit,
    StabilityCheck,
};
pub use integrate::{
    em_step_coupled, simulate_coupled, simulate_effective, simulate_frozen, CoupledNoise,
    EffectiveDynamics, FrozenStepper, StepPlan, Trajectory, BLOWUP_THRESHOLD, STABILITY_FACTOR,
};
pub use linalg::spd_sqrt;
pub use mollify::{
    derivative_growth_scan, gauss_legendre, mollify_field, sup_error_scan, GrowthScan,
    MollifiedField, MollifierKernel, ScanGrid, ScanResult, DEFAULT_QUAD_ORDER,
};
pub use poisson::{
    center, check_centering, estimate_semigroup, growth_probe, residual_check, solve_poisson_mc,
    GrowthProbe, PoissonProblem, PoissonSolution, ResidualReport,
};

pub use noise::{
    coupled_pair, split_macro_increment, standard_normal, Channel, NoiseSource, StreamId,
};
pub use system::{FrozenSystem, SlowFastSystem};
pub use zoo::{get_zoo, list_zoo, ZooEntry, DEFAULT_EPSILON};
pub use validate::{validate_system, SamplingPlan, ValidationReport};
