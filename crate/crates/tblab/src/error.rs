//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by lattice construction, model assembly, spectral
/// computations and experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    /// A size or count parameter is outside its documented range.
    #[error("invalid size for {what}: got {got}, need at least {min}")]
    InvalidSize {
        what: &'static str,
        got: usize,
        min: usize,
    },

    /// A site index does not exist on the lattice.
    #[error("site index {index} out of range for lattice with {len} sites")]
    IndexOutOfRange { index: usize, len: usize },

    /// Two objects that must share a dimension do not.
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A numeric parameter violates its documented constraint.
    #[error("invalid parameter {what}: {detail}")]
    InvalidParameter { what: &'static str, detail: String },

    /// A requested perturbation cannot be made admissible.
    #[error(
        "perturbation with target norm {target_norm} stayed inadmissible after {attempts} resamples"
    )]
    PerturbationTooLarge { target_norm: f64, attempts: usize },

    /// A displacement violates the non-interpenetration margin.
    #[error("displacement is not admissible: closest pair at {min_distance}, margin {margin}")]
    NotAdmissible { min_distance: f64, margin: f64 },

    /// A complex wavevector lies outside the analyticity strip.
    #[error("imaginary wavevector part {zeta_norm} exceeds the strip half-width {limit}")]
    OutOfStrip { zeta_norm: f64, limit: f64 },

    /// The bands around the requested occupation count overlap (metal).
    #[error(
        "no spectral gap above band {n0}: valence max {valence_max} >= conduction min {conduction_min}"
    )]
    NoGap {
        n0: usize,
        valence_max: f64,
        conduction_min: f64,
    },

    /// Gap targets must satisfy 0 < gap_minus <= gap_plus.
    #[error("infeasible gap targets: gap_plus {gap_plus}, gap_minus {gap_minus}")]
    InvalidGapTargets { gap_plus: f64, gap_minus: f64 },

    /// The gap-targeting solver missed its verification tolerance.
    #[error("gap solver failed for targets ({gap_plus}, {gap_minus}): {reason}")]
    SolverFailure {
        gap_plus: f64,
        gap_minus: f64,
        reason: String,
    },

    /// The Fermi level is numerically inside the spectrum.
    #[error("Fermi level {eps_f} is within {dist} of an eigenvalue (tolerance {tol})")]
    FermiLevelInSpectrum { eps_f: f64, dist: f64, tol: f64 },

    /// A contour does not cleanly enclose the occupied spectrum.
    #[error("invalid contour: {0}")]
    InvalidContour(String),

    /// Contour quadrature failed to converge below the node cap.
    #[error("contour quadrature did not converge at {nodes} nodes (last residual {residual})")]
    QuadratureFailure { nodes: usize, residual: f64 },

    /// A resolvent was requested at a point too close to the spectrum.
    #[error("resolvent point is within {dist} of the spectrum (tolerance {tol})")]
    ResolventPoleTooClose { dist: f64, tol: f64 },

    /// An occupied/unoccupied eigenvalue pair is numerically degenerate.
    #[error("ill-conditioned derivative: occupied/unoccupied gap {denom} below 1e-12")]
    IllConditionedDerivative { denom: f64 },

    /// Too few usable samples for a regression.
    #[error("fit failure: {usable} usable samples, need at least {needed}")]
    FitFailure { usable: usize, needed: usize },

    /// A regression with duplicated abscissae.
    #[error("degenerate regression: {0}")]
    DegenerateRegression(String),

    /// The spectral-shift inequality was violated beyond tolerance.
    #[error(
        "spectral shift check violated: Hausdorff distance exceeds Frobenius norm by {excess} at |zeta| = {zeta_norm}"
    )]
    SpectralShiftViolation { zeta_norm: f64, excess: f64 },

    /// File output failed.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
