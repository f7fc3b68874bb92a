use core::fmt;

use crate::mdp::MixingFit;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An MDP failed validation. `index` is the first offending row
    /// (`s * n_actions + a` for transition rows, `None` for the initial
    /// distribution or dimensions).
    InvalidMdp {
        reason: &'static str,
        index: Option<usize>,
    },
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    InvalidArgument(&'static str),
    /// Power iteration did not settle, or two starts reached different
    /// fixed points.
    NonErgodicChain(&'static str),
    /// The chain is already mixed after one step; carries the exact
    /// `(chi = 1, upsilon = eps)` record.
    DegenerateDecay(MixingFit),
    /// A chain was paired with a policy it was not built from.
    ChainMismatch,
    /// The augmented Poisson system has a null space beyond the constant one.
    SingularSystem,
    BallViolation {
        norm: f64,
        kappa: f64,
    },
    InsufficientHistory,
    InfeasibleConstants(&'static str),
    TrajectoryTooShort {
        min_len: usize,
    },
    /// An iterate became NaN or infinite.
    NonFinite {
        iteration: usize,
    },
    /// The requested expert policy cannot be expressed by the softmax class.
    ExpertNotRepresentable,
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidMdp { reason, index: Some(i) } => {
                write!(f, "invalid MDP: {reason} (row {i})")
            }
            Error::InvalidMdp { reason, index: None } => write!(f, "invalid MDP: {reason}"),
            Error::DimensionMismatch { what, expected, found } => {
                write!(f, "dimension mismatch for {what}: expected {expected}, found {found}")
            }
            Error::IndexOutOfRange { what, index, len } => {
                write!(f, "{what} index {index} out of range (len {len})")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonErgodicChain(msg) => write!(f, "chain is not ergodic: {msg}"),
            Error::DegenerateDecay(_) => write!(f, "chain mixes in one step; decay fit is degenerate"),
            Error::ChainMismatch => write!(f, "chain was built from a different policy"),
            Error::SingularSystem => write!(f, "Poisson system is rank deficient"),
            Error::BallViolation { norm, kappa } => {
                write!(f, "reward parameter norm {norm} exceeds ball radius {kappa}")
            }
            Error::InsufficientHistory => write!(f, "not enough iterates to evaluate the potential"),
            Error::InfeasibleConstants(msg) => write!(f, "infeasible constants: {msg}"),
            Error::TrajectoryTooShort { min_len } => {
                write!(f, "trajectory too short; need at least {min_len} steps")
            }
            Error::NonFinite { iteration } => write!(f, "non-finite iterate at iteration {iteration}"),
            Error::ExpertNotRepresentable => {
                write!(f, "expert policy is not representable by the softmax class")
            }
        }
    }
}

impl core::error::Error for Error {}
