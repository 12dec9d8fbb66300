use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    /// The chain induced by a policy has more than one closed class.
    #[error("non-ergodic chain ({nullity}-dimensional null space) induced by policy {policy}")]
    NonErgodic { nullity: usize, policy: String },

    #[error("chain did not mix within {cap} steps (last TV distance {last_tv:.3e})")]
    MixingTimeout { cap: usize, last_tv: f64 },

    /// No policy reaches the constraint level; carries the best achievable constraint value.
    #[error("constraint infeasible: required {required}, best achievable {best_v_e}")]
    Infeasible { required: f64, best_v_e: f64 },

    #[error("{mechanism} reward needs a non-empty policy set")]
    EmptyPolicySet { mechanism: &'static str },

    #[error("prior is not normalized (sum = {sum})")]
    NonNormalizedPrior { sum: f64 },

    #[error("bounding weight vector has zero norm")]
    DegenerateWeight,

    #[error("distribution has non-positive entry {value} at index {index}")]
    NotStrictlyPositive { index: usize, value: f64 },

    #[error("enumeration of {count} policies exceeds the cap of {cap}")]
    EnumerationTooLarge { count: u128, cap: u128 },

    #[error("internal consistency failure: {0}")]
    Internal(String),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
