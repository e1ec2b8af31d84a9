use thiserror::Error;

/// Errors produced by the simulator and the bound calculators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("SNR undefined: noise power {0} is not positive")]
    UndefinedSnr(f64),

    #[error("infinite power budget: schedule variance is zero at round {round}")]
    InfiniteBudget { round: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Returns `Err(InvalidArgument)` with the formatted message when the condition fails.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::InvalidArgument(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
