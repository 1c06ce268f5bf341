use core::fmt;

/// Error type shared across the crate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Error {
    /// An argument lies outside the mathematical domain of the operation.
    Domain(&'static str),
    /// Inputs are structurally inconsistent (length or junction mismatches).
    Structure(&'static str),
    /// Rejection sampling exhausted its attempt budget. Retryable with a
    /// larger budget or a coarser grid; carries the attempt count.
    Saturated { attempts: u64 },
    /// An estimated factor came out unusable (zero or negative where a
    /// positive quantity is required); names the offending factor.
    Degenerate(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Structure(msg) => write!(f, "structural error: {msg}"),
            Error::Saturated { attempts } => {
                write!(f, "rejection sampling saturated after {attempts} attempts")
            }
            Error::Degenerate(what) => write!(f, "degenerate estimate: {what}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
