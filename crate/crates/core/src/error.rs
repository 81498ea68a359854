use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid mode permutation: {0}")]
    InvalidPermutation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid rank: {0}")]
    InvalidRank(String),

    /// A Sylvester denominator `λ·Λ_i + Φ_j + ρ` is not safely positive.
    #[error(
        "non-positive Sylvester denominator T[{row},{col}] = {value:e} \
         (laplacian eigenvalue {laplacian_eigval:e}, gram eigenvalue {gram_eigval:e})"
    )]
    NonPositiveDenominator {
        row: usize,
        col: usize,
        value: f64,
        laplacian_eigval: f64,
        gram_eigval: f64,
    },

    #[error("factor update left an imaginary residue of {imag:e} against solution norm {real:e}")]
    ImaginaryResidue { imag: f64, real: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("observed entries violated: {0}")]
    ConstraintViolation(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonPositiveDenominator { .. }
                | Error::ImaginaryResidue { .. }
                | Error::Singular(_)
                | Error::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
