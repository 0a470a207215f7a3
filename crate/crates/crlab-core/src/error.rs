use thiserror::Error;

pub type Result<T> = std::result::Result<T, CrError>;

#[derive(Debug, Clone, Error)]
pub enum CrError {
    #[error("point {point:?} is outside the chart domain of {model}")]
    DomainExit { model: String, point: Vec<f64> },

    #[error("expected a point of length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("Levi form is not positive definite (smallest eigenvalue {0:e})")]
    NotPseudoconvex(f64),

    #[error("linear system is rank deficient: rank {rank} of {expected}")]
    RankDeficient { rank: usize, expected: usize },

    #[error("{what} residual {residual:e} exceeds tolerance {tol:e}")]
    Residual {
        what: &'static str,
        residual: f64,
        tol: f64,
    },

    #[error("|a| = {norm:e} exceeded the blow-up bound at t = {t}")]
    BlowUp { t: f64, norm: f64 },

    #[error("curve is not transverse at sample {index}: |θ(γ')| = {value:e}")]
    NotTransverse { index: usize, value: f64 },

    #[error("degenerate map: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
