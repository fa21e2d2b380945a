use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrefftzError {
    #[error("resonant {family} mode n={n}: lattice index m={m} gives |denominator| = {denominator:.3e}")]
    Resonance {
        family: &'static str,
        n: usize,
        m: usize,
        denominator: f64,
    },
    #[error("grazing {family} mode n={n}: nu is within tolerance of 1")]
    Grazing { family: &'static str, n: usize },
    #[error("pre-asymptotic regime: nu_Ne = {nu_ne:.6} < sqrt(2), the edge space is too small for kappa*h")]
    PreAsymptotic { nu_ne: f64 },
    #[error("empty mesh: the domain does not meet the grid")]
    EmptyMesh,
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("singular point: {0}")]
    Singular(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, TrefftzError>;

impl TrefftzError {
    pub(crate) fn with_family(self, family: &'static str) -> Self {
        match self {
            TrefftzError::Resonance {
                n, m, denominator, ..
            } => TrefftzError::Resonance {
                family,
                n,
                m,
                denominator,
            },
            TrefftzError::Grazing { n, .. } => TrefftzError::Grazing { family, n },
            other => other,
        }
    }
}
