use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("Maxwellian correction did not converge (moment defect {defect:.3e})")]
    Newton { defect: f64 },
    #[error("degenerate moments: rho = {rho:.3e}")]
    Degenerate { rho: f64 },
    #[error("missing input: {0}")]
    Missing(String),
    #[error("right-hand side not orthogonal to the null space (moments {moments:?})")]
    Solvability { moments: Vec<f64> },
    #[error("cost guard: {0}")]
    CostGuard(String),
    #[error("operator assembly: {0}")]
    Assembly(String),
    #[error("positivity lost at t = {t:.4e}")]
    BlowUp { t: f64 },
    #[error("time step violates stability limit: {0}")]
    Cfl(String),
    #[error("resolution: {0}")]
    Resolution(String),
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("inconsistent discretisation: {0}")]
    Inconsistent(String),
    #[error("stage k={k} {stage}: {source}")]
    Stage {
        k: usize,
        stage: &'static str,
        source: Box<Error>,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("fit: {0}")]
    Fit(String),
    #[error("stage ordering: {0}")]
    Dependency(String),
}

impl Error {
    pub fn at(self, k: usize, stage: &'static str) -> Error {
        Error::Stage {
            k,
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad input rather than numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Grid(_) | Error::Params(_) | Error::Io(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
