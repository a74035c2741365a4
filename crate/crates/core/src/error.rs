use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("control weight not invertible")]
    ControlWeightSingular,
    #[error("mass matrix singular at theta = {theta}")]
    MassMatrixSingular { theta: f64 },
    #[error("defective matrix unsupported")]
    Defective,
    #[error("left eigenvector matrix ill-conditioned (cond = {0:e})")]
    IllConditionedEigenvectors(f64),
    #[error("hyperbolicity violated: eigenvalue with real part {0:e}")]
    HyperbolicityViolated(f64),
    #[error("not a Hamiltonian spectrum: {unstable} unstable eigenvalues, expected {expected}")]
    NotHamiltonianSpectrum { unstable: usize, expected: usize },
    #[error("complementarity condition fails: D2 singular (cond = {0:e})")]
    ComplementarityFails(f64),
    #[error("Lagrangian subspace not symmetric (relative asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("Riccati solution not stabilizing (max closed-loop real part {0:e})")]
    NotStabilizing(f64),
    #[error("underdetermined: {samples} samples for {functions} basis functions")]
    Underdetermined { samples: usize, functions: usize },
    #[error("Gram matrix numerically singular (cond = {0:e}); basis not independent on this sample")]
    SingularGram(f64),
    #[error("G2 singular at x = {0:?}")]
    G2Singular(Vec<f64>),
    #[error("value basis unidentifiable from samples")]
    Unidentifiable,
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
