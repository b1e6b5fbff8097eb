use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors are grouped by the module that raised them.
#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error("data: {0}")]
    Data(String),
    #[error("data: constant predictor column `{0}` cannot be standardized")]
    ConstantColumn(String),
    #[error("data: dimension mismatch: {0}")]
    Dimension(String),
    #[error("numerics: {0}")]
    Numerical(String),
    #[error("empirical bayes: {0}")]
    EmpiricalBayes(String),
    #[error("ecm: {0}")]
    Ecm(String),
    #[error("prediction: {0}")]
    Prediction(String),
    #[error("simulation: {0}")]
    Simulation(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
}
