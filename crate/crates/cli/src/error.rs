use std::path::PathBuf;

use kptransfer::datasets::DataError;
use kptransfer::eval::EvalError;
use kptransfer::training::TrainError;
use kptransfer::transfer::TransferError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {detail}")]
    Config { path: PathBuf, detail: String },
    #[error("{0}")]
    Missing(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    /// 0 success, 2 usage/config, 3 IO or missing artifact, 4 numeric
    /// abort, 5 inconsistent inputs.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Missing(_) => 3,
            CliError::Data(e) => data_code(e),
            CliError::Train(e) => train_code(e),
            CliError::Transfer(e) => match e {
                TransferError::Train(t) => train_code(t),
                _ => 2,
            },
            CliError::Eval(e) => match e {
                EvalError::Net(_) => 2,
                _ => 5,
            },
        }
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Invalid(_) => 2,
        _ => 3,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::NonFinite { .. } | TrainError::NonFiniteGradient(_) => 4,
        TrainError::Data(d) => data_code(d),
        _ => 2,
    }
}
