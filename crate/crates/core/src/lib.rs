//! Hierarchical language model for graph reasoning: graph generation and task
//! oracles, graph-to-text serialization, dataset construction, the two-block
//! model, training and attribution analyses.

pub mod dataset;
pub mod graph;
pub mod interpret;
pub mod model;
pub mod text;
pub mod train;

use thiserror::Error;

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Text(#[from] text::TextError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Interpret(#[from] interpret::InterpretError),
    #[error(transparent)]
    Tensor(#[from] hlmg_tensor::TensorError),
}

impl Error {
    /// The I/O error at the root of this error, if any.
    pub fn io_kind(&self) -> Option<std::io::ErrorKind> {
        use dataset::DatasetError as D;
        use model::ModelError as M;
        let from_model = |m: &M| match m {
            M::Io { source, .. } => Some(source.kind()),
            _ => None,
        };
        let from_dataset = |d: &D| match d {
            D::Io { source, .. } => Some(source.kind()),
            _ => None,
        };
        match self {
            Error::Dataset(d) => from_dataset(d),
            Error::Model(m) => from_model(m),
            Error::Train(t) => match t {
                train::TrainError::Io { source, .. } => Some(source.kind()),
                train::TrainError::Model(m) => from_model(m),
                train::TrainError::Dataset(d) => from_dataset(d),
                _ => None,
            },
            Error::Interpret(i) => match i {
                interpret::InterpretError::Io { source, .. } => Some(source.kind()),
                interpret::InterpretError::Model(m) => from_model(m),
                interpret::InterpretError::Dataset(d) => from_dataset(d),
                _ => None,
            },
            _ => None,
        }
    }

    /// True for a checkpoint built for a different configuration.
    pub fn is_mismatch(&self) -> bool {
        use model::ModelError::Mismatch;
        matches!(
            self,
            Error::Model(Mismatch(_))
                | Error::Train(train::TrainError::Model(Mismatch(_)))
                | Error::Interpret(interpret::InterpretError::Model(Mismatch(_)))
        )
    }
}
