pub mod augment;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, Tensor, Var};
pub use data::{Dataset, RawDataset, SynthConfig, TimeSeriesSample};
pub use metrics::{MetricReport, TaskKind};
pub use pipeline::{CludaModel, TrainConfig, Trainer, Variant};
