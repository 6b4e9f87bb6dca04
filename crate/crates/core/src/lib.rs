pub mod cli;
pub mod compute;
pub mod data;
pub mod embed_client;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod mem;
pub mod model;
pub mod predictor;
pub mod training;

pub use error::{MsgcaError, Result};
pub use model::{Model, ModelConfig, Variant};
pub use training::TrainConfig;
