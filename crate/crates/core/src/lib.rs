pub mod autodiff;
pub mod baselines;
pub mod data_io;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod forward_model;
pub mod geometry;
pub mod graphs;
pub mod inverse_model;
pub mod nn;
pub mod scalar;
pub mod signal_prep;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type PreparedSplitF64 = dataset::PreparedSplit<f64>;
pub type PreparedSplitF32 = dataset::PreparedSplit<f32>;
pub type TrainedRunF64 = training::TrainedRun<f64>;
pub type TrainedRunF32 = training::TrainedRun<f32>;
pub type ParamStoreF64 = nn::ParamStore<f64>;
pub type ParamStoreF32 = nn::ParamStore<f32>;
