//! Support tensor train machines.
//!
//! Tensor-shaped samples are compressed into tensor trains and classified by a
//! max-margin hyperplane whose weight tensor is itself a tensor train. Training
//! alternates over the weight cores, solving one linear SVM per core while the
//! train is kept in a mixed-canonical form centred on the active core. Plain
//! linear SVM and rank-1 support tensor machine (STM) baselines share the same
//! inner solver.

pub mod data;
pub mod error;
pub mod linalg;
pub mod multiclass;
pub mod persist;
pub mod stm;
pub mod sttm;
pub mod svm;
pub mod tensor;
pub mod tt;

pub use error::{Error, Result};
pub use tensor::DenseTensor;
pub use tt::TensorTrain;
