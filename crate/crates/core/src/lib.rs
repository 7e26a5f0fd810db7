pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod lm;
pub mod objectives;
pub mod optim;
pub mod pool;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod translator;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{grad_check, grad_check_param, no_grad, Tensor, TensorData};
