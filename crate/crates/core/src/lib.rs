//! Handwritten text-line recognition with a recurrent CNN+BLSTM baseline and a
//! recurrence-free gated convolutional network, trained with CTC.

pub mod augment;
pub mod ctc;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod preprocess;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Mode, Param, ParamStore, Tensor, Var};
