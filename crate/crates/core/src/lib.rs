pub mod checkpoint;
pub mod config;
pub mod error;
pub mod mdm;
pub mod model;
pub mod repurpose;
pub mod seed;
pub mod synth;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{MultiwayConfig, MultiwayModel};
pub use tensor::{Scalar, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = MultiwayModel<f32>;
pub type Model64 = MultiwayModel<f64>;
