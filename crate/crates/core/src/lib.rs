//! Selective dependence classification (SDC) tasks and focus-classify
//! attention models (FCAM): mosaic data generation, differentiable training
//! with several attention activations, and objective measurement of whether
//! the attention actually points at the segment that determines the label.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod experiment;
pub mod error;
pub mod fcam;
pub mod metrics;
pub mod par;
pub mod plot;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Result, SdcError};
pub use tensor::Tensor;
