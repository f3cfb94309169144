//! Next-event log anomaly detection with a from-scratch attention network.
//!
//! Sessions of templated log events are windowed, a small transformer
//! encoder learns to predict the next event, and a session is anomalous when
//! an observed event falls outside the model's top-k candidates or was never
//! seen in training.

pub mod checkpoint;
pub mod datagen;
pub mod detection;
pub mod error;
pub mod model;
pub mod ngram;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use pipeline::EventId;
pub use tensor::Matrix;
