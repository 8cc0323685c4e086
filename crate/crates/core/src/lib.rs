//! Task-aware soft prompting with selective layer-wise low-rank adaptation on
//! a compact transformer encoder, plus the multi-task training and
//! evaluation harness around it.

pub mod adapters;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numkernel;
pub mod params;
pub mod synthdata;
pub mod task;
pub mod training;

pub use error::{Error, Result};
pub use exec::ExecMode;
pub use model::{ModelConfig, TapSlfModel};
pub use task::Task;
